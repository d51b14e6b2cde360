pub mod config;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod geometry;
pub mod nn;
pub mod rng;
pub mod synthdata;
pub mod training;
pub mod tensor;

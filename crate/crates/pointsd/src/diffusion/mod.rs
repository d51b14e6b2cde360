//! Miniature conditional denoising-diffusion image model: noise schedule,
//! forward corruption, conditional UNet with feature taps, and sampling.

pub mod sample;
pub mod schedule;
pub mod unet;

pub use sample::ancestral_sample;
pub use schedule::{build_noise_schedule, forward_noise, NoiseSchedule};
pub use unet::{
    denoising_loss, extract_features, sinusoidal_embedding, EpsModel, FeatureMap, FeatureTap,
    TapVars, UNet, UNetSpec,
};

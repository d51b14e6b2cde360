//! Named parameter storage, initialization, and the layer building blocks
//! shared by the diffusion UNet and the point-cloud encoders.

mod attention;
mod layers;

pub use attention::*;
pub use layers::*;

use crate::rng;
use crate::tensor::{Arr, Grads, Tape, Var};
use ndarray::IxDyn;
use std::collections::HashMap;
use std::sync::Arc;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PIdx(pub usize);

/// Ordered, named collection of model parameters.
///
/// Parameters are `Arc`-shared so per-sample tapes can reference them without
/// copying. Between optimizer steps all tapes are dropped, so updates go
/// through `Arc::make_mut` without cloning.
#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Arr>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Arr) -> PIdx {
        assert!(!self.index.contains_key(name), "duplicate parameter name: {name}");
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.index.insert(name.to_string(), self.values.len() - 1);
        PIdx(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: PIdx) -> &str {
        &self.names[idx.0]
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn lookup(&self, name: &str) -> Option<PIdx> {
        self.index.get(name).copied().map(PIdx)
    }

    pub fn value(&self, idx: PIdx) -> &Arr {
        &self.values[idx.0]
    }

    pub fn arc(&self, idx: PIdx) -> Arc<Arr> {
        Arc::clone(&self.values[idx.0])
    }

    /// Mutable access for the optimizer; clones only if a tape still holds
    /// the value (never the case between batches).
    pub fn value_mut(&mut self, idx: PIdx) -> &mut Arr {
        Arc::make_mut(&mut self.values[idx.0])
    }

    pub fn set(&mut self, idx: PIdx, value: Arr) {
        assert_eq!(self.values[idx.0].shape(), value.shape(), "set: shape mismatch for {}", self.names[idx.0]);
        self.values[idx.0] = Arc::new(value);
    }

    /// Bind every parameter onto a tape (cheap: Arc clones only).
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self.values.iter().map(|v| tape.shared(Arc::clone(v))).collect();
        Binding { vars }
    }

    /// Byte-exact snapshot of a subset of parameters, keyed by name.
    pub fn snapshot(&self, filter: impl Fn(&str) -> bool) -> HashMap<String, Arr> {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| filter(n))
            .map(|(n, v)| (n.clone(), (**v).clone()))
            .collect()
    }
}

/// Per-tape parameter bindings, index-aligned with the store.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    #[inline]
    pub fn var(&self, idx: PIdx) -> Var {
        self.vars[idx.0]
    }

    /// Extract per-parameter gradients after a backward pass.
    pub fn grads(&self, grads: &mut Grads) -> Vec<Option<Arr>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

/// Accumulate `src` gradients into `acc` (index-aligned), in order.
pub fn accumulate_grads(acc: &mut Vec<Option<Arr>>, src: Vec<Option<Arr>>) {
    if acc.is_empty() {
        *acc = src;
        return;
    }
    assert_eq!(acc.len(), src.len());
    for (a, s) in acc.iter_mut().zip(src) {
        match (a.as_mut(), s) {
            (Some(a), Some(s)) => *a += &s,
            (None, Some(s)) => *a = Some(s),
            _ => {}
        }
    }
}

/// Scale all gradients by `k` (for batch averaging).
pub fn scale_grads(grads: &mut [Option<Arr>], k: f32) {
    for g in grads.iter_mut().flatten() {
        g.mapv_inplace(|v| v * k);
    }
}

/// Initializers. All draw from the supplied rng in call order, so a model's
/// parameters depend only on its init stream.
pub struct Init;

impl Init {
    pub fn normal(rng: &mut impl rand::Rng, shape: &[usize], std: f32) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng::normal(rng) * std).collect();
        Arr::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// He-style init for conv kernels `[Cout, Cin, k, k]`.
    pub fn conv(rng: &mut impl rand::Rng, shape: &[usize]) -> Arr {
        let fan_in: usize = shape[1..].iter().product();
        Self::normal(rng, shape, (2.0 / fan_in as f32).sqrt())
    }

    /// Fan-in scaled init for linear weights `[In, Out]`.
    pub fn linear(rng: &mut impl rand::Rng, shape: &[usize]) -> Arr {
        Self::normal(rng, shape, (1.0 / shape[0] as f32).sqrt())
    }

    pub fn zeros(shape: &[usize]) -> Arr {
        Arr::zeros(IxDyn(shape))
    }

    pub fn ones(shape: &[usize]) -> Arr {
        Arr::ones(IxDyn(shape))
    }
}

//! Layer structs: thin wrappers that own parameter indices and know how to
//! run themselves on a tape.

use super::{Binding, Init, PIdx, ParamStore};
use crate::tensor::{Tape, Var};

/// Dense layer `[S, In] -> [S, Out]`.
pub struct Linear {
    pub w: PIdx,
    pub b: Option<PIdx>,
}

impl Linear {
    pub fn build(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        let w = store.register(&format!("{name}.w"), Init::linear(rng, &[din, dout]));
        let b = bias.then(|| store.register(&format!("{name}.b"), Init::zeros(&[dout])));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Var) -> Var {
        let y = tape.matmul(x, bound.var(self.w));
        match self.b {
            Some(b) => tape.add_row_bias(y, bound.var(b)),
            None => y,
        }
    }
}

/// Square-kernel conv layer on `[C, H, W]`.
pub struct Conv {
    pub w: PIdx,
    pub b: PIdx,
    pub pad: usize,
    pub stride: usize,
}

impl Conv {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        pad: usize,
        stride: usize,
    ) -> Self {
        let w = store.register(&format!("{name}.w"), Init::conv(rng, &[cout, cin, k, k]));
        let b = store.register(&format!("{name}.b"), Init::zeros(&[cout]));
        Conv { w, b, pad, stride }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Var) -> Var {
        let y = tape.conv2d(x, bound.var(self.w), self.pad, self.stride);
        tape.add_chan_bias(y, bound.var(self.b))
    }
}

/// GroupNorm with affine parameters.
pub struct GroupNorm {
    pub gamma: PIdx,
    pub beta: PIdx,
    pub groups: usize,
}

impl GroupNorm {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{name}: channels {channels} not divisible into {groups} groups");
        GroupNorm {
            gamma: store.register(&format!("{name}.gamma"), Init::ones(&[channels])),
            beta: store.register(&format!("{name}.beta"), Init::zeros(&[channels])),
            groups,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Var) -> Var {
        tape.group_norm(x, bound.var(self.gamma), bound.var(self.beta), self.groups)
    }
}

/// LayerNorm with affine parameters.
pub struct LayerNorm {
    pub gamma: PIdx,
    pub beta: PIdx,
}

impl LayerNorm {
    pub fn build(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.register(&format!("{name}.gamma"), Init::ones(&[dim])),
            beta: store.register(&format!("{name}.beta"), Init::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Var) -> Var {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta))
    }
}

/// Two-layer SiLU MLP `[S, In] -> [S, Out]`.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn build(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Mlp {
            fc1: Linear::build(store, rng, &format!("{name}.fc1"), din, hidden, true),
            fc2: Linear::build(store, rng, &format!("{name}.fc2"), hidden, dout, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Var) -> Var {
        let h = self.fc1.forward(tape, bound, x);
        let h = tape.silu(h);
        self.fc2.forward(tape, bound, h)
    }
}

//! Attention primitives: the conditioning cross-attention used by the
//! diffusion UNet and the multi-head self-attention used by the point-cloud
//! transformers.

use super::{Binding, Init, Linear, LayerNorm, Mlp, PIdx, ParamStore};
use crate::tensor::{Tape, Var};

/// Scaled dot-product cross-attention.
///
/// `z` is the `[S, Dz]` query sequence, `c` the `[K, Dc]` condition tokens.
/// Computes `softmax(Q K^T / sqrt(d)) V` with `Q = z W_q`, `K = c W_k`,
/// `V = c W_v`, where `d` is the key dimension. Returns `[S, d]`.
pub fn cross_attention(tape: &mut Tape, z: Var, c: Var, w_q: Var, w_k: Var, w_v: Var) -> Var {
    let q = tape.matmul(z, w_q);
    let k = tape.matmul(c, w_k);
    let v = tape.matmul(c, w_v);
    let d = tape.value(k).shape()[1] as f32;
    let scores = tape.matmul_nt(q, k);
    let scores = tape.scale(scores, 1.0 / d.sqrt());
    let attn = tape.softmax_rows(scores);
    tape.matmul(attn, v)
}

/// Cross-attention block with projection weights, used at each UNet level.
/// Only `w_k` / `w_v` are exposed by name for selective training.
pub struct CrossAttention {
    pub w_q: PIdx,
    pub w_k: PIdx,
    pub w_v: PIdx,
    pub w_o: Linear,
}

impl CrossAttention {
    pub fn build(
        store: &mut ParamStore,
        rng: &mut impl rand::Rng,
        name: &str,
        d_query: usize,
        d_cond: usize,
        d_attn: usize,
    ) -> Self {
        CrossAttention {
            w_q: store.register(&format!("{name}.wq"), Init::linear(rng, &[d_query, d_attn])),
            w_k: store.register(&format!("{name}.wk"), Init::linear(rng, &[d_cond, d_attn])),
            w_v: store.register(&format!("{name}.wv"), Init::linear(rng, &[d_cond, d_attn])),
            w_o: Linear::build(store, rng, &format!("{name}.wo"), d_attn, d_query, true),
        }
    }

    /// `z [S, Dz]`, `cond [K, Dc]` -> `[S, Dz]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Binding, z: Var, cond: Var) -> Var {
        let attended = cross_attention(
            tape,
            z,
            cond,
            bound.var(self.w_q),
            bound.var(self.w_k),
            bound.var(self.w_v),
        );
        self.w_o.forward(tape, bound, attended)
    }
}

/// Multi-head self-attention over `[S, D]` with a packed qkv projection.
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl SelfAttention {
    pub fn build(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, d_model: usize, heads: usize) -> Self {
        assert!(d_model % heads == 0, "{name}: d_model {d_model} not divisible by {heads} heads");
        SelfAttention {
            qkv: Linear::build(store, rng, &format!("{name}.qkv"), d_model, 3 * d_model, true),
            out: Linear::build(store, rng, &format!("{name}.out"), d_model, d_model, true),
            heads,
            d_model,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Var) -> Var {
        let d = self.d_model;
        let dh = d / self.heads;
        let qkv = self.qkv.forward(tape, bound, x);
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = tape.slice_cols(qkv, h * dh, (h + 1) * dh);
            let k = tape.slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
            let v = tape.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
            let scores = tape.matmul_nt(q, k);
            let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt());
            let attn = tape.softmax_rows(scores);
            head_outs.push(tape.matmul(attn, v));
        }
        let merged = tape.concat_cols(&head_outs);
        self.out.forward(tape, bound, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn build(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, d_model: usize, heads: usize) -> Self {
        TransformerBlock {
            ln1: LayerNorm::build(store, &format!("{name}.ln1"), d_model),
            attn: SelfAttention::build(store, rng, &format!("{name}.attn"), d_model, heads),
            ln2: LayerNorm::build(store, &format!("{name}.ln2"), d_model),
            mlp: Mlp::build(store, rng, &format!("{name}.mlp"), d_model, 4 * d_model, d_model),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, x: Var) -> Var {
        let n = self.ln1.forward(tape, bound, x);
        let a = self.attn.forward(tape, bound, n);
        let x = tape.add(x, a);
        let n = self.ln2.forward(tape, bound, x);
        let m = self.mlp.forward(tape, bound, n);
        tape.add(x, m)
    }
}

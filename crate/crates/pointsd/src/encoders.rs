//! Point-cloud networks: patch tokenizer, condition encoder, backbone,
//! projector, and the feature-alignment objective.

use crate::diffusion::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::nn::{Binding, LayerNorm, Linear, Mlp, ParamStore, TransformerBlock};
use crate::tensor::{Arr, Tape, Var};
use ndarray::IxDyn;

/// Shared architecture knobs for the condition encoder and the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSpec {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub tokenizer_hidden: usize,
    pub d_cond: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec { d_model: 96, depth: 4, heads: 4, tokenizer_hidden: 128, d_cond: 64 }
    }
}

/// Projector head that maps backbone tokens into the diffusion feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorSpec {
    pub d_proj: usize,
    pub depth: usize,
    pub heads: usize,
    /// Output dimension; equals the diffusion model's deepest tap width.
    pub d_out: usize,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        ProjectorSpec { d_proj: 192, depth: 3, heads: 4, d_out: 128 }
    }
}

/// Put a patch set onto a tape as `(group points [G*m, 3], centers [G, 3])`.
fn patch_inputs(tape: &mut Tape, ps: &PatchSet) -> (Var, Var, usize, usize) {
    let g = ps.num_groups();
    let m = ps.group_size();
    let mut pts = Vec::with_capacity(g * m * 3);
    for group in &ps.groups {
        for p in group {
            pts.extend_from_slice(p);
        }
    }
    let mut ctr = Vec::with_capacity(g * 3);
    for c in &ps.centers {
        ctr.extend_from_slice(c);
    }
    let points = tape.leaf(Arr::from_shape_vec(IxDyn(&[g * m, 3]), pts).unwrap());
    let centers = tape.leaf(Arr::from_shape_vec(IxDyn(&[g, 3]), ctr).unwrap());
    (points, centers, g, m)
}

/// Mini-pointnet patch embedding: a shared pointwise MLP max-pooled within
/// each group, plus a learned positional term from the group center.
pub struct PatchTokenizer {
    point_mlp: Mlp,
    pos_mlp: Mlp,
}

impl PatchTokenizer {
    pub fn build(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, spec: &EncoderSpec) -> Self {
        PatchTokenizer {
            point_mlp: Mlp::build(store, rng, &format!("{name}.point"), 3, spec.tokenizer_hidden, spec.d_model),
            pos_mlp: Mlp::build(store, rng, &format!("{name}.pos"), 3, spec.tokenizer_hidden, spec.d_model),
        }
    }

    /// One token per patch: `[G, d_model]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Binding, ps: &PatchSet) -> Var {
        let (points, centers, g, m) = patch_inputs(tape, ps);
        let feats = self.point_mlp.forward(tape, bound, points);
        let mut pooled = Vec::with_capacity(g);
        for gi in 0..g {
            let rows = tape.slice_rows(feats, gi * m, (gi + 1) * m);
            pooled.push(tape.max_rows(rows));
        }
        let tokens = tape.stack_rows(&pooled);
        let pos = self.pos_mlp.forward(tape, bound, centers);
        tape.add(tokens, pos)
    }
}

/// Tokenizer plus a stack of transformer blocks; the common trunk of the
/// condition encoder and the backbone.
pub struct PointTransformer {
    pub tokenizer: PatchTokenizer,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
}

impl PointTransformer {
    pub fn build(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, spec: &EncoderSpec) -> Self {
        let tokenizer = PatchTokenizer::build(store, rng, &format!("{name}.tok"), spec);
        let blocks = (0..spec.depth)
            .map(|i| TransformerBlock::build(store, rng, &format!("{name}.blk{i}"), spec.d_model, spec.heads))
            .collect();
        let final_norm = LayerNorm::build(store, &format!("{name}.norm"), spec.d_model);
        PointTransformer { tokenizer, blocks, final_norm }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Binding, ps: &PatchSet) -> Var {
        let mut x = self.tokenizer.forward(tape, bound, ps);
        for b in &self.blocks {
            x = b.forward(tape, bound, x);
        }
        self.final_norm.forward(tape, bound, x)
    }
}

/// Condition encoder: patch tokens projected into the diffusion model's
/// condition space, one condition token per patch.
pub struct ConditionEncoder {
    pub spec: EncoderSpec,
    trunk: PointTransformer,
    proj: Linear,
}

impl ConditionEncoder {
    pub fn build(store: &mut ParamStore, rng: &mut impl rand::Rng, prefix: &str, spec: EncoderSpec) -> Self {
        let trunk = PointTransformer::build(store, rng, prefix, &spec);
        let proj = Linear::build(store, rng, &format!("{prefix}.proj"), spec.d_model, spec.d_cond, true);
        ConditionEncoder { spec, trunk, proj }
    }

    /// `[G, d_cond]` condition tokens.
    pub fn encode(&self, tape: &mut Tape, bound: &Binding, ps: &PatchSet) -> Var {
        let x = self.trunk.forward(tape, bound, ps);
        self.proj.forward(tape, bound, x)
    }

    /// Convenience: run on a fresh tape and return the token values.
    pub fn encode_values(&self, store: &ParamStore, ps: &PatchSet) -> Arr {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let v = self.encode(&mut tape, &bound, ps);
        tape.value(v).clone()
    }
}

/// Backbone representation network.
pub struct Backbone {
    pub spec: EncoderSpec,
    trunk: PointTransformer,
}

impl Backbone {
    pub fn build(store: &mut ParamStore, rng: &mut impl rand::Rng, prefix: &str, spec: EncoderSpec) -> Self {
        Backbone { spec: spec.clone(), trunk: PointTransformer::build(store, rng, prefix, &spec) }
    }

    /// Patch tokens `[G, d_model]` plus the pooled summary
    /// `concat(mean, max)` of size `2 * d_model`.
    pub fn forward(&self, tape: &mut Tape, bound: &Binding, ps: &PatchSet) -> (Var, Var) {
        let tokens = self.trunk.forward(tape, bound, ps);
        let mean = tape.mean_rows(tokens);
        let max = tape.max_rows(tokens);
        let pooled = tape.concat_vec(mean, max);
        (tokens, pooled)
    }

    /// Pooled feature vector on a fresh tape (for probing).
    pub fn pooled_values(&self, store: &ParamStore, ps: &PatchSet) -> Arr {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (_, pooled) = self.forward(&mut tape, &bound, ps);
        tape.value(pooled).clone()
    }
}

/// Projector from backbone tokens into the diffusion feature space.
pub struct Projector {
    pub spec: ProjectorSpec,
    in_proj: Linear,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    out: Linear,
}

impl Projector {
    pub fn build(store: &mut ParamStore, rng: &mut impl rand::Rng, prefix: &str, d_model: usize, spec: ProjectorSpec) -> Self {
        let in_proj = Linear::build(store, rng, &format!("{prefix}.in"), d_model, spec.d_proj, true);
        let blocks = (0..spec.depth)
            .map(|i| TransformerBlock::build(store, rng, &format!("{prefix}.blk{i}"), spec.d_proj, spec.heads))
            .collect();
        let final_norm = LayerNorm::build(store, &format!("{prefix}.norm"), spec.d_proj);
        let out = Linear::build(store, rng, &format!("{prefix}.out"), spec.d_proj, spec.d_out, true);
        Projector { spec, in_proj, blocks, final_norm, out }
    }

    fn trunk(&self, tape: &mut Tape, bound: &Binding, tokens: Var) -> Var {
        let mut x = self.in_proj.forward(tape, bound, tokens);
        for b in &self.blocks {
            x = b.forward(tape, bound, x);
        }
        self.final_norm.forward(tape, bound, x)
    }

    /// Global projection: transformer over tokens, mean-pooled, mapped to
    /// the diffusion channel count. Returns `[d_out]`.
    pub fn forward_pooled(&self, tape: &mut Tape, bound: &Binding, tokens: Var) -> Var {
        let x = self.trunk(tape, bound, tokens);
        let pooled = tape.mean_rows(x);
        let pooled = tape.reshape(pooled, &[1, self.spec.d_proj]);
        let out = self.out.forward(tape, bound, pooled);
        tape.reshape(out, &[self.spec.d_out])
    }

    /// Token-wise projection `[G, d_out]` (only meaningful when the target
    /// tap has exactly `G` positions).
    pub fn forward_tokens(&self, tape: &mut Tape, bound: &Binding, tokens: Var) -> Var {
        let x = self.trunk(tape, bound, tokens);
        self.out.forward(tape, bound, x)
    }
}

/// Squared L2 distance between the projected point feature and the spatially
/// mean-pooled diffusion feature. The target enters as a constant: gradients
/// never flow into the feature map.
pub fn alignment_loss(tape: &mut Tape, projected: Var, target: &FeatureMap) -> Result<Var> {
    let pooled = target.pooled();
    let pshape = tape.value(projected).shape().to_vec();
    if pshape != pooled.shape() {
        return Err(Error::Encoders(format!(
            "alignment_loss: dimension mismatch {:?} vs {:?}",
            pshape,
            pooled.shape()
        )));
    }
    let t = tape.leaf(pooled);
    Ok(tape.sum_sq_diff(projected, t))
}

/// Token-wise variant: `[G, C]` projection against the raw `[S, C]` feature
/// map, requiring `G == S`.
pub fn alignment_loss_tokens(tape: &mut Tape, projected: Var, target: &FeatureMap) -> Result<Var> {
    let pshape = tape.value(projected).shape().to_vec();
    if pshape != target.values.shape() {
        return Err(Error::Encoders(format!(
            "alignment_loss_tokens: shape mismatch {:?} vs {:?} (token-wise alignment needs G == S)",
            pshape,
            target.values.shape()
        )));
    }
    let t = tape.leaf(target.values.clone());
    Ok(tape.sum_sq_diff(projected, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::FeatureTap;
    use crate::nn::Init;
    use crate::geometry::{farthest_point_sample, knn_group, PointCloud};
    use crate::rng;
    use rand::Rng;

    fn spec() -> EncoderSpec {
        EncoderSpec { d_model: 24, depth: 2, heads: 2, tokenizer_hidden: 16, d_cond: 10 }
    }

    fn random_patches(seed: u64, g: usize, m: usize) -> PatchSet {
        let mut r = rng::stream(seed, "enc.cloud", 0);
        let pts: Vec<[f32; 3]> = (0..128)
            .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect();
        let pc = PointCloud::new(pts);
        let centers = farthest_point_sample(&pc, g, 0).unwrap();
        knn_group(&pc, &centers, m).unwrap()
    }

    fn permuted_groups(ps: &PatchSet, rot: usize) -> PatchSet {
        let mut out = ps.clone();
        for group in &mut out.groups {
            let n = group.len().max(1);
            group.rotate_left(rot % n);
        }
        out
    }

    fn permuted_patches(ps: &PatchSet, order: &[usize]) -> PatchSet {
        PatchSet {
            centers: order.iter().map(|&i| ps.centers[i]).collect(),
            groups: order.iter().map(|&i| ps.groups[i].clone()).collect(),
            source_ids: order.iter().map(|&i| ps.source_ids[i]).collect(),
        }
    }

    #[test]
    fn tokenizer_is_exactly_invariant_to_within_group_permutation() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(70, "init.tok", 0);
        let tok = PatchTokenizer::build(&mut store, &mut r, "tok", &spec());
        let ps = random_patches(1, 8, 8);
        let run = |ps: &PatchSet| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let t = tok.forward(&mut tape, &bound, ps);
            tape.value(t).clone()
        };
        let a = run(&ps);
        let b = run(&permuted_groups(&ps, 3));
        assert_eq!(a, b, "max-pool must make group order irrelevant, bit-level");
        assert_eq!(a.shape(), &[8, 24]);
    }

    #[test]
    fn tokens_differ_only_via_positional_term() {
        // two patches with identical relative geometry but different centers
        let mut store = ParamStore::new();
        let mut r = rng::stream(71, "init.tok", 0);
        let tok = PatchTokenizer::build(&mut store, &mut r, "tok", &spec());
        let rel = vec![[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.2, 0.0], [0.0, 0.0, 0.3]];
        let ps = PatchSet {
            centers: vec![[0.0, 0.0, 0.0], [0.5, -0.25, 0.75]],
            groups: vec![rel.clone(), rel],
            source_ids: vec![0, 0],
        };
        let full = {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let t = tok.forward(&mut tape, &bound, &ps);
            tape.value(t).clone()
        };
        assert_ne!(full.index_axis(ndarray::Axis(0), 0), full.index_axis(ndarray::Axis(0), 1));
        // zero the positional mlp: tokens must collapse to equality
        for name in ["tok.pos.fc1.w", "tok.pos.fc1.b", "tok.pos.fc2.w", "tok.pos.fc2.b"] {
            let idx = store.lookup(name).unwrap();
            let zero = Init::zeros(store.value(idx).shape());
            store.set(idx, zero);
        }
        let nopos = {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let t = tok.forward(&mut tape, &bound, &ps);
            tape.value(t).clone()
        };
        assert_eq!(
            nopos.index_axis(ndarray::Axis(0), 0),
            nopos.index_axis(ndarray::Axis(0), 1),
            "without the positional term identical geometry gives identical tokens"
        );
    }

    #[test]
    fn condition_encoder_shape_and_determinism() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(72, "init.g", 0);
        let g = ConditionEncoder::build(&mut store, &mut r, "g", spec());
        let ps = random_patches(2, 16, 8);
        let a = g.encode_values(&store, &ps);
        let b = g.encode_values(&store, &ps);
        assert_eq!(a.shape(), &[16, 10]);
        assert_eq!(a, b);
    }

    #[test]
    fn condition_encoder_is_patch_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(73, "init.g", 0);
        let g = ConditionEncoder::build(&mut store, &mut r, "g", spec());
        let ps = random_patches(3, 8, 8);
        let order: Vec<usize> = vec![5, 2, 7, 0, 3, 6, 1, 4];
        let base = g.encode_values(&store, &ps);
        let perm = g.encode_values(&store, &permuted_patches(&ps, &order));
        for (dst, &src) in order.iter().enumerate() {
            for c in 0..base.shape()[1] {
                let d = (perm[[dst, c]] - base[[src, c]]).abs();
                assert!(d <= 1e-5, "token {dst} channel {c}: delta {d}");
            }
        }
    }

    #[test]
    fn backbone_pooled_shape_and_permutation_invariance() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(74, "init.f", 0);
        let f = Backbone::build(&mut store, &mut r, "f", spec());
        let ps = random_patches(4, 8, 8);
        let a = f.pooled_values(&store, &ps);
        assert_eq!(a.shape(), &[48]); // 2 * d_model
        let order: Vec<usize> = vec![7, 6, 5, 4, 3, 2, 1, 0];
        let b = f.pooled_values(&store, &permuted_patches(&ps, &order));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-5, "{x} vs {y}");
        }
    }

    #[test]
    fn projector_output_dims() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(75, "init.s", 0);
        let f = Backbone::build(&mut store, &mut r, "f", spec());
        let s = Projector::build(&mut store, &mut r, "s", 24, ProjectorSpec { d_proj: 16, depth: 2, heads: 2, d_out: 12 });
        let ps = random_patches(5, 8, 8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let (tokens, _) = f.forward(&mut tape, &bound, &ps);
        let pooled = s.forward_pooled(&mut tape, &bound, tokens);
        assert_eq!(tape.value(pooled).shape(), &[12]);
        let tw = s.forward_tokens(&mut tape, &bound, tokens);
        assert_eq!(tape.value(tw).shape(), &[8, 12]);
    }

    #[test]
    fn alignment_loss_basics_and_loop_oracle() {
        let mut tape = Tape::new();
        let a = Init::normal(&mut rng::stream(76, "a", 0), &[128], 1.0);
        let fm = |values: Arr| FeatureMap { values, tap: FeatureTap::DownLast, height: 1, width: 1 };
        // identical vectors -> 0
        let va = tape.leaf(a.clone());
        let t = fm(a.clone().into_shape_with_order(IxDyn(&[1, 128])).unwrap());
        let l = alignment_loss(&mut tape, va, &t).unwrap();
        assert_eq!(tape.value(l)[[0]], 0.0);
        // unit-vector difference -> 1
        let mut b = a.clone();
        b[[0]] += 1.0;
        let vb = tape.leaf(b);
        let l = alignment_loss(&mut tape, vb, &t).unwrap();
        assert!((tape.value(l)[[0]] - 1.0).abs() < 1e-5);
        // random pair matches a scalar loop
        let x = Init::normal(&mut rng::stream(77, "x", 0), &[128], 1.0);
        let y = Init::normal(&mut rng::stream(77, "y", 0), &[128], 1.0);
        let vx = tape.leaf(x.clone());
        let t = fm(y.clone().into_shape_with_order(IxDyn(&[1, 128])).unwrap());
        let l = alignment_loss(&mut tape, vx, &t).unwrap();
        let mut want = 0.0f64;
        for (xa, ya) in x.iter().zip(y.iter()) {
            want += ((xa - ya) as f64).powi(2);
        }
        let got = tape.value(l)[[0]];
        assert!((got - want as f32).abs() / (want as f32) < 1e-5, "{got} vs {want}");
        // symmetry
        let vy = tape.leaf(y);
        let t2 = fm(x.into_shape_with_order(IxDyn(&[1, 128])).unwrap());
        let l2 = alignment_loss(&mut tape, vy, &t2).unwrap();
        assert_eq!(tape.value(l)[[0]], tape.value(l2)[[0]]);
    }

    #[test]
    fn alignment_loss_rejects_dim_mismatch() {
        let mut tape = Tape::new();
        let v = tape.leaf(Init::zeros(&[64]));
        let t = FeatureMap {
            values: Init::zeros(&[4, 128]),
            tap: FeatureTap::DownLast,
            height: 2,
            width: 2,
        };
        assert!(alignment_loss(&mut tape, v, &t).is_err());
    }

    #[test]
    fn alignment_target_receives_no_gradient() {
        // the target is a leaf created from evaluated values: backward must
        // terminate there and assign it no upstream dependence
        let mut store = ParamStore::new();
        let mut r = rng::stream(78, "init", 0);
        let lin = Linear::build(&mut store, &mut r, "lin", 8, 8, true);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(Init::normal(&mut r, &[1, 8], 1.0));
        let y = lin.forward(&mut tape, &bound, x);
        let y = tape.reshape(y, &[8]);
        let target = FeatureMap {
            values: Init::normal(&mut r, &[2, 8], 1.0),
            tap: FeatureTap::DownLast,
            height: 1,
            width: 2,
        };
        let loss = alignment_loss(&mut tape, y, &target).unwrap();
        let mut grads = tape.backward(loss);
        let pg = bound.grads(&mut grads);
        assert!(pg.iter().all(|g| g.is_some()));
    }
}

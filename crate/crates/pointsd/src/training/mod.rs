//! Training orchestration: freeze plans, the augmentation gate, the shared
//! deterministic batch loop, and the three pipeline stages.

pub mod checkpoint;
mod optim;
mod stages;

pub use checkpoint::{load_checkpoint, load_into, read_meta, save_checkpoint, CheckpointMeta};
pub use optim::{lr_at, AdamW};
pub use stages::{stage0_pretrain, stage1_train, stage2_train, StageOutput};

use crate::config::{Augment, OptimCfg};
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_group, sample_mix_mask, MixMask, PatchSet};
use crate::nn::{accumulate_grads, scale_grads, ParamStore};
use crate::rng;
use crate::synthdata::SampleRecord;
use crate::tensor::Arr;
use rand::Rng;
use rayon::prelude::*;
use std::collections::BTreeSet;
use std::time::Instant;

/// Per-parameter trainable/frozen assignment.
#[derive(Clone, Debug)]
pub struct FreezePlan {
    trainable: BTreeSet<String>,
}

impl FreezePlan {
    pub fn all(store: &ParamStore) -> Self {
        FreezePlan { trainable: store.names().map(str::to_string).collect() }
    }

    pub fn from_names(names: impl IntoIterator<Item = String>) -> Self {
        FreezePlan { trainable: names.into_iter().collect() }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.len()
    }

    /// Byte-exact copies of every frozen parameter.
    pub fn frozen_snapshot(&self, store: &ParamStore) -> Vec<(String, Arr)> {
        store
            .names()
            .filter(|n| !self.is_trainable(n))
            .map(|n| (n.to_string(), store.value(store.lookup(n).unwrap()).clone()))
            .collect()
    }

    /// Hard failure when any frozen parameter moved by even one bit.
    pub fn verify_frozen(&self, store: &ParamStore, snapshot: &[(String, Arr)]) -> Result<()> {
        for (name, before) in snapshot {
            let now = store.value(store.lookup(name).ok_or_else(|| {
                Error::Training(format!("freeze check: parameter '{name}' vanished"))
            })?);
            let identical = now.len() == before.len()
                && now.iter().zip(before.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !identical {
                return Err(Error::Training(format!("freeze violation: frozen parameter '{name}' changed")));
            }
        }
        Ok(())
    }
}

/// Uniform(0,1) gate: the augmented branch is taken iff `alpha > 0.5`.
pub struct AugmentationGate;

impl AugmentationGate {
    pub const THRESHOLD: f64 = 0.5;

    pub fn draw(rng: &mut impl Rng) -> (f64, bool) {
        let alpha: f64 = rng.gen();
        (alpha, alpha > Self::THRESHOLD)
    }
}

/// FPS + KNN decomposition for every record of a split, provenance-tagged by
/// position. The FPS start is index 0 unless `random_start`.
pub fn patchify_split(
    records: &[SampleRecord],
    groups: usize,
    group_size: usize,
    random_start: bool,
    seed: u64,
) -> Result<Vec<PatchSet>> {
    records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let start = if random_start {
                rng::stream(seed, "fps.start", i as u64).gen_range(0..rec.cloud.len())
            } else {
                0
            };
            let centers = farthest_point_sample(&rec.cloud, groups, start)?;
            Ok(knn_group(&rec.cloud, &centers, group_size)?.with_source(i as u64))
        })
        .collect()
}

/// Everything one batch slot needs, fully determined before any parallel work.
pub struct PlanItem {
    /// Index into the training split.
    pub idx: usize,
    pub view: usize,
    pub alpha: f64,
    /// Set when the augmented branch is active: partner slot in this batch.
    pub partner_slot: Option<usize>,
    pub mask: Option<MixMask>,
    pub t: usize,
    /// Stream seed for per-sample draws made inside the parallel region.
    pub item_seed: u64,
}

pub struct LoopSpec<'a> {
    /// Rng-stream label, e.g. "stage1".
    pub label: &'a str,
    pub seed: u64,
    pub opt: &'a OptimCfg,
    pub train_len: usize,
    pub views: usize,
    /// Inclusive time-step draw range (ignored by consumers that fix t).
    pub t_range: (usize, usize),
    pub augment: Augment,
    pub mix_ratio: f64,
    pub groups: usize,
    pub quiet: bool,
}

fn draw_index(epoch: usize, step: usize, slot: usize) -> u64 {
    ((epoch as u64) << 42) ^ ((step as u64) << 21) ^ slot as u64
}

/// Sattolo cycle: a uniformly random cyclic permutation (a derangement for
/// n >= 2).
fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        p.swap(i, j);
    }
    p
}

/// Build the deterministic plan for one batch.
fn plan_batch(spec: &LoopSpec, epoch: usize, step: usize, batch: &[usize]) -> Vec<PlanItem> {
    let pair = derangement(
        batch.len(),
        &mut rng::stream(spec.seed, &format!("{}.pair", spec.label), draw_index(epoch, step, 0)),
    );
    batch
        .iter()
        .enumerate()
        .map(|(slot, &idx)| {
            let mut r = rng::stream(spec.seed, &format!("{}.draw", spec.label), draw_index(epoch, step, slot));
            let view = r.gen_range(0..spec.views);
            let (alpha, gate) = AugmentationGate::draw(&mut r);
            let t = r.gen_range(spec.t_range.0..=spec.t_range.1);
            let item_seed: u64 = r.gen();
            let augmented = gate && spec.augment != Augment::None && batch.len() > 1;
            let mask = augmented.then(|| sample_mix_mask(spec.groups, spec.mix_ratio as f32, &mut r));
            PlanItem {
                idx,
                view,
                alpha,
                partner_slot: augmented.then(|| pair[slot]),
                mask,
                t,
                item_seed,
            }
        })
        .collect()
}

/// Deterministic epoch/batch driver shared by all stages.
///
/// `per_item` runs on worker threads over immutable state and returns
/// `(loss, per-parameter gradients)`; reduction happens in slot order, so
/// results do not depend on the thread count.
pub fn run_training_loop<F>(
    spec: &LoopSpec,
    store: &mut ParamStore,
    plan: &FreezePlan,
    per_item: F,
) -> Result<Vec<f64>>
where
    F: Fn(&ParamStore, &[PlanItem], usize) -> Result<(f64, Vec<Option<Arr>>)> + Sync,
{
    let frozen = plan.frozen_snapshot(store);
    let mut optimizer = AdamW::new(store, plan, spec.opt.weight_decay as f32);
    let steps_per_epoch = spec.train_len.div_ceil(spec.opt.batch_size);
    let total_steps = steps_per_epoch * spec.opt.epochs;
    let warmup_steps = steps_per_epoch * spec.opt.warmup_epochs;
    let mut history = Vec::with_capacity(spec.opt.epochs);
    for epoch in 0..spec.opt.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..spec.train_len).collect();
        let mut shuffle_rng = rng::stream(spec.seed, &format!("{}.shuffle", spec.label), epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0f64;
        let mut seen = 0usize;
        for (step, batch) in order.chunks(spec.opt.batch_size).enumerate() {
            let items = plan_batch(spec, epoch, step, batch);
            let results: Vec<Result<(f64, Vec<Option<Arr>>)>> = (0..items.len())
                .into_par_iter()
                .map(|slot| per_item(store, &items, slot))
                .collect();
            let mut grads: Vec<Option<Arr>> = Vec::new();
            for res in results {
                let (loss, g) = res?;
                epoch_loss += loss;
                seen += 1;
                accumulate_grads(&mut grads, g);
            }
            scale_grads(&mut grads, 1.0 / items.len() as f32);
            let lr = lr_at(epoch * steps_per_epoch + step, total_steps, warmup_steps, spec.opt.lr as f32);
            optimizer.step(store, &grads, lr);
        }
        let mean = epoch_loss / seen as f64;
        history.push(mean);
        plan.verify_frozen(store, &frozen)?;
        if !spec.quiet {
            eprintln!(
                "[{}] epoch {}/{} loss {:.5} ({:.1}s)",
                spec.label,
                epoch + 1,
                spec.opt.epochs,
                mean,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    Ok(history)
}

/// Gaussian noise tensor for one item, drawn from its private stream.
pub fn item_noise(item_seed: u64, shape: &[usize]) -> Arr {
    let mut r = rng::stream(item_seed, "eps", 0);
    Arr::from_shape_fn(ndarray::IxDyn(shape), |_| rng::normal(&mut r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn augmentation_gate_frequency() {
        let mut r = rng::stream(90, "gate", 0);
        let n = 10_000;
        let taken = (0..n).filter(|_| AugmentationGate::draw(&mut r).1).count();
        let frac = taken as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.02, "augmented fraction {frac}");
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut r = rng::stream(91, "derange", 0);
        for n in 2..40 {
            let p = derangement(n, &mut r);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j), "n={n}: {p:?}");
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn freeze_plan_detects_changes() {
        let mut store = ParamStore::new();
        let a = store.register("a", Init::ones(&[2]));
        store.register("b", Init::ones(&[2]));
        let plan = FreezePlan::from_names(["b".to_string()]);
        let snap = plan.frozen_snapshot(&store);
        assert_eq!(snap.len(), 1);
        plan.verify_frozen(&store, &snap).unwrap();
        let mut v = store.value(a).clone();
        v[[0]] += 1e-7;
        store.set(a, v);
        assert!(plan.verify_frozen(&store, &snap).is_err());
    }

    #[test]
    fn batch_plan_is_deterministic_and_within_ranges() {
        let opt = OptimCfg { epochs: 1, batch_size: 8, lr: 1e-3, weight_decay: 0.0, warmup_epochs: 0 };
        let spec = LoopSpec {
            label: "t",
            seed: 3,
            opt: &opt,
            train_len: 64,
            views: 4,
            t_range: (500, 1000),
            augment: Augment::MixStitch,
            mix_ratio: 0.5,
            groups: 16,
            quiet: true,
        };
        let batch: Vec<usize> = (0..8).collect();
        let a = plan_batch(&spec, 2, 5, &batch);
        let b = plan_batch(&spec, 2, 5, &batch);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.view, y.view);
            assert_eq!(x.t, y.t);
            assert_eq!(x.alpha, y.alpha);
            assert_eq!(x.partner_slot, y.partner_slot);
            assert!((500..=1000).contains(&x.t));
            assert!(x.view < 4);
            if let Some(p) = x.partner_slot {
                assert_ne!(p, batch.iter().position(|&i| i == x.idx).unwrap());
            }
            if let Some(m) = &x.mask {
                assert_eq!(m.popcount(), 8);
            }
        }
    }
}

//! Decoupled-weight-decay Adam with linear warmup and cosine decay.

use super::FreezePlan;
use crate::nn::ParamStore;
use crate::tensor::Arr;

pub struct AdamW {
    beta1: f32,
    beta2: f32,
    eps: f32,
    weight_decay: f32,
    step_count: u64,
    m: Vec<Option<Arr>>,
    v: Vec<Option<Arr>>,
    trainable: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, plan: &FreezePlan, weight_decay: f32) -> Self {
        let trainable = store.names().map(|n| plan.is_trainable(n)).collect::<Vec<_>>();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: (0..store.len()).map(|_| None).collect(),
            v: (0..store.len()).map(|_| None).collect(),
            trainable,
        }
    }

    /// One update over the trainable subset. Gradients for frozen parameters
    /// are ignored; decay only touches matrices (ndim >= 2).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Arr>], lr: f32) {
        assert_eq!(grads.len(), store.len());
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for i in 0..grads.len() {
            if !self.trainable[i] {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            let idx = crate::nn::PIdx(i);
            if self.m[i].is_none() {
                self.m[i] = Some(Arr::zeros(g.raw_dim()));
                self.v[i] = Some(Arr::zeros(g.raw_dim()));
            }
            let m = self.m[i].as_mut().unwrap();
            let v = self.v[i].as_mut().unwrap();
            let decay = if g.ndim() >= 2 { self.weight_decay } else { 0.0 };
            let p = store.value_mut(idx);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * (mh / (vh.sqrt() + eps) + decay * *p);
                });
        }
    }
}

/// Learning rate at `step`: linear warmup to `base`, then cosine decay to 0.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base: f32) -> f32 {
    if total_steps == 0 {
        return 0.0;
    }
    if step < warmup_steps {
        return base * (step + 1) as f32 / warmup_steps as f32;
    }
    if warmup_steps >= total_steps {
        return base;
    }
    let progress = (step - warmup_steps) as f32 / (total_steps - warmup_steps) as f32;
    base * 0.5 * (1.0 + (std::f32::consts::PI * progress.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use ndarray::IxDyn;

    #[test]
    fn warmup_then_cosine() {
        let base = 1.0;
        assert!((lr_at(0, 100, 10, base) - 0.1).abs() < 1e-6);
        assert!((lr_at(9, 100, 10, base) - 1.0).abs() < 1e-6);
        assert!(lr_at(50, 100, 10, base) < 1.0);
        assert!(lr_at(99, 100, 10, base) < 0.01);
        // monotone decay after warmup
        let mut prev = lr_at(10, 100, 10, base);
        for s in 11..100 {
            let cur = lr_at(s, 100, 10, base);
            assert!(cur <= prev);
            prev = cur;
        }
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.register("w", Init::ones(&[4, 4]));
        let plan = FreezePlan::all(&store);
        let mut opt = AdamW::new(&store, &plan, 0.0);
        for _ in 0..200 {
            // d/dw of 0.5 * ||w||^2 is w
            let g = store.value(w).clone();
            let grads = vec![Some(g)];
            opt.step(&mut store, &grads, 0.05);
        }
        let norm: f32 = store.value(w).iter().map(|v| v * v).sum();
        assert!(norm < 1e-3, "norm {norm}");
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut store = ParamStore::new();
        store.register("a.w", Init::ones(&[2, 2]));
        store.register("b.w", Init::ones(&[2, 2]));
        let plan = FreezePlan::from_names(["a.w".to_string()]);
        let mut opt = AdamW::new(&store, &plan, 0.1);
        let grads = vec![
            Some(Arr::from_elem(IxDyn(&[2, 2]), 1.0)),
            Some(Arr::from_elem(IxDyn(&[2, 2]), 1.0)),
        ];
        opt.step(&mut store, &grads, 0.1);
        let a = store.value(store.lookup("a.w").unwrap());
        let b = store.value(store.lookup("b.w").unwrap());
        assert!(a.iter().all(|&v| v != 1.0), "trainable moved");
        assert!(b.iter().all(|&v| v == 1.0), "frozen stayed put");
    }
}

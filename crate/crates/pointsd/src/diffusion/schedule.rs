//! Variance schedule for the forward corruption process.

use crate::error::{Error, Result};
use crate::tensor::Arr;

/// Linear beta schedule with derived alpha and alpha-bar tables.
///
/// Tables are kept in f64; time step `t` is 1-based with `alpha_bar(0) = 1`
/// so `t = 0` means "no corruption".
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Build a linear schedule of `t_max` steps between the given bounds.
pub fn build_noise_schedule(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_max == 0 {
        return Err(Error::Diffusion("schedule: T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Diffusion(format!(
            "schedule: need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = if t_max == 1 {
        vec![beta_start]
    } else {
        (0..t_max)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_max - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_max);
    let mut prod = 1.0;
    for a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    debug_assert!(beta.windows(2).all(|w| w[0] < w[1]) || t_max == 1);
    debug_assert!(alpha_bar.windows(2).all(|w| w[0] > w[1]) || t_max == 1);
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.beta.len()
    }

    /// `beta_t` for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}

/// Closed-form forward corruption `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
/// `t = 0` is the identity.
pub fn forward_noise(x0: &Arr, t: usize, eps: &Arr, sched: &NoiseSchedule) -> Result<Arr> {
    if x0.shape() != eps.shape() {
        return Err(Error::Diffusion(format!(
            "forward_noise: shape mismatch {:?} vs {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    if t > sched.t_max() {
        return Err(Error::Diffusion(format!("forward_noise: t={t} exceeds T={}", sched.t_max())));
    }
    if t == 0 {
        return Ok(x0.clone());
    }
    let ab = sched.alpha_bar(t);
    let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(x0.mapv(|v| v * sa) + &eps.mapv(|v| v * sb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::IxDyn;
    use proptest::prelude::*;

    #[test]
    fn first_step_alpha_bar() {
        let s = build_noise_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
    }

    #[test]
    fn final_alpha_bar_matches_independent_product() {
        let s = build_noise_schedule(1000, 1e-4, 0.02).unwrap();
        // independent cumulative product, recomputed from the published formula
        let mut prod = 1.0f64;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            prod *= 1.0 - beta;
        }
        let rel = (s.alpha_bar(1000) - prod).abs() / prod;
        assert!(rel < 1e-10, "relative error {rel}");
        assert!(s.alpha_bar(1000) < 1e-4 && s.alpha_bar(1000) > 1e-5, "abar_T = {}", s.alpha_bar(1000));
    }

    #[test]
    fn single_step_schedule() {
        let s = build_noise_schedule(1, 0.01, 0.02).unwrap();
        assert_eq!(s.alpha_bar(1), 0.99);
        assert_eq!(s.beta(1), 0.01);
    }

    #[test]
    fn invalid_bounds_are_rejected() {
        assert!(build_noise_schedule(10, 0.0, 0.5).is_err());
        assert!(build_noise_schedule(10, 0.5, 0.2).is_err());
        assert!(build_noise_schedule(10, 0.5, 1.0).is_err());
        assert!(build_noise_schedule(0, 1e-4, 0.02).is_err());
    }

    #[test]
    fn forward_noise_identity_and_scaling() {
        let s = build_noise_schedule(100, 1e-4, 0.02).unwrap();
        let x0 = Arr::from_shape_fn(IxDyn(&[4, 4]), |i| (i[0] * 4 + i[1]) as f32 / 7.0 - 1.0);
        let zero = Arr::zeros(IxDyn(&[4, 4]));
        assert_eq!(forward_noise(&x0, 0, &zero, &s).unwrap(), x0);
        let xt = forward_noise(&x0, 50, &zero, &s).unwrap();
        let want = x0.mapv(|v| v * (s.alpha_bar(50).sqrt() as f32));
        assert_eq!(xt, want);
    }

    #[test]
    fn forward_noise_rejects_shape_mismatch() {
        let s = build_noise_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = Arr::zeros(IxDyn(&[2, 2]));
        let eps = Arr::zeros(IxDyn(&[2, 3]));
        assert!(forward_noise(&x0, 1, &eps, &s).is_err());
    }

    #[test]
    fn monte_carlo_moments_match_closed_form() {
        let s = build_noise_schedule(1000, 1e-4, 0.02).unwrap();
        let t = 600;
        let x0 = Arr::from_elem(IxDyn(&[2, 2]), 0.6);
        let mut r = rng::stream(40, "schedule.mc", 0);
        let n = 10_000;
        let mut sum = Arr::zeros(IxDyn(&[2, 2]));
        let mut sumsq = Arr::zeros(IxDyn(&[2, 2]));
        for _ in 0..n {
            let eps = Arr::from_shape_fn(IxDyn(&[2, 2]), |_| rng::normal(&mut r));
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            sum += &xt;
            sumsq += &xt.mapv(|v| v * v);
        }
        // every pixel shares the same closed-form moments, so pool over the
        // 4 pixels x 10k draws for a stable estimate
        let cells = sum.len() as f32;
        let mean = sum.sum() / (n as f32 * cells);
        let var = sumsq.sum() / (n as f32 * cells) - mean * mean;
        let want_mean = (s.alpha_bar(t).sqrt() as f32) * 0.6;
        let want_std = (1.0 - s.alpha_bar(t)).sqrt() as f32;
        assert!((mean - want_mean).abs() / want_std.max(want_mean.abs()) < 0.02, "mean {mean} vs {want_mean}");
        assert!((var.sqrt() - want_std).abs() / want_std < 0.02, "std {} vs {want_std}", var.sqrt());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn schedule_invariants_hold(
            t_max in 1usize..300,
            start_exp in -5.0f64..-2.0,
            spread in 1.5f64..50.0,
        ) {
            let beta_start = 10f64.powf(start_exp);
            let beta_end = (beta_start * spread).min(0.999);
            prop_assume!(beta_end > beta_start && beta_end < 1.0);
            let s = build_noise_schedule(t_max, beta_start, beta_end).unwrap();
            // strictly increasing beta, strictly decreasing alpha_bar
            for t in 1..t_max {
                prop_assert!(s.beta(t + 1) > s.beta(t));
                prop_assert!(s.alpha_bar(t + 1) < s.alpha_bar(t));
            }
            // product identity against an on-the-fly independent accumulation
            let mut prod = 1.0f64;
            for t in 1..=t_max {
                prod *= 1.0 - s.beta(t);
                let rel = (s.alpha_bar(t) - prod).abs() / prod.abs().max(1e-300);
                prop_assert!(rel < 1e-10);
            }
        }
    }
}

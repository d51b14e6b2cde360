//! Ancestral reverse-process sampling, for qualitative inspection of what
//! the conditional model has learned.

use super::schedule::NoiseSchedule;
use super::unet::UNet;
use crate::error::Result;
use crate::nn::ParamStore;
use crate::rng;
use crate::tensor::{Arr, Tape};
use ndarray::IxDyn;
use rand::Rng;

/// Iterate the standard reverse process from pure noise over all `T` steps.
/// Deterministic given the rng state; the result is clamped to [-1, 1].
pub fn ancestral_sample(
    unet: &UNet,
    store: &ParamStore,
    cond: &Arr,
    sched: &NoiseSchedule,
    height: usize,
    width: usize,
    rng: &mut impl Rng,
) -> Result<Arr> {
    let shape = [unet.spec.in_channels, height, width];
    let mut x = Arr::from_shape_fn(IxDyn(&shape), |_| rng::normal(rng));
    for t in (1..=sched.t_max()).rev() {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let cv = tape.leaf(cond.clone());
        let (eps, _) = unet.forward(&mut tape, &bound, xv, t, cv)?;
        let eps = tape.value(eps);

        let beta = sched.beta(t);
        let alpha = sched.alpha(t);
        let ab_t = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t - 1);
        let coef = (beta / (1.0 - ab_t).sqrt()) as f32;
        let inv_sqrt_alpha = (1.0 / alpha.sqrt()) as f32;
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab_t)).sqrt() as f32;

        let mut next = Arr::zeros(IxDyn(&shape));
        for (o, (xi, ei)) in next.iter_mut().zip(x.iter().zip(eps.iter())) {
            let mean = inv_sqrt_alpha * (xi - coef * ei);
            let noise = if t > 1 { sigma * rng::normal(rng) } else { 0.0 };
            *o = mean + noise;
        }
        x = next;
    }
    Ok(x.mapv(|v| v.clamp(-1.0, 1.0)))
}

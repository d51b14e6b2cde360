//! Normalization layers, softmax, and activations.

use super::{as2, Arr, Tape, Var};
use ndarray::{Array1, Array2, ArrayView3, Ix1, Ix3};

const NORM_EPS: f64 = 1e-5;

fn as3(a: &Arr) -> ArrayView3<'_, f32> {
    a.view().into_dimensionality::<Ix3>().expect("expected a [C, H, W] tensor")
}

/// Mean and reciprocal-stddev of a slice, accumulated in f64 for stability.
fn moments(xs: &[f32]) -> (f32, f32) {
    let n = xs.len() as f64;
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, (1.0 / (var + NORM_EPS).sqrt()) as f32)
}

impl Tape {
    /// GroupNorm over `[C, H, W]` with per-channel affine parameters.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let vx = as3(self.value(x));
        let (c, h, w) = vx.dim();
        assert!(c % groups == 0, "group_norm: channels {c} not divisible by {groups}");
        let gsize = c / groups;
        let vg = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let vb = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        assert_eq!(vg.len(), c);
        assert_eq!(vb.len(), c);

        let mut stats = Vec::with_capacity(groups);
        let mut out = vx.to_owned();
        let flat = vx.to_owned().into_shape_with_order((c, h * w)).unwrap();
        for g in 0..groups {
            let block = flat.slice(ndarray::s![g * gsize..(g + 1) * gsize, ..]);
            let (mean, rstd) = moments(block.as_standard_layout().as_slice().unwrap());
            stats.push((mean, rstd));
            for ci in g * gsize..(g + 1) * gsize {
                let (gam, bet) = (vg[ci], vb[ci]);
                out.slice_mut(ndarray::s![ci, .., ..]).mapv_inplace(|v| (v - mean) * rstd * gam + bet);
            }
        }
        self.push(
            out.into_dyn(),
            vec![x, gamma, beta],
            Box::new(move |gout, p, _| {
                let px = as3(p[0]);
                let pg = p[1].view().into_dimensionality::<Ix1>().unwrap();
                let g3 = as3(gout);
                let m = (gsize * h * w) as f32;
                let mut dx = px.to_owned();
                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                for g in 0..groups {
                    let (mean, rstd) = stats[g];
                    // accumulate the two group-level sums for the dx formula
                    let (mut sum_dxhat, mut sum_dxhat_xhat) = (0.0f64, 0.0f64);
                    for ci in g * gsize..(g + 1) * gsize {
                        for y in 0..h {
                            for xx in 0..w {
                                let xhat = (px[[ci, y, xx]] - mean) * rstd;
                                let go = g3[[ci, y, xx]];
                                dgamma[ci] += go * xhat;
                                dbeta[ci] += go;
                                let dxhat = go * pg[ci];
                                sum_dxhat += dxhat as f64;
                                sum_dxhat_xhat += (dxhat * xhat) as f64;
                            }
                        }
                    }
                    let mean_dxhat = (sum_dxhat / m as f64) as f32;
                    let mean_dxhat_xhat = (sum_dxhat_xhat / m as f64) as f32;
                    for ci in g * gsize..(g + 1) * gsize {
                        for y in 0..h {
                            for xx in 0..w {
                                let xhat = (px[[ci, y, xx]] - mean) * rstd;
                                let dxhat = g3[[ci, y, xx]] * pg[ci];
                                dx[[ci, y, xx]] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                            }
                        }
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            }),
        )
    }

    /// Row-wise LayerNorm over `[S, D]` with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = as2(self.value(x));
        let (s, d) = vx.dim();
        let vg = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let vb = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        assert_eq!(vg.len(), d);
        let mut stats = Vec::with_capacity(s);
        let mut out = Array2::<f32>::zeros((s, d));
        for r in 0..s {
            let row = vx.row(r);
            let (mean, rstd) = moments(row.as_slice().unwrap());
            stats.push((mean, rstd));
            for c in 0..d {
                out[[r, c]] = (vx[[r, c]] - mean) * rstd * vg[c] + vb[c];
            }
        }
        self.push(
            out.into_dyn(),
            vec![x, gamma, beta],
            Box::new(move |gout, p, _| {
                let px = as2(p[0]);
                let pg = p[1].view().into_dimensionality::<Ix1>().unwrap();
                let g2 = as2(gout);
                let mut dx = Array2::<f32>::zeros((s, d));
                let mut dgamma = Array1::<f32>::zeros(d);
                let mut dbeta = Array1::<f32>::zeros(d);
                for r in 0..s {
                    let (mean, rstd) = stats[r];
                    let (mut sum_dxhat, mut sum_dxhat_xhat) = (0.0f64, 0.0f64);
                    for c in 0..d {
                        let xhat = (px[[r, c]] - mean) * rstd;
                        let go = g2[[r, c]];
                        dgamma[c] += go * xhat;
                        dbeta[c] += go;
                        let dxhat = go * pg[c];
                        sum_dxhat += dxhat as f64;
                        sum_dxhat_xhat += (dxhat * xhat) as f64;
                    }
                    let mean_dxhat = (sum_dxhat / d as f64) as f32;
                    let mean_dxhat_xhat = (sum_dxhat_xhat / d as f64) as f32;
                    for c in 0..d {
                        let xhat = (px[[r, c]] - mean) * rstd;
                        let dxhat = g2[[r, c]] * pg[c];
                        dx[[r, c]] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            }),
        )
    }

    /// Numerically-stable softmax over the last axis of `[S, K]`.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let vx = as2(self.value(x));
        let mut out = vx.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Box::new(|gout, _, val| {
                let y = as2(val);
                let g2 = as2(gout);
                let mut dx = y.to_owned();
                for r in 0..y.nrows() {
                    let dot: f32 = y.row(r).iter().zip(g2.row(r)).map(|(a, b)| a * b).sum();
                    for c in 0..y.ncols() {
                        dx[[r, c]] = y[[r, c]] * (g2[[r, c]] - dot);
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// SiLU activation `x * sigmoid(x)`, any shape.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(
            out,
            vec![x],
            Box::new(|gout, p, _| {
                let dx = p[0].mapv(|v| {
                    let s = sigmoid(v);
                    s * (1.0 + v * (1.0 - s))
                });
                vec![gout * &dx]
            }),
        )
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_norm_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = randn(&mut rng, &[4, 3, 3]);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let gamma = tape.leaf(Arr::ones(IxDyn(&[4])));
        let beta = tape.leaf(Arr::zeros(IxDyn(&[4])));
        let y = tape.group_norm(v, gamma, beta, 2);
        let vy = tape.value(y);
        // each group of 2 channels should have ~zero mean, unit variance
        let g0: Vec<f32> = vy.slice(ndarray::s![..2, .., ..]).iter().cloned().collect();
        let mean: f32 = g0.iter().sum::<f32>() / g0.len() as f32;
        let var: f32 = g0.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / g0.len() as f32;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn group_norm_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = randn(&mut rng, &[4, 2, 2]);
        let gamma = randn(&mut rng, &[4]);
        let beta = randn(&mut rng, &[4]);
        fd_check(
            |t, v| {
                let y = t.group_norm(v[0], v[1], v[2], 2);
                let s = t.square(y);
                t.mean_all(s)
            },
            &[x, gamma, beta],
            3e-2,
        );
    }

    #[test]
    fn layer_norm_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = randn(&mut rng, &[3, 6]);
        let gamma = randn(&mut rng, &[6]);
        let beta = randn(&mut rng, &[6]);
        fd_check(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2]);
                let s = t.square(y);
                t.mean_all(s)
            },
            &[x, gamma, beta],
            3e-2,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = randn(&mut rng, &[5, 7]);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = tape.softmax_rows(v);
        for row in as2(tape.value(y)).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_and_silu_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = randn(&mut rng, &[3, 4]);
        fd_check(
            |t, v| {
                let y = t.softmax_rows(v[0]);
                let s = t.square(y);
                t.sum_all(s)
            },
            &[x.clone()],
            2e-2,
        );
        fd_check(
            |t, v| {
                let y = t.silu(v[0]);
                let s = t.square(y);
                t.mean_all(s)
            },
            &[x],
            2e-2,
        );
    }
}

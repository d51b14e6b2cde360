//! Convolution and spatial ops on `[C, H, W]` tensors (im2col + sgemm).

use super::{as2, Arr, Tape, Var};
use ndarray::{Array2, Array3, ArrayView3, Axis, Ix1, Ix3};

fn as3(a: &Arr) -> ArrayView3<'_, f32> {
    a.view().into_dimensionality::<Ix3>().expect("expected a [C, H, W] tensor")
}

fn out_dim(size: usize, k: usize, pad: usize, stride: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Lower `[C, H, W]` into the `[C*k*k, OH*OW]` patch matrix.
fn im2col(x: &ArrayView3<f32>, k: usize, pad: usize, stride: usize) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (out_dim(h, k, pad, stride), out_dim(w, k, pad, stride));
    let mut col = Array2::<f32>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut out_row = col.row_mut(row);
                let dst = out_row.as_slice_mut().unwrap();
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = x.slice(ndarray::s![ci, iy as usize, ..]);
                    let src = src_row.as_slice().unwrap();
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[base + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the patch-matrix gradient back to input layout.
fn col2im(dcol: &Array2<f32>, c: usize, h: usize, w: usize, k: usize, pad: usize, stride: usize) -> Array3<f32> {
    let (oh, ow) = (out_dim(h, k, pad, stride), out_dim(w, k, pad, stride));
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = dcol.row(row);
                let src = src_row.as_slice().unwrap();
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst_row = dx.slice_mut(ndarray::s![ci, iy as usize, ..]);
                    let dst = dst_row.as_slice_mut().unwrap();
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    /// 2-D convolution: `x [Cin, H, W]`, `w [Cout, Cin, k, k]` -> `[Cout, OH, OW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize, stride: usize) -> Var {
        let vx = as3(self.value(x));
        let vw = self.value(w);
        let wd = vw.shape();
        assert_eq!(wd.len(), 4, "conv2d: weight must be [Cout, Cin, k, k]");
        let (cout, cin, k) = (wd[0], wd[1], wd[2]);
        assert_eq!(wd[2], wd[3], "conv2d: only square kernels");
        assert_eq!(vx.dim().0, cin, "conv2d: channel mismatch");
        let (c, h, win) = vx.dim();
        let (oh, ow) = (out_dim(h, k, pad, stride), out_dim(win, k, pad, stride));
        let col = im2col(&vx, k, pad, stride);
        let w2 = vw.view().into_shape_with_order((cout, cin * k * k)).unwrap();
        let y = w2.dot(&col);
        let out = y.into_shape_with_order((cout, oh, ow)).unwrap().into_dyn();
        self.push(
            out,
            vec![x, w],
            Box::new(move |g, p, _| {
                let px = as3(p[0]);
                let g2 = g.view().into_shape_with_order((cout, oh * ow)).unwrap();
                let col = im2col(&px, k, pad, stride);
                let dw = g2.dot(&col.t());
                let w2 = p[1].view().into_shape_with_order((cout, cin * k * k)).unwrap();
                let dcol = w2.t().dot(&g2);
                let dx = col2im(&dcol, c, h, win, k, pad, stride);
                vec![dx.into_dyn(), dw.into_shape_with_order((cout, cin, k, k)).unwrap().into_dyn()]
            }),
        )
    }

    /// Per-channel bias add on `[C, H, W]`.
    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = as3(self.value(x));
        let vb = self.value(b).view().into_dimensionality::<Ix1>().expect("bias must be 1-D");
        assert_eq!(vx.dim().0, vb.len(), "add_chan_bias: channel mismatch");
        let mut out = vx.to_owned();
        for (ci, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            plane += vb[ci];
        }
        self.push(
            out.into_dyn(),
            vec![x, b],
            Box::new(|g, _, _| {
                let g3 = as3(g);
                let db: Vec<f32> = g3.axis_iter(Axis(0)).map(|p| p.sum()).collect();
                vec![g.clone(), ndarray::Array1::from_vec(db).into_dyn()]
            }),
        )
    }

    /// Nearest-neighbour 2x upsample of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = as3(self.value(x));
        let (c, h, w) = vx.dim();
        let mut out = Array3::<f32>::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for y in 0..h * 2 {
                for xx in 0..w * 2 {
                    out[[ci, y, xx]] = vx[[ci, y / 2, xx / 2]];
                }
            }
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, _, _| {
                let g3 = as3(g);
                let mut dx = Array3::<f32>::zeros((c, h, w));
                for ci in 0..c {
                    for y in 0..h * 2 {
                        for xx in 0..w * 2 {
                            dx[[ci, y / 2, xx / 2]] += g3[[ci, y, xx]];
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Channel concatenation of two `[C, H, W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let va = as3(self.value(a));
        let vb = as3(self.value(b));
        assert_eq!(va.dim().1, vb.dim().1, "concat_channels: height mismatch");
        assert_eq!(va.dim().2, vb.dim().2, "concat_channels: width mismatch");
        let ca = va.dim().0;
        let out = ndarray::concatenate(Axis(0), &[va.view(), vb.view()]).unwrap();
        self.push(
            out.into_dyn(),
            vec![a, b],
            Box::new(move |g, p, _| {
                let g3 = as3(g);
                let cb = as3(p[1]).dim().0;
                vec![
                    g3.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn(),
                    g3.slice(ndarray::s![ca..ca + cb, .., ..]).to_owned().into_dyn(),
                ]
            }),
        )
    }

    /// `[C, H, W]` -> `[H*W, C]` token matrix (row-major spatial order).
    pub fn spatial_to_tokens(&mut self, x: Var) -> Var {
        let vx = as3(self.value(x));
        let (c, h, w) = vx.dim();
        let flat = vx.into_shape_with_order((c, h * w)).unwrap();
        let out = flat.t().as_standard_layout().into_owned().into_dyn();
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| {
                let g2 = as2(g);
                let dx = g2.t().as_standard_layout().into_owned();
                vec![dx.into_shape_with_order((c, h, w)).unwrap().into_dyn()]
            }),
        )
    }

    /// `[H*W, C]` -> `[C, H, W]`.
    pub fn tokens_to_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let vx = as2(self.value(x));
        assert_eq!(vx.nrows(), h * w, "tokens_to_spatial: token count mismatch");
        let c = vx.ncols();
        let out = vx
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h, w))
            .unwrap()
            .into_dyn();
        self.push(
            out,
            vec![x],
            Box::new(move |g, _, _| {
                let g3 = as3(g);
                let flat = g3.into_shape_with_order((c, h * w)).unwrap();
                vec![flat.t().as_standard_layout().into_owned().into_dyn()]
            }),
        )
    }
}

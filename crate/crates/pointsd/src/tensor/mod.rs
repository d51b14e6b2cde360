//! Minimal reverse-mode autodiff over `ndarray`, tuned for the model sizes
//! in this crate.
//!
//! A [`Tape`] records one computation graph per sample. Ops append nodes in
//! topological order; [`Tape::backward`] walks them in reverse and accumulates
//! gradients. Everything is `f32`, single-threaded, and allocation-order
//! deterministic: the same graph built twice produces bit-identical values
//! and gradients. Parallelism happens *outside* the tape (one tape per
//! sample), with gradient reduction in a fixed order.

mod conv;
mod norm;




use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};
use std::sync::Arc;

/// Dynamic-dimension f32 tensor used throughout the crate.
pub type Arr = ArrayD<f32>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

enum Value {
    Owned(Arr),
    Shared(Arc<Arr>),
}

impl Value {
    #[inline]
    fn view(&self) -> &Arr {
        match self {
            Value::Owned(a) => a,
            Value::Shared(a) => a,
        }
    }
}

/// grad_out, parent values, node value -> gradients for each parent.
type BackFn = Box<dyn Fn(&Arr, &[&Arr], &Arr) -> Vec<Arr>>;

struct Node {
    value: Value,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

/// Records a computation graph for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads(Vec<Option<Arr>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.0[v.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    /// Constant input; gradients are still computed for it (use for
    /// finite-difference probes), it simply has no parents.
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push_node(Value::Owned(value), vec![], None)
    }

    /// Shared read-only input (model parameters). Cloning the `Arc` avoids
    /// copying weights into every per-sample graph.
    pub fn shared(&mut self, value: Arc<Arr>) -> Var {
        self.push_node(Value::Shared(value), vec![], None)
    }

    pub fn value(&self, v: Var) -> &Arr {
        self.nodes[v.0].value.view()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, value: Value, parents: Vec<usize>, back: Option<BackFn>) -> Var {
        // Op implementations index into values and take row slices; keeping
        // every stored tensor in standard layout makes that unconditionally
        // valid (transposed/sliced results are copied once here).
        let value = match value {
            Value::Owned(a) => Value::Owned(canon(a)),
            shared => shared,
        };
        self.nodes.push(Node { value, parents, back });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Arr, parents: Vec<Var>, back: BackFn) -> Var {
        let parents = parents.into_iter().map(|v| v.0).collect();
        self.push_node(Value::Owned(value), parents, Some(back))
    }

    /// Reverse-mode sweep from a scalar root (any single-element tensor).
    pub fn backward(&self, root: Var) -> Grads {
        let rv = self.value(root);
        assert_eq!(rv.len(), 1, "backward root must be a scalar, got shape {:?}", rv.shape());
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(rv.raw_dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(back) = &node.back else {
                continue; // leaf: keep its accumulated gradient
            };
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let pvals: Vec<&Arr> = node.parents.iter().map(|&p| self.nodes[p].value.view()).collect();
            let pgrads = back(&gout, &pvals, node.value.view());
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(pgrads) {
                debug_assert_eq!(
                    g.shape(),
                    self.nodes[p].value.view().shape(),
                    "gradient shape mismatch at node {p}"
                );
                match &mut grads[p] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(canon(g)),
                }
            }
        }
        Grads(grads)
    }

    // ---- elementwise and linear-algebra ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = va + vb;
        self.push(out, vec![a, b], Box::new(|g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = va - vb;
        self.push(out, vec![a, b], Box::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = va * vb;
        self.push(out, vec![a, b], Box::new(|g, p, _| vec![g * p[1], g * p[0]]))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, vec![a], Box::new(|g, p, _| vec![g * &p[0].mapv(|x| 2.0 * x)]))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let out = self.value(a).mapv(|x| x * k);
        self.push(out, vec![a], Box::new(move |g, _, _| vec![g.mapv(|x| x * k)]))
    }

    /// `a @ b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = as2(self.value(a));
        let vb = as2(self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dimension mismatch");
        let out = va.dot(&vb).into_dyn();
        self.push(
            out,
            vec![a, b],
            Box::new(|g, p, _| {
                let g2 = as2(g);
                let pa = as2(p[0]);
                let pb = as2(p[1]);
                vec![g2.dot(&pb.t()).into_dyn(), pa.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// `a @ b.T` for 2-D operands (used for attention scores).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let va = as2(self.value(a));
        let vb = as2(self.value(b));
        assert_eq!(va.ncols(), vb.ncols(), "matmul_nt: inner dimension mismatch");
        let out = va.dot(&vb.t()).into_dyn();
        self.push(
            out,
            vec![a, b],
            Box::new(|g, p, _| {
                let g2 = as2(g);
                let pa = as2(p[0]);
                let pb = as2(p[1]);
                vec![g2.dot(&pb).into_dyn(), g2.t().dot(&pa).into_dyn()]
            }),
        )
    }

    /// Add a `[D]` bias to every row of `[S, D]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let vx = as2(self.value(x));
        let vb = self.value(b).view().into_dimensionality::<Ix1>().expect("bias must be 1-D");
        assert_eq!(vx.ncols(), vb.len(), "add_row_bias: width mismatch");
        let out = (&vx + &vb).into_dyn();
        self.push(
            out,
            vec![x, b],
            Box::new(|g, _, _| {
                let g2 = as2(g);
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            }),
        )
    }

    /// Mean over all elements, producing a `[1]` scalar.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.len() as f32;
        let out = ArrayD::from_elem(IxDyn(&[1]), v.sum() / n);
        self.push(
            out,
            vec![x],
            Box::new(move |g, p, _| {
                let s = g[[0]] / n;
                vec![ArrayD::from_elem(p[0].raw_dim(), s)]
            }),
        )
    }

    /// Sum over all elements, producing a `[1]` scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = ArrayD::from_elem(IxDyn(&[1]), v.sum());
        self.push(
            out,
            vec![x],
            Box::new(|g, p, _| vec![ArrayD::from_elem(p[0].raw_dim(), g[[0]])]),
        )
    }

    /// Column means of `[S, D]` -> `[D]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = as2(self.value(x));
        let s = v.nrows() as f32;
        let out = v.mean_axis(Axis(0)).unwrap().into_dyn();
        self.push(
            out,
            vec![x],
            Box::new(move |g, p, _| {
                let p0 = as2(p[0]);
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ndarray::Array2::<f32>::zeros((p0.nrows(), p0.ncols()));
                for mut row in dx.rows_mut() {
                    row.assign(&g1.mapv(|x| x / s));
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Column-wise max of `[S, D]` -> `[D]`; ties route the gradient to the
    /// lowest row index.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let v = as2(self.value(x));
        assert!(v.nrows() > 0, "max_rows: empty input");
        let mut idx = vec![0usize; v.ncols()];
        let mut out = ndarray::Array1::<f32>::zeros(v.ncols());
        for c in 0..v.ncols() {
            let (mut bi, mut bv) = (0usize, v[[0, c]]);
            for r in 1..v.nrows() {
                if v[[r, c]] > bv {
                    bv = v[[r, c]];
                    bi = r;
                }
            }
            idx[c] = bi;
            out[c] = bv;
        }
        self.push(
            out.into_dyn(),
            vec![x],
            Box::new(move |g, p, _| {
                let p0 = as2(p[0]);
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ndarray::Array2::<f32>::zeros((p0.nrows(), p0.ncols()));
                for (c, &r) in idx.iter().enumerate() {
                    dx[[r, c]] = g1[c];
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Row slice `[S, D] -> [to-from, D]`.
    pub fn slice_rows(&mut self, x: Var, from: usize, to: usize) -> Var {
        let v = as2(self.value(x));
        assert!(from < to && to <= v.nrows(), "slice_rows: bad range");
        let out = v.slice(ndarray::s![from..to, ..]).to_owned().into_dyn();
        self.push(
            out,
            vec![x],
            Box::new(move |g, p, _| {
                let p0 = as2(p[0]);
                let g2 = as2(g);
                let mut dx = ndarray::Array2::<f32>::zeros((p0.nrows(), p0.ncols()));
                dx.slice_mut(ndarray::s![from..to, ..]).assign(&g2);
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Stack 1-D `[D]` vectors into `[N, D]`.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let d = self.value(xs[0]).len();
        let mut out = ndarray::Array2::<f32>::zeros((xs.len(), d));
        for (r, &v) in xs.iter().enumerate() {
            let row = self.value(v).view().into_dimensionality::<Ix1>().expect("stack_rows: 1-D inputs");
            assert_eq!(row.len(), d, "stack_rows: width mismatch");
            out.row_mut(r).assign(&row);
        }
        self.push(
            out.into_dyn(),
            xs.to_vec(),
            Box::new(|g, _, _| {
                let g2 = as2(g);
                (0..g2.nrows()).map(|r| g2.row(r).to_owned().into_dyn()).collect()
            }),
        )
    }

    /// Column slice `[S, D] -> [S, to-from]`.
    pub fn slice_cols(&mut self, x: Var, from: usize, to: usize) -> Var {
        let v = as2(self.value(x));
        assert!(from < to && to <= v.ncols(), "slice_cols: bad range");
        let out = v.slice(ndarray::s![.., from..to]).to_owned().into_dyn();
        self.push(
            out,
            vec![x],
            Box::new(move |g, p, _| {
                let p0 = as2(p[0]);
                let g2 = as2(g);
                let mut dx = ndarray::Array2::<f32>::zeros((p0.nrows(), p0.ncols()));
                dx.slice_mut(ndarray::s![.., from..to]).assign(&g2);
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Concatenate 2-D blocks along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|&v| as2(self.value(v))).collect();
        let rows = views[0].nrows();
        let widths: Vec<usize> = views.iter().map(|v| v.ncols()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(
            out.into_dyn(),
            xs.to_vec(),
            Box::new(move |g, _, _| {
                let g2 = as2(g);
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let part = g2.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        offset += w;
                        debug_assert_eq!(part.nrows(), rows);
                        part.into_dyn()
                    })
                    .collect()
            }),
        )
    }

    /// Concatenate 1-D vectors.
    pub fn concat_vec(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a).view().into_dimensionality::<Ix1>().expect("concat_vec: 1-D");
        let vb = self.value(b).view().into_dimensionality::<Ix1>().expect("concat_vec: 1-D");
        let na = va.len();
        let out = ndarray::concatenate(Axis(0), &[va.view(), vb.view()]).unwrap().into_dyn();
        self.push(
            out,
            vec![a, b],
            Box::new(move |g, p, _| {
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let nb = p[1].len();
                vec![
                    g1.slice(ndarray::s![..na]).to_owned().into_dyn(),
                    g1.slice(ndarray::s![na..na + nb]).to_owned().into_dyn(),
                ]
            }),
        )
    }

    /// Gather rows of a `[N, D]` table; duplicate indices accumulate in backward.
    pub fn select_rows(&mut self, table: Var, indices: Vec<usize>) -> Var {
        let v = as2(self.value(table));
        let mut out = ndarray::Array2::<f32>::zeros((indices.len(), v.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < v.nrows(), "select_rows: index {i} out of range");
            out.row_mut(r).assign(&v.row(i));
        }
        self.push(
            out.into_dyn(),
            vec![table],
            Box::new(move |g, p, _| {
                let p0 = as2(p[0]);
                let g2 = as2(g);
                let mut dt = ndarray::Array2::<f32>::zeros((p0.nrows(), p0.ncols()));
                for (r, &i) in indices.iter().enumerate() {
                    let mut row = dt.row_mut(i);
                    row += &g2.row(r);
                }
                vec![dt.into_dyn()]
            }),
        )
    }

    /// Reshape to a new dimension list with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        let n: usize = shape.iter().product();
        assert_eq!(v.len(), n, "reshape: element count mismatch");
        let out = v.to_owned().into_shape_with_order(IxDyn(shape)).unwrap();
        self.push(
            out,
            vec![x],
            Box::new(|g, p, _| {
                vec![g.to_owned().into_shape_with_order(p[0].raw_dim()).unwrap()]
            }),
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean_all(s)
    }

    /// Squared L2 distance (sum over elements).
    pub fn sum_sq_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.sum_all(s)
    }
}

/// View a dynamic tensor as 2-D.
pub fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f32> {
    a.view().into_dimensionality::<Ix2>().expect("expected a 2-D tensor")
}

/// Copy into standard (row-major contiguous) layout if not already there.
fn canon(a: Arr) -> Arr {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;

    /// Central-difference gradient check for a scalar-valued graph builder.
    /// `build` must construct the same graph for any values of the inputs.
    pub fn fd_check(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: &[Arr], tol: f32) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);

        let eval = |probe: &[Arr]| -> f32 {
            let mut t = Tape::new();
            let vs: Vec<Var> = probe.iter().map(|a| t.leaf(a.clone())).collect();
            let r = build(&mut t, &vs);
            t.value(r)[[0]]
        };

        for (i, input) in inputs.iter().enumerate() {
            let ga = grads.get(vars[i]).expect("missing gradient").clone();
            let gmax = ga.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
            let mut probe: Vec<Arr> = inputs.to_vec();
            for j in 0..input.len() {
                let w = input.as_slice().unwrap()[j];
                let h = 5e-3 * w.abs().max(0.2);
                probe[i].as_slice_mut().unwrap()[j] = w + h;
                let lp = eval(&probe);
                probe[i].as_slice_mut().unwrap()[j] = w - h;
                let lm = eval(&probe);
                probe[i].as_slice_mut().unwrap()[j] = w;
                let fd = (lp - lm) / (2.0 * h);
                let an = ga.as_slice().unwrap()[j];
                // floor the denominator at a fraction of the tensor's largest
                // gradient so f32 cancellation noise on near-zero entries does
                // not dominate the relative error
                let denom = an.abs().max(fd.abs()).max(0.05 * gmax).max(1e-3);
                assert!(
                    (an - fd).abs() / denom <= tol,
                    "input {i} elem {j}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                // Box-Muller
                let u1: f32 = rng.gen_range(1e-7f32..1.0);
                let u2: f32 = rng.gen::<f32>();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
            })
            .collect();
        Arr::from_shape_vec(IxDyn(shape), data).unwrap()
    }
}

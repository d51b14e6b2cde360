//! Procedural shape corpus: eight parametric surface families with uniform
//! area-weighted point sampling, deterministic in the spec's seed.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use std::f32::consts::PI;

/// Fixed category order; a dataset uses a prefix of this list.
pub const CATEGORY_NAMES: [&str; 8] = [
    "sphere", "box", "cylinder", "cone", "torus", "pyramid", "capsule", "prism",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Sphere,
    Box,
    Cylinder,
    Cone,
    Torus,
    Pyramid,
    Capsule,
    Prism,
}

impl Category {
    pub fn from_index(i: usize) -> Option<Category> {
        use Category::*;
        [Sphere, Box, Cylinder, Cone, Torus, Pyramid, Capsule, Prism].get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CATEGORY_NAMES[self.index()]
    }
}

/// Bounds for the free parameters of a [`ShapeSpec`].
pub const SCALE_RANGE: (f32, f32) = (0.4, 1.6);
pub const TILT_RANGE: (f32, f32) = (-0.6, 0.6);
pub const PARAM_RANGE: (f32, f32) = (0.2, 0.8);

/// Description of one shape instance. The same spec always produces the same
/// surface and, via its seed, the same sampled points.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub category: Category,
    /// Per-axis scale (aspect) applied in canonical pose.
    pub scale: [f32; 3],
    /// Azimuth about z, then tilts about x and y (radians).
    pub rotation: [f32; 3],
    /// Family-specific parameter in [`PARAM_RANGE`] (e.g. torus tube ratio).
    pub param: f32,
    pub seed: u64,
}

impl ShapeSpec {
    /// Draw a random spec for `category` within the documented bounds.
    pub fn sample(category: Category, rng: &mut impl Rng, seed: u64) -> ShapeSpec {
        ShapeSpec {
            category,
            scale: [
                rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1),
                rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1),
                rng.gen_range(SCALE_RANGE.0..SCALE_RANGE.1),
            ],
            rotation: [
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(TILT_RANGE.0..TILT_RANGE.1),
                rng.gen_range(TILT_RANGE.0..TILT_RANGE.1),
            ],
            param: rng.gen_range(PARAM_RANGE.0..PARAM_RANGE.1),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        for (i, &s) in self.scale.iter().enumerate() {
            if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&s) {
                return Err(Error::SynthData(format!("shape spec: scale[{i}]={s} outside [{}, {}]", SCALE_RANGE.0, SCALE_RANGE.1)));
            }
        }
        if !(0.0..=2.0 * PI).contains(&self.rotation[0]) {
            return Err(Error::SynthData(format!("shape spec: azimuth {} outside [0, 2pi]", self.rotation[0])));
        }
        for &t in &self.rotation[1..] {
            if !(TILT_RANGE.0..=TILT_RANGE.1).contains(&t) {
                return Err(Error::SynthData(format!("shape spec: tilt {t} outside [{}, {}]", TILT_RANGE.0, TILT_RANGE.1)));
            }
        }
        if !(PARAM_RANGE.0..=PARAM_RANGE.1).contains(&self.param) {
            return Err(Error::SynthData(format!("shape spec: param {} outside [{}, {}]", self.param, PARAM_RANGE.0, PARAM_RANGE.1)));
        }
        Ok(())
    }
}

/// A validated sampleable surface.
pub struct Shape {
    spec: ShapeSpec,
}

/// Validate a spec and return the sampleable surface model.
pub fn generate_shape(spec: &ShapeSpec) -> Result<Shape> {
    spec.validate()?;
    Ok(Shape { spec: spec.clone() })
}

impl Shape {
    pub fn category(&self) -> Category {
        self.spec.category
    }

    /// Sample `n` points uniformly by surface area (canonical pose), then
    /// apply aspect scaling and rotation. Deterministic in the spec seed.
    pub fn sample_points(&self, n: usize) -> Vec<[f32; 3]> {
        let mut r = rng::stream(self.spec.seed, "shape.points", 0);
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let p = sample_surface(self.spec.category, self.spec.param, &mut r);
            pts.push(self.transform(p));
        }
        pts
    }

    fn transform(&self, p: [f32; 3]) -> [f32; 3] {
        let s = self.spec.scale;
        let v = [p[0] * s[0], p[1] * s[1], p[2] * s[2]];
        let [az, tx, ty] = self.spec.rotation;
        // Rz(az) then Rx(tx) then Ry(ty)
        let (cz, sz) = (az.cos(), az.sin());
        let v = [cz * v[0] - sz * v[1], sz * v[0] + cz * v[1], v[2]];
        let (cx, sx) = (tx.cos(), tx.sin());
        let v = [v[0], cx * v[1] - sx * v[2], sx * v[1] + cx * v[2]];
        let (cy, sy) = (ty.cos(), ty.sin());
        [cy * v[0] + sy * v[2], v[1], -sy * v[0] + cy * v[2]]
    }
}

fn unit_sphere_point(r: &mut impl Rng) -> [f32; 3] {
    // Marsaglia via normalized gaussians
    loop {
        let v = [rng::normal(r), rng::normal(r), rng::normal(r)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Uniform point in the triangle (a, b, c).
fn triangle_point(a: [f32; 3], b: [f32; 3], c: [f32; 3], r: &mut impl Rng) -> [f32; 3] {
    let (mut u, mut v): (f32, f32) = (r.gen(), r.gen());
    if u + v > 1.0 {
        u = 1.0 - u;
        v = 1.0 - v;
    }
    [
        a[0] + u * (b[0] - a[0]) + v * (c[0] - a[0]),
        a[1] + u * (b[1] - a[1]) + v * (c[1] - a[1]),
        a[2] + u * (b[2] - a[2]) + v * (c[2] - a[2]),
    ]
}

fn pick_weighted(weights: &[f32], r: &mut impl Rng) -> usize {
    let total: f32 = weights.iter().sum();
    let mut x = r.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// One area-uniform surface point of the canonical (unscaled) shape.
fn sample_surface(cat: Category, param: f32, r: &mut impl Rng) -> [f32; 3] {
    match cat {
        Category::Sphere => unit_sphere_point(r),
        Category::Box => {
            // half-extents 1; faces weighted by area (all 4 here since cube)
            let axis = r.gen_range(0..3);
            let side = if r.gen::<bool>() { 1.0 } else { -1.0 };
            let (u, v): (f32, f32) = (r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
            match axis {
                0 => [side, u, v],
                1 => [u, side, v],
                _ => [u, v, side],
            }
        }
        Category::Cylinder => {
            // radius 1, z in [-1, 1]
            let lateral = 2.0 * PI * 2.0;
            let cap = PI;
            match pick_weighted(&[lateral, cap, cap], r) {
                0 => {
                    let th = r.gen_range(0.0..2.0 * PI);
                    [th.cos(), th.sin(), r.gen_range(-1.0..1.0)]
                }
                i => {
                    let rad = r.gen::<f32>().sqrt();
                    let th = r.gen_range(0.0..2.0 * PI);
                    [rad * th.cos(), rad * th.sin(), if i == 1 { 1.0 } else { -1.0 }]
                }
            }
        }
        Category::Cone => {
            // base radius 1 at z=-1, apex at z=+1
            let lateral = PI * (1.0f32 + 4.0).sqrt();
            let base = PI;
            if pick_weighted(&[lateral, base], r) == 0 {
                let s = r.gen::<f32>().sqrt(); // fractional slant distance from apex
                let th = r.gen_range(0.0..2.0 * PI);
                [s * th.cos(), s * th.sin(), 1.0 - 2.0 * s]
            } else {
                let rad = r.gen::<f32>().sqrt();
                let th = r.gen_range(0.0..2.0 * PI);
                [rad * th.cos(), rad * th.sin(), -1.0]
            }
        }
        Category::Torus => {
            // major radius 1, tube radius = param; curvature-corrected rejection
            let tube = param;
            loop {
                let th = r.gen_range(0.0..2.0 * PI);
                let ph = r.gen_range(0.0..2.0 * PI);
                let w = (1.0 + tube * ph.cos()) / (1.0 + tube);
                if r.gen::<f32>() < w {
                    let rad = 1.0 + tube * ph.cos();
                    return [rad * th.cos(), rad * th.sin(), tube * ph.sin()];
                }
            }
        }
        Category::Pyramid => {
            // square base side 2 at z=-1, apex (0,0,1)
            let apex = [0.0, 0.0, 1.0];
            let corners = [[-1.0, -1.0, -1.0f32], [1.0, -1.0, -1.0], [1.0, 1.0, -1.0], [-1.0, 1.0, -1.0]];
            let tri_area = {
                // each lateral face: base 2, apex height sqrt(1 + 4)
                (2.0f32 * (1.0f32 + 4.0).sqrt()) / 2.0
            };
            let base_area = 4.0;
            match pick_weighted(&[base_area, tri_area, tri_area, tri_area, tri_area], r) {
                0 => [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), -1.0],
                f => triangle_point(corners[f - 1], corners[f % 4], apex, r),
            }
        }
        Category::Capsule => {
            // cylinder radius 1 with z in [-h, h], hemispherical ends; h = 2*param
            let h = 2.0 * param;
            let lateral = 2.0 * PI * 2.0 * h;
            let sphere = 4.0 * PI;
            if pick_weighted(&[lateral, sphere], r) == 0 {
                let th = r.gen_range(0.0..2.0 * PI);
                [th.cos(), th.sin(), r.gen_range(-h..h)]
            } else {
                let p = unit_sphere_point(r);
                [p[0], p[1], p[2] + if p[2] >= 0.0 { h } else { -h }]
            }
        }
        Category::Prism => {
            // equilateral triangular cross-section (circumradius 1), z in [-1, 1]
            let verts: Vec<[f32; 3]> = (0..3)
                .map(|i| {
                    let a = 2.0 * PI * i as f32 / 3.0 + PI / 2.0;
                    [a.cos(), a.sin(), 0.0]
                })
                .collect();
            let edge = 3.0f32.sqrt();
            let side_area = edge * 2.0;
            let cap_area = 3.0f32.sqrt() / 4.0 * edge * edge;
            match pick_weighted(&[side_area, side_area, side_area, cap_area, cap_area], r) {
                f @ 0..=2 => {
                    let (a, b) = (verts[f], verts[(f + 1) % 3]);
                    let u: f32 = r.gen();
                    [a[0] + u * (b[0] - a[0]), a[1] + u * (b[1] - a[1]), r.gen_range(-1.0..1.0)]
                }
                f => {
                    let z = if f == 3 { 1.0 } else { -1.0 };
                    let p = triangle_point(verts[0], verts[1], verts[2], r);
                    [p[0], p[1], z]
                }
            }
        }
    }
}

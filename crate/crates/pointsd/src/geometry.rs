//! Point-cloud primitives: normalization, farthest-point sampling, KNN
//! grouping, and patch-level mixing.
//!
//! All operations are pure functions over immutable inputs. Randomized ones
//! take an explicit rng handle; one handle must not be shared across
//! concurrent workers.

use crate::error::{Error, Result};
use rand::Rng;

/// A point cloud in normalized object space, with an optional category label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Self {
        PointCloud { points, label: None }
    }

    pub fn with_label(points: Vec<[f32; 3]>, label: usize) -> Self {
        PointCloud { points, label: Some(label) }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f32; 3] {
        let n = self.points.len() as f64;
        let mut c = [0.0f64; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k] as f64;
            }
        }
        [(c[0] / n) as f32, (c[1] / n) as f32, (c[2] / n) as f32]
    }

    pub fn max_radius(&self) -> f32 {
        self.points
            .iter()
            .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
            .fold(0.0, f32::max)
    }
}

/// Patch decomposition of one (or, after mixing, two) point clouds: `G`
/// centers plus `G x m` neighborhoods in center-relative coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<[f32; 3]>,
    /// `groups[g][i]` is the i-th point of patch `g`, relative to `centers[g]`.
    pub groups: Vec<Vec<[f32; 3]>>,
    /// Provenance tag per patch (which original cloud it came from).
    pub source_ids: Vec<u64>,
}

impl PatchSet {
    pub fn num_groups(&self) -> usize {
        self.centers.len()
    }

    pub fn group_size(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }

    /// Relabel every patch's provenance tag.
    pub fn with_source(mut self, id: u64) -> Self {
        for s in &mut self.source_ids {
            *s = id;
        }
        self
    }
}

/// Binary patch-retention mask for mixing.
#[derive(Clone, Debug, PartialEq)]
pub struct MixMask {
    pub bits: Vec<bool>,
    pub ratio: f32,
}

impl MixMask {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

fn dist2(a: [f32; 3], b: [f32; 3]) -> f32 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Center the cloud on its centroid and scale the farthest point to radius 1.
/// A degenerate cloud (all points coincident) maps to the origin.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::Geometry("normalize_unit_sphere: empty point cloud".into()));
    }
    if pc.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::Geometry("normalize_unit_sphere: non-finite coordinate".into()));
    }
    let c = pc.centroid();
    let mut centered: Vec<[f32; 3]> = pc
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let r = centered
        .iter()
        .map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt())
        .fold(0.0f32, f32::max);
    if r > 0.0 {
        for p in &mut centered {
            for v in p.iter_mut() {
                *v /= r;
            }
        }
    }
    Ok(PointCloud { points: centered, label: pc.label })
}

/// Greedy farthest-point sampling: starting from `start`, each successive
/// index maximizes the minimum distance to the already-chosen set. Ties break
/// toward the lowest index.
pub fn farthest_point_sample(pc: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>> {
    let n = pc.len();
    if k == 0 || k > n {
        return Err(Error::Geometry(format!("farthest_point_sample: k={k} out of range for {n} points")));
    }
    if start >= n {
        return Err(Error::Geometry(format!("farthest_point_sample: start={start} out of range for {n} points")));
    }
    let mut chosen = Vec::with_capacity(k);
    let mut min_d = vec![f32::INFINITY; n];
    let mut current = start;
    chosen.push(current);
    for _ in 1..k {
        let cp = pc.points[current];
        let mut best = (0usize, f32::NEG_INFINITY);
        for (i, &p) in pc.points.iter().enumerate() {
            let d = dist2(p, cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best.1 {
                best = (i, min_d[i]);
            }
        }
        current = best.0;
        chosen.push(current);
    }
    Ok(chosen)
}

/// Group the `m` nearest points (the center itself included) around each
/// chosen center; ties break toward the lowest index. Group coordinates are
/// stored relative to their center.
pub fn knn_group(pc: &PointCloud, centers: &[usize], m: usize) -> Result<PatchSet> {
    let n = pc.len();
    if m == 0 || m > n {
        return Err(Error::Geometry(format!("knn_group: group size m={m} out of range for {n} points")));
    }
    let mut out_centers = Vec::with_capacity(centers.len());
    let mut groups = Vec::with_capacity(centers.len());
    for &ci in centers {
        if ci >= n {
            return Err(Error::Geometry(format!("knn_group: center index {ci} out of range")));
        }
        let c = pc.points[ci];
        // stable selection of the m smallest distances (ties -> lowest index)
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            dist2(pc.points[a], c)
                .partial_cmp(&dist2(pc.points[b], c))
                .unwrap()
                .then(a.cmp(&b))
        });
        let group: Vec<[f32; 3]> = order[..m]
            .iter()
            .map(|&i| {
                let p = pc.points[i];
                [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
            })
            .collect();
        out_centers.push(c);
        groups.push(group);
    }
    let g = out_centers.len();
    Ok(PatchSet { centers: out_centers, groups, source_ids: vec![0; g] })
}

/// Draw a uniformly random retention mask with exactly `round(ratio * g)` ones.
pub fn sample_mix_mask(g: usize, ratio: f32, rng: &mut impl Rng) -> MixMask {
    assert!((0.0..=1.0).contains(&ratio), "mix ratio must lie in [0, 1]");
    let ones = (ratio * g as f32).round() as usize;
    let mut idx: Vec<usize> = (0..g).collect();
    // partial Fisher-Yates: the first `ones` slots become the selected set
    for i in 0..ones.min(g) {
        let j = rng.gen_range(i..g);
        idx.swap(i, j);
    }
    let mut bits = vec![false; g];
    for &i in &idx[..ones] {
        bits[i] = true;
    }
    MixMask { bits, ratio }
}

/// Compose a mixed patch set: patch `i` comes from `a` where the mask is set,
/// from `b` otherwise. Provenance tags follow the patches.
pub fn mix_patchsets(a: &PatchSet, b: &PatchSet, mask: &MixMask) -> Result<PatchSet> {
    let g = a.num_groups();
    if b.num_groups() != g || mask.bits.len() != g {
        return Err(Error::Geometry(format!(
            "mix_patchsets: G mismatch (a={g}, b={}, mask={})",
            b.num_groups(),
            mask.bits.len()
        )));
    }
    if a.group_size() != b.group_size() {
        return Err(Error::Geometry(format!(
            "mix_patchsets: group size mismatch ({} vs {})",
            a.group_size(),
            b.group_size()
        )));
    }
    let mut centers = Vec::with_capacity(g);
    let mut groups = Vec::with_capacity(g);
    let mut source_ids = Vec::with_capacity(g);
    for i in 0..g {
        let src = if mask.bits[i] { a } else { b };
        centers.push(src.centers[i]);
        groups.push(src.groups[i].clone());
        source_ids.push(src.source_ids[i]);
    }
    Ok(PatchSet { centers, groups, source_ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect())
    }

    // -- independent oracles --

    /// FPS re-derived by exhaustive argmax at every step.
    fn fps_oracle(pc: &PointCloud, k: usize, start: usize) -> Vec<usize> {
        let mut chosen = vec![start];
        while chosen.len() < k {
            let mut best_i = usize::MAX;
            let mut best_d = f32::NEG_INFINITY;
            for i in 0..pc.len() {
                let d = chosen
                    .iter()
                    .map(|&c| dist2(pc.points[i], pc.points[c]))
                    .fold(f32::INFINITY, f32::min);
                if d > best_d {
                    best_d = d;
                    best_i = i;
                }
            }
            chosen.push(best_i);
        }
        chosen
    }

    /// m-nearest by full distance matrix.
    fn knn_oracle(pc: &PointCloud, center: usize, m: usize) -> Vec<usize> {
        let c = pc.points[center];
        let mut order: Vec<usize> = (0..pc.len()).collect();
        order.sort_by(|&a, &b| {
            dist2(pc.points[a], c).partial_cmp(&dist2(pc.points[b], c)).unwrap().then(a.cmp(&b))
        });
        order.truncate(m);
        order
    }

    #[test]
    fn normalize_symmetric_pair() {
        let pc = PointCloud::new(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        let out = normalize_unit_sphere(&pc).unwrap();
        assert_eq!(out.points, vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_single_point_maps_to_origin() {
        let pc = PointCloud::new(vec![[5.0, 5.0, 5.0]]);
        let out = normalize_unit_sphere(&pc).unwrap();
        assert_eq!(out.points, vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_random_cloud_statistics() {
        let mut r = rng::stream(11, "geom.norm", 0);
        let pc = random_cloud(&mut r, 256);
        let out = normalize_unit_sphere(&pc).unwrap();
        let c = out.centroid();
        let cn = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        assert!(cn < 1e-6, "centroid norm {cn}");
        let r_max = out.max_radius();
        assert!((r_max - 1.0).abs() < 1e-6, "max radius {r_max}");
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let pc = PointCloud::new(vec![[f32::NAN, 0.0, 0.0]]);
        assert!(normalize_unit_sphere(&pc).is_err());
        let pc = PointCloud::new(vec![[f32::INFINITY, 0.0, 0.0]]);
        assert!(normalize_unit_sphere(&pc).is_err());
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut r = rng::stream(12, "geom.norm2", 0);
        for _ in 0..10 {
            let pc = random_cloud(&mut r, 64);
            let once = normalize_unit_sphere(&pc).unwrap();
            let twice = normalize_unit_sphere(&once).unwrap();
            for (a, b) in once.points.iter().zip(&twice.points) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn fps_line_case() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&pc, 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_exhaustive_when_k_equals_n() {
        let mut r = rng::stream(13, "geom.fps", 0);
        let pc = random_cloud(&mut r, 9);
        for start in [0, 4, 8] {
            let mut got = farthest_point_sample(&pc, 9, start).unwrap();
            got.sort_unstable();
            assert_eq!(got, (0..9).collect::<Vec<_>>());
        }
    }

    #[test]
    fn fps_matches_bruteforce_oracle() {
        let mut r = rng::stream(14, "geom.fps2", 0);
        for case in 0..50 {
            let n = r.gen_range(8..=64);
            let pc = random_cloud(&mut r, n);
            let k = r.gen_range(1..=n.min(12));
            let start = r.gen_range(0..n);
            let got = farthest_point_sample(&pc, k, start).unwrap();
            let want = fps_oracle(&pc, k, start);
            assert_eq!(got, want, "case {case}: n={n} k={k} start={start}");
        }
    }

    #[test]
    fn fps_rejects_bad_arguments() {
        let pc = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(farthest_point_sample(&pc, 3, 0).is_err());
        assert!(farthest_point_sample(&pc, 1, 5).is_err());
        assert!(farthest_point_sample(&pc, 0, 0).is_err());
    }

    #[test]
    fn fps_is_permutation_covariant() {
        // relabeling input points relabels chosen indices consistently
        let mut r = rng::stream(15, "geom.fps3", 0);
        let pc = random_cloud(&mut r, 24);
        let k = 6;
        let base = farthest_point_sample(&pc, k, 3).unwrap();
        // reverse permutation: new[i] = old[n-1-i]
        let n = pc.len();
        let permuted = PointCloud::new((0..n).map(|i| pc.points[n - 1 - i]).collect());
        let got = farthest_point_sample(&permuted, k, n - 1 - 3).unwrap();
        let mapped: Vec<usize> = got.iter().map(|&i| n - 1 - i).collect();
        let base_pts: Vec<_> = base.iter().map(|&i| pc.points[i]).collect();
        let mapped_pts: Vec<_> = mapped.iter().map(|&i| pc.points[i]).collect();
        assert_eq!(base_pts, mapped_pts);
    }

    #[test]
    fn knn_center_alone_when_m_is_one() {
        let pc = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let ps = knn_group(&pc, &[1], 1).unwrap();
        assert_eq!(ps.centers, vec![[1.0, 0.0, 0.0]]);
        assert_eq!(ps.groups[0], vec![[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn knn_matches_distance_matrix_oracle() {
        let mut r = rng::stream(16, "geom.knn", 0);
        let pc = random_cloud(&mut r, 256);
        let centers = farthest_point_sample(&pc, 16, 0).unwrap();
        let ps = knn_group(&pc, &centers, 16).unwrap();
        for (gi, &ci) in centers.iter().enumerate() {
            let want = knn_oracle(&pc, ci, 16);
            let c = pc.points[ci];
            let got: Vec<[f32; 3]> = ps.groups[gi]
                .iter()
                .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
                .collect();
            let want_pts: Vec<[f32; 3]> = want.iter().map(|&i| pc.points[i]).collect();
            assert_eq!(got, want_pts, "group {gi}");
        }
    }

    #[test]
    fn knn_rejects_oversized_groups() {
        let pc = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(knn_group(&pc, &[0], 3).is_err());
    }

    #[test]
    fn patch_shape_contract() {
        let mut r = rng::stream(17, "geom.shape", 0);
        let pc = random_cloud(&mut r, 1024);
        let centers = farthest_point_sample(&pc, 64, 0).unwrap();
        let ps = knn_group(&pc, &centers, 32).unwrap();
        assert_eq!(ps.num_groups(), 64);
        assert!(ps.groups.iter().all(|g| g.len() == 32));
    }

    #[test]
    fn mix_mask_popcount_and_determinism() {
        let mut r = rng::stream(18, "geom.mask", 0);
        let m = sample_mix_mask(16, 0.5, &mut r);
        assert_eq!(m.popcount(), 8);
        let all = sample_mix_mask(16, 1.0, &mut r);
        assert_eq!(all.popcount(), 16);
        let m1 = sample_mix_mask(16, 0.25, &mut rng::stream(99, "mask", 7));
        let m2 = sample_mix_mask(16, 0.25, &mut rng::stream(99, "mask", 7));
        assert_eq!(m1, m2);
    }

    #[test]
    fn mix_all_ones_returns_first_cloud() {
        let mut r = rng::stream(19, "geom.mix", 0);
        let pa = knn_group(&random_cloud(&mut r, 64), &(0..8).collect::<Vec<_>>(), 4).unwrap().with_source(1);
        let pb = knn_group(&random_cloud(&mut r, 64), &(0..8).collect::<Vec<_>>(), 4).unwrap().with_source(2);
        let ones = MixMask { bits: vec![true; 8], ratio: 1.0 };
        let zeros = MixMask { bits: vec![false; 8], ratio: 0.0 };
        assert_eq!(mix_patchsets(&pa, &pb, &ones).unwrap(), pa);
        assert_eq!(mix_patchsets(&pa, &pb, &zeros).unwrap(), pb);
    }

    #[test]
    fn mix_provenance_counts_follow_mask() {
        let mut r = rng::stream(20, "geom.mix2", 0);
        let pa = knn_group(&random_cloud(&mut r, 64), &(0..16).collect::<Vec<_>>(), 4).unwrap().with_source(7);
        let pb = knn_group(&random_cloud(&mut r, 64), &(0..16).collect::<Vec<_>>(), 4).unwrap().with_source(9);
        let mask = sample_mix_mask(16, 0.5, &mut r);
        let mixed = mix_patchsets(&pa, &pb, &mask).unwrap();
        let from_a = mixed.source_ids.iter().filter(|&&s| s == 7).count();
        let from_b = mixed.source_ids.iter().filter(|&&s| s == 9).count();
        assert_eq!(from_a, mask.popcount());
        assert_eq!(from_b, 16 - mask.popcount());
    }

    #[test]
    fn mix_rejects_shape_mismatch() {
        let mut r = rng::stream(21, "geom.mix3", 0);
        let pa = knn_group(&random_cloud(&mut r, 64), &(0..8).collect::<Vec<_>>(), 4).unwrap();
        let pb = knn_group(&random_cloud(&mut r, 64), &(0..9).collect::<Vec<_>>(), 4).unwrap();
        let mask = MixMask { bits: vec![true; 8], ratio: 1.0 };
        assert!(mix_patchsets(&pa, &pb, &mask).is_err());
    }
}

//! Deterministic point-cloud kernels: normalization, farthest-point sampling,
//! k-nearest-neighbors, and the squared-L2 Chamfer distance.
//!
//! All distances are kept in squared form; the functions are pure and safe to
//! call from any number of threads.

pub mod io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered sequence of 3D points in normalized object coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud { points }
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.iter().all(|c| c.is_finite()))
    }

    /// Selects a sub-cloud by index, in index order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            c[0] += p[0];
            c[1] += p[1];
            c[2] += p[2];
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Radius of the bounding sphere about the centroid.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.points
            .iter()
            .map(|p| sq_dist(*p, c))
            .fold(0.0f64, f64::max)
            .sqrt()
    }
}

pub fn sq_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Centers a cloud at its centroid and scales so the farthest point sits on
/// the unit sphere. A degenerate cloud (all points coincident) is centered
/// only; the scale stays 1 so downstream math remains finite.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<PointCloud, GeometryError> {
    if pc.is_empty() {
        return Err(GeometryError::InvalidInput("empty point cloud".into()));
    }
    if !pc.is_finite() {
        return Err(GeometryError::InvalidInput(
            "non-finite coordinate in point cloud".into(),
        ));
    }
    let c = pc.centroid();
    let radius = pc
        .points
        .iter()
        .map(|p| sq_dist(*p, c))
        .fold(0.0f64, f64::max)
        .sqrt();
    let inv = if radius < 1e-12 { 1.0 } else { 1.0 / radius };
    Ok(PointCloud::new(
        pc.points
            .iter()
            .map(|p| {
                [
                    (p[0] - c[0]) * inv,
                    (p[1] - c[1]) * inv,
                    (p[2] - c[2]) * inv,
                ]
            })
            .collect(),
    ))
}

/// Farthest-point sampling.
///
/// `indices[0] = start`; each following index maximizes the minimum squared
/// distance to the already-selected set, ties broken by lowest index. The
/// output for `k` is a prefix of the output for `k+1`.
pub fn fps(pc: &PointCloud, k: usize, start: usize) -> Result<Vec<usize>, GeometryError> {
    let n = pc.len();
    if k == 0 || k > n {
        return Err(GeometryError::InvalidArgument(format!(
            "fps: k = {k} out of range for cloud of {n} points"
        )));
    }
    if start >= n {
        return Err(GeometryError::InvalidArgument(format!(
            "fps: start index {start} out of range for cloud of {n} points"
        )));
    }
    let pts = pc.points();
    let mut selected = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    selected.push(current);
    for _ in 1..k {
        let cur = pts[current];
        let mut best = 0usize;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in pts.iter().enumerate() {
            let d = sq_dist(*p, cur);
            if d < min_d[i] {
                min_d[i] = d;
            }
            // Strictly-greater comparison keeps the lowest index on ties.
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// k-nearest-neighbors by brute force.
///
/// For each query point, returns the `k` indices into `pc` with the smallest
/// squared distance, ascending, ties broken by lowest index. A query that
/// coincides with a point of `pc` includes it at distance zero.
pub fn knn(
    pc: &PointCloud,
    queries: &PointCloud,
    k: usize,
) -> Result<Vec<Vec<usize>>, GeometryError> {
    let n = pc.len();
    if k == 0 || k > n {
        return Err(GeometryError::InvalidArgument(format!(
            "knn: k = {k} out of range for cloud of {n} points"
        )));
    }
    let pts = pc.points();
    let mut out = Vec::with_capacity(queries.len());
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(n);
    for q in queries.points() {
        scratch.clear();
        scratch.extend(pts.iter().enumerate().map(|(i, p)| (sq_dist(*p, *q), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
        };
        if k < n {
            scratch.select_nth_unstable_by(k - 1, cmp);
        }
        scratch[..k].sort_unstable_by(cmp);
        out.push(scratch[..k].iter().map(|&(_, i)| i).collect());
    }
    Ok(out)
}

/// Squared-L2 Chamfer distance:
/// `(1/|P|) Σ_p min_q ‖p−q‖² + (1/|Q|) Σ_q min_p ‖q−p‖²`.
pub fn chamfer_l2(p: &PointCloud, q: &PointCloud) -> Result<f64, GeometryError> {
    if p.is_empty() || q.is_empty() {
        return Err(GeometryError::InvalidArgument(
            "chamfer_l2: empty point cloud".into(),
        ));
    }
    Ok(one_sided_mean(p, q) + one_sided_mean(q, p))
}

fn one_sided_mean(from: &PointCloud, to: &PointCloud) -> f64 {
    let mut sum = 0.0;
    for a in from.points() {
        let mut best = f64::INFINITY;
        for b in to.points() {
            let d = sq_dist(*a, *b);
            if d < best {
                best = d;
            }
        }
        sum += best;
    }
    sum / from.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use proptest::prelude::*;

    fn random_cloud(seed: u64, n: usize) -> PointCloud {
        let mut s = Stream::new(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    [
                        s.uniform_in(-1.0, 1.0),
                        s.uniform_in(-1.0, 1.0),
                        s.uniform_in(-1.0, 1.0),
                    ]
                })
                .collect(),
        )
    }

    #[test]
    fn normalize_two_points() {
        let pc = PointCloud::new(vec![[2.0, 0.0, 0.0], [4.0, 0.0, 0.0]]);
        let out = normalize_unit_sphere(&pc).unwrap();
        assert_eq!(out.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_degenerate_keeps_scale() {
        let pc = PointCloud::new(vec![[3.0, -1.0, 2.0]]);
        let out = normalize_unit_sphere(&pc).unwrap();
        assert_eq!(out.points(), &[[0.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let pc = random_cloud(11, 64);
        let once = normalize_unit_sphere(&pc).unwrap();
        let twice = normalize_unit_sphere(&once).unwrap();
        for (a, b) in once.points().iter().zip(twice.points()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() < 1e-12);
            }
        }
        // Post-conditions: near-zero centroid, max norm 1.
        let c = once.centroid();
        assert!(c.iter().all(|v| v.abs() < 1e-6));
        let max_norm = once
            .points()
            .iter()
            .map(|p| sq_dist(*p, [0.0; 3]).sqrt())
            .fold(0.0f64, f64::max);
        assert!((max_norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let pc = PointCloud::new(vec![[f64::NAN, 0.0, 0.0]]);
        assert!(matches!(
            normalize_unit_sphere(&pc),
            Err(GeometryError::InvalidInput(_))
        ));
    }

    #[test]
    fn fps_square_corners() {
        let pc = PointCloud::new(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ]);
        assert_eq!(fps(&pc, 2, 0).unwrap(), vec![0, 2]);
        // Indices 1 and 3 tie at min distance 1; the lowest index wins.
        assert_eq!(fps(&pc, 3, 0).unwrap(), vec![0, 2, 1]);
        assert_eq!(fps(&pc, 4, 0).unwrap(), vec![0, 2, 1, 3]);
    }

    #[test]
    fn fps_k_equals_count() {
        let pc = random_cloud(5, 17);
        let idx = fps(&pc, 17, 3).unwrap();
        assert_eq!(idx[0], 3);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_bad_k() {
        let pc = random_cloud(5, 4);
        assert!(fps(&pc, 5, 0).is_err());
        assert!(fps(&pc, 0, 0).is_err());
        assert!(fps(&pc, 2, 4).is_err());
    }

    /// Exhaustive reference: recompute the greedy argmax with a plain scan.
    fn fps_oracle(pc: &PointCloud, k: usize, start: usize) -> Vec<usize> {
        let pts = pc.points();
        let mut sel = vec![start];
        while sel.len() < k {
            let mut best = usize::MAX;
            let mut best_d = f64::NEG_INFINITY;
            for i in 0..pts.len() {
                let d = sel
                    .iter()
                    .map(|&s| sq_dist(pts[i], pts[s]))
                    .fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = i;
                }
            }
            sel.push(best);
        }
        sel
    }

    #[test]
    fn fps_matches_oracle_on_random_instances() {
        for seed in 0..20 {
            let n = 3 + (seed as usize * 7) % 60;
            let pc = random_cloud(100 + seed, n);
            let k = 1 + (seed as usize) % n;
            let start = (seed as usize * 13) % n;
            assert_eq!(
                fps(&pc, k, start).unwrap(),
                fps_oracle(&pc, k, start),
                "seed {seed}"
            );
        }
    }

    #[test]
    fn knn_simple_cases() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]]);
        let q = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(knn(&pc, &q, 1).unwrap(), vec![vec![0]]);

        let pc = random_cloud(2, 8);
        let q = PointCloud::new(vec![pc.points()[3]]);
        assert_eq!(knn(&pc, &q, 1).unwrap(), vec![vec![3]]);
    }

    #[test]
    fn knn_full_sort_matches_bruteforce() {
        let pc = random_cloud(21, 5);
        let q = random_cloud(22, 3);
        let got = knn(&pc, &q, 5).unwrap();
        for (qi, qp) in q.points().iter().enumerate() {
            let mut ref_order: Vec<usize> = (0..5).collect();
            ref_order.sort_by(|&a, &b| {
                sq_dist(pc.points()[a], *qp)
                    .total_cmp(&sq_dist(pc.points()[b], *qp))
                    .then(a.cmp(&b))
            });
            assert_eq!(got[qi], ref_order);
        }
    }

    #[test]
    fn knn_rejects_bad_k() {
        let pc = random_cloud(1, 4);
        assert!(knn(&pc, &pc, 5).is_err());
    }

    #[test]
    fn chamfer_known_values() {
        let p = PointCloud::new(vec![[0.0, 0.0, 0.0]]);
        let q = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_l2(&p, &q).unwrap(), 2.0);

        let p = PointCloud::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let q = PointCloud::new(vec![[1.0, 0.0, 0.0]]);
        // (1 + 1)/2 + 1 = 2.
        assert_eq!(chamfer_l2(&p, &q).unwrap(), 2.0);
    }

    #[test]
    fn chamfer_self_is_zero() {
        let pc = random_cloud(31, 40);
        assert_eq!(chamfer_l2(&pc, &pc).unwrap(), 0.0);
    }

    #[test]
    fn chamfer_rejects_empty() {
        let p = PointCloud::new(vec![]);
        let q = PointCloud::new(vec![[0.0; 3]]);
        assert!(chamfer_l2(&p, &q).is_err());
    }

    proptest! {
        #[test]
        fn chamfer_symmetric(seed in 0u64..500) {
            let p = random_cloud(seed, 2 + (seed % 30) as usize);
            let q = random_cloud(seed + 1000, 2 + ((seed * 3) % 30) as usize);
            let ab = chamfer_l2(&p, &q).unwrap();
            let ba = chamfer_l2(&q, &p).unwrap();
            prop_assert_eq!(ab, ba);
        }

        #[test]
        fn fps_prefix_monotone(seed in 0u64..200) {
            let n = 4 + (seed % 40) as usize;
            let pc = random_cloud(seed, n);
            let k = 2 + (seed % (n as u64 - 1)) as usize;
            let start = (seed % n as u64) as usize;
            let small = fps(&pc, k - 1, start).unwrap();
            let big = fps(&pc, k, start).unwrap();
            prop_assert_eq!(&big[..k - 1], &small[..]);
        }

        #[test]
        fn knn_matches_bruteforce_oracle(seed in 0u64..200) {
            let n = 3 + (seed % 60) as usize;
            let m = 1 + (seed % 10) as usize;
            let pc = random_cloud(seed + 7, n);
            let q = random_cloud(seed + 9000, m);
            let k = 1 + (seed % n as u64) as usize;
            let got = knn(&pc, &q, k).unwrap();
            for (qi, qp) in q.points().iter().enumerate() {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| {
                    sq_dist(pc.points()[a], *qp)
                        .total_cmp(&sq_dist(pc.points()[b], *qp))
                        .then(a.cmp(&b))
                });
                prop_assert_eq!(&got[qi][..], &order[..k]);
            }
        }
    }

    #[test]
    fn chamfer_rigid_rotation_invariant() {
        use crate::math3::quat_rotate;
        let p = random_cloud(51, 24);
        let q = random_cloud(52, 30);
        let base = chamfer_l2(&p, &q).unwrap();
        let mut s = Stream::new(99);
        for _ in 0..5 {
            let quat = s.rotation_quat();
            let rot = |pc: &PointCloud| {
                PointCloud::new(pc.points().iter().map(|&pt| quat_rotate(quat, pt)).collect())
            };
            let r = chamfer_l2(&rot(&p), &rot(&q)).unwrap();
            assert!((r - base).abs() <= 1e-9 * base.max(1.0));
        }
    }
}

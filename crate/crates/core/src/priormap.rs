//! Prior map as a voxel grid of fitted planes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::FileFormatError;
use crate::{Error, Result};

pub const DEFAULT_VOXEL_SIZE: f64 = 0.4;

/// Plane-fit acceptance thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlaneFitParams {
    pub min_points: usize,
    /// `1 − λ_min / λ_mid` lower bound.
    pub min_planarity: f64,
    /// Upper bound on the RMS point-to-plane distance, meters.
    pub max_rms: f64,
}

impl Default for PlaneFitParams {
    fn default() -> Self {
        PlaneFitParams {
            min_points: 6,
            min_planarity: 0.9,
            max_rms: 0.05,
        }
    }
}

/// Plane `normal · x = offset` fitted inside one voxel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VoxelPlane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub planarity: f64,
    pub point_count: usize,
}

impl VoxelPlane {
    pub fn signed_distance(&self, x: &Vector3<f64>) -> f64 {
        self.normal.dot(x) - self.offset
    }
}

/// Total-least-squares plane through `points`, or `None` when the points
/// are too few, degenerate, or fail the acceptance thresholds.
pub fn fit_plane(points: &[Vector3<f64>], params: &PlaneFitParams) -> Option<VoxelPlane> {
    if points.len() < params.min_points.max(3) {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - centroid;
        a + d * d.transpose()
    }) / n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l_min, l_mid, l_max) = (
        eig.eigenvalues[order[0]].max(0.0),
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    if !(l_max > 0.0) || l_mid <= 1e-12 * l_max {
        return None;
    }
    let planarity = (1.0 - l_min / l_mid).clamp(0.0, 1.0);
    let rms = l_min.sqrt();
    if planarity < params.min_planarity || rms > params.max_rms {
        return None;
    }
    let mut normal = eig.eigenvectors.column(order[0]).normalize();
    let mut offset = normal.dot(&centroid);
    let flip = if offset != 0.0 {
        offset < 0.0
    } else {
        // On the origin: make the first non-zero component positive.
        normal.iter().find(|v| **v != 0.0).map(|v| *v < 0.0).unwrap_or(false)
    };
    if flip {
        normal = -normal;
        offset = -offset;
    }
    Some(VoxelPlane {
        normal,
        offset,
        planarity,
        point_count: points.len(),
    })
}

pub type VoxelKey = [i64; 3];

pub fn voxel_key(x: &Vector3<f64>, voxel_size: f64) -> VoxelKey {
    [
        (x.x / voxel_size).floor() as i64,
        (x.y / voxel_size).floor() as i64,
        (x.z / voxel_size).floor() as i64,
    ]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct BuildStats {
    pub points: usize,
    pub occupied_voxels: usize,
    pub accepted: usize,
    /// Occupied voxels with fewer than `min_points` points.
    pub too_few_points: usize,
    /// Voxels failing planarity, RMS or degeneracy checks.
    pub rejected_fit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelMap {
    voxel_size: f64,
    planes: BTreeMap<VoxelKey, VoxelPlane>,
}

impl VoxelMap {
    /// A map without planes; every query misses.
    pub fn empty(voxel_size: f64) -> Self {
        VoxelMap {
            voxel_size,
            planes: BTreeMap::new(),
        }
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.planes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty()
    }

    pub fn planes(&self) -> impl Iterator<Item = (&VoxelKey, &VoxelPlane)> {
        self.planes.iter()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelPlane> {
        self.planes.get(key)
    }

    /// Plane of the voxel containing `x`, keyed by `floor(x / voxel_size)`, so
    /// a point on a voxel face belongs to the voxel on its positive side.
    pub fn query(&self, x: &Vector3<f64>) -> Option<&VoxelPlane> {
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        self.planes.get(&voxel_key(x, self.voxel_size))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("voxmap v1\n");
        let _ = writeln!(s, "{:.16e} {}", self.voxel_size, self.planes.len());
        for (k, p) in &self.planes {
            let _ = writeln!(
                s,
                "{} {} {} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {}",
                k[0], k[1], k[2], p.normal.x, p.normal.y, p.normal.z, p.offset, p.planarity, p.point_count
            );
        }
        s
    }

    pub fn from_text(text: &str, path: &str) -> std::result::Result<Self, FileFormatError> {
        let err = |line: usize, reason: String| FileFormatError::new(path, line, reason);
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        match lines.next() {
            Some((_, "voxmap v1")) => {}
            Some((no, other)) => return Err(err(no, format!("expected `voxmap v1`, found `{other}`"))),
            None => return Err(err(1, "empty voxel map file".into())),
        }
        let (hno, header) = lines.next().ok_or_else(|| err(2, "missing header line".into()))?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 2 {
            return Err(err(hno, "header must be `voxel_size n_voxels`".into()));
        }
        let voxel_size: f64 = h[0].parse().map_err(|_| err(hno, format!("bad voxel size `{}`", h[0])))?;
        let count: usize = h[1].parse().map_err(|_| err(hno, format!("bad voxel count `{}`", h[1])))?;
        if !(voxel_size > 0.0) || !voxel_size.is_finite() {
            return Err(err(hno, "voxel size must be positive".into()));
        }
        let mut planes = BTreeMap::new();
        let mut last = hno;
        for (no, line) in lines {
            last = no;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 9 {
                return Err(err(no, format!("expected 9 fields, found {}", f.len())));
            }
            let int = |s: &str| s.parse::<i64>().map_err(|_| err(no, format!("bad index `{s}`")));
            let num = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(no, format!("bad number `{s}`")))
            };
            let key = [int(f[0])?, int(f[1])?, int(f[2])?];
            let normal = Vector3::new(num(f[3])?, num(f[4])?, num(f[5])?);
            if (normal.norm() - 1.0).abs() > 1e-9 {
                return Err(err(no, "normal is not unit length".into()));
            }
            let planarity = num(f[7])?;
            if !(0.0..=1.0).contains(&planarity) {
                return Err(err(no, "planarity outside [0, 1]".into()));
            }
            let point_count = f[8].parse::<usize>().map_err(|_| err(no, format!("bad count `{}`", f[8])))?;
            let plane = VoxelPlane {
                normal,
                offset: num(f[6])?,
                planarity,
                point_count,
            };
            if planes.insert(key, plane).is_some() {
                return Err(err(no, format!("duplicate voxel {key:?}")));
            }
        }
        if planes.len() != count {
            return Err(err(last, format!("header declares {count} voxels, found {}", planes.len())));
        }
        Ok(VoxelMap { voxel_size, planes })
    }
}

/// Buckets `cloud` into voxels and fits one plane per voxel.
///
/// Points inside each voxel are sorted before fitting, so the result does
/// not depend on input order or on the number of worker threads.
pub fn build_map_with_stats(
    cloud: &[Vector3<f64>],
    voxel_size: f64,
    params: &PlaneFitParams,
) -> Result<(VoxelMap, BuildStats)> {
    if !(voxel_size > 0.0) || !voxel_size.is_finite() {
        return Err(Error::InvalidInput(format!("voxel size must be positive, got {voxel_size}")));
    }
    if cloud.is_empty() {
        return Err(Error::InvalidInput("prior map cloud is empty".into()));
    }
    let mut buckets: BTreeMap<VoxelKey, Vec<Vector3<f64>>> = BTreeMap::new();
    for p in cloud {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("map point"));
        }
        buckets.entry(voxel_key(p, voxel_size)).or_default().push(*p);
    }
    let buckets: Vec<(VoxelKey, Vec<Vector3<f64>>)> = buckets.into_iter().collect();
    let fitted: Vec<(VoxelKey, usize, Option<VoxelPlane>)> = buckets
        .into_par_iter()
        .map(|(key, mut pts)| {
            pts.sort_by(|a, b| {
                a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
            });
            let plane = fit_plane(&pts, params);
            (key, pts.len(), plane)
        })
        .collect();

    let mut stats = BuildStats {
        points: cloud.len(),
        occupied_voxels: fitted.len(),
        ..Default::default()
    };
    let mut planes = BTreeMap::new();
    for (key, count, plane) in fitted {
        match plane {
            Some(p) => {
                stats.accepted += 1;
                planes.insert(key, p);
            }
            None if count < params.min_points => stats.too_few_points += 1,
            None => stats.rejected_fit += 1,
        }
    }
    Ok((VoxelMap { voxel_size, planes }, stats))
}

pub fn build_map(cloud: &[Vector3<f64>], voxel_size: f64, params: &PlaneFitParams) -> Result<VoxelMap> {
    build_map_with_stats(cloud, voxel_size, params).map(|(m, _)| m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn grid_plane_z(z: f64) -> Vec<Vector3<f64>> {
        (0..8).map(|i| Vector3::new((i % 4) as f64 * 0.1, (i / 4) as f64 * 0.1, z)).collect()
    }

    /// Normal from the SVD of the centered data matrix.
    fn svd_normal(points: &[Vector3<f64>]) -> Vector3<f64> {
        let c = points.iter().fold(Vector3::zeros(), |a, p| a + p) / points.len() as f64;
        let m = DMatrix::from_fn(points.len(), 3, |r, k| points[r][k] - c[k]);
        let svd = m.svd(false, true);
        let v_t = svd.v_t.unwrap();
        let i = (0..3).min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b])).unwrap();
        Vector3::new(v_t[(i, 0)], v_t[(i, 1)], v_t[(i, 2)])
    }

    #[test]
    fn exact_plane() {
        let p = fit_plane(&grid_plane_z(2.0), &PlaneFitParams::default()).unwrap();
        assert_abs_diff_eq!(p.normal, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(p.offset, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.planarity, 1.0, epsilon = 1e-9);
        assert_eq!(p.point_count, 8);
        let below = fit_plane(&grid_plane_z(-2.0), &PlaneFitParams::default()).unwrap();
        assert_abs_diff_eq!(below.normal, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(below.offset, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_and_sparse_rejected() {
        let line: Vec<_> = (0..6).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 1.0)).collect();
        assert!(fit_plane(&line, &PlaneFitParams::default()).is_none());
        assert!(fit_plane(&grid_plane_z(1.0)[..5], &PlaneFitParams::default()).is_none());
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 10];
        assert!(fit_plane(&same, &PlaneFitParams::default()).is_none());
    }

    #[test]
    fn noisy_plane_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.005).unwrap();
        for _ in 0..20 {
            let n = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let a = n.cross(&Vector3::new(0.3, 0.1, 0.9)).normalize();
            let b = n.cross(&a);
            let pts: Vec<_> = (0..50)
                .map(|_| a * rng.random_range(-0.2..0.2) + b * rng.random_range(-0.2..0.2) + n * (1.0 + noise.sample(&mut rng)))
                .collect();
            let plane = fit_plane(&pts, &PlaneFitParams::default()).unwrap();
            let oracle = svd_normal(&pts);
            let angle = plane.normal.dot(&oracle).abs().min(1.0).acos();
            assert!(angle.to_degrees() < 1.0, "angle {angle}");
            assert!(angle < 1e-6, "angle {angle}");
        }
    }

    #[test]
    fn build_single_plane_and_query() {
        let cloud: Vec<_> = (0..40)
            .flat_map(|i| (0..40).map(move |j| Vector3::new(i as f64 * 0.05 + 0.01, j as f64 * 0.05 + 0.01, 0.5)))
            .collect();
        let map = build_map(&cloud, 1.0, &PlaneFitParams::default()).unwrap();
        assert_eq!(map.len(), 4);
        for (_, p) in map.planes() {
            assert_abs_diff_eq!(p.normal, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-6);
            assert_abs_diff_eq!(p.offset, 0.5, epsilon = 1e-6);
        }
        assert!(map.query(&Vector3::new(0.5, 0.5, 0.5)).is_some());
        assert!(map.query(&Vector3::new(0.5, 0.5, 3.5)).is_none());
        assert!(map.query(&Vector3::new(-0.5, 0.5, 0.5)).is_none());
        // x = 1.0 exactly lies in voxel 1, not voxel 0.
        assert_eq!(voxel_key(&Vector3::new(1.0, 0.0, -0.0), 1.0), [1, 0, 0]);
        assert_eq!(voxel_key(&Vector3::new(-1e-300, 0.0, 0.0), 1.0), [-1, 0, 0]);
    }

    #[test]
    fn perpendicular_walls() {
        // Walls x = 0.5 and y = 0.5 meeting in a corner voxel.
        let mut cloud = Vec::new();
        for i in 0..60 {
            for j in 0..20 {
                let a = i as f64 * 0.05 + 0.51;
                let z = j as f64 * 0.05 + 0.01;
                cloud.push(Vector3::new(0.5, a, z));
                cloud.push(Vector3::new(a, 0.5, z));
            }
        }
        for i in 0..10 {
            for j in 0..20 {
                let a = i as f64 * 0.05 + 0.01;
                let z = j as f64 * 0.05 + 0.01;
                cloud.push(Vector3::new(0.5, a, z));
                cloud.push(Vector3::new(a, 0.5, z));
            }
        }
        let (map, stats) = build_map_with_stats(&cloud, 1.0, &PlaneFitParams::default()).unwrap();
        assert!(map.get(&[0, 0, 0]).is_none());
        assert_eq!(stats.rejected_fit, 1);
        for k in 1..3 {
            assert_abs_diff_eq!(map.get(&[0, k, 0]).unwrap().normal, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-9);
            assert_abs_diff_eq!(map.get(&[k, 0, 0]).unwrap().normal, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-9);
        }
    }

    #[test]
    fn single_point_and_empty() {
        let map = build_map(&[Vector3::new(1.0, 2.0, 3.0)], 0.4, &PlaneFitParams::default()).unwrap();
        assert!(map.is_empty());
        assert!(build_map(&[], 0.4, &PlaneFitParams::default()).is_err());
        assert!(build_map(&[Vector3::zeros()], 0.0, &PlaneFitParams::default()).is_err());
    }

    #[test]
    fn permutation_invariance_and_text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cloud: Vec<_> = (0..3000)
            .map(|_| {
                let x = rng.random_range(-2.0..2.0);
                let y = rng.random_range(-2.0..2.0);
                Vector3::new(x, y, 0.3 * x - 0.2 * y + 1.1 + rng.random_range(-0.01..0.01))
            })
            .collect();
        let a = build_map(&cloud, 0.4, &PlaneFitParams::default()).unwrap();
        cloud.reverse();
        let b = build_map(&cloud, 0.4, &PlaneFitParams::default()).unwrap();
        assert_eq!(a, b);
        let back = VoxelMap::from_text(&a.to_text(), "m").unwrap();
        assert_eq!(back, a);
        for p in &cloud {
            if let Some(plane) = a.query(p) {
                assert!(plane.signed_distance(p).abs() <= 3.0 * 0.05);
            }
        }
    }
}

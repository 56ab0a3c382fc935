//! Trajectory accuracy (ATE) and velocity statistics.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{Pose, Rotation};
use crate::trajectory::SplineTrajectory;
use crate::{Error, Result};

/// Nearest-neighbour window when the ground truth is a discrete sample set.
pub const MATCH_WINDOW: f64 = 0.02;
pub const DEFAULT_BIN_WIDTH_KMH: f64 = 0.5;
const MS_TO_KMH: f64 = 3.6;

/// Timestamped poses, strictly increasing in time.
pub type TrajectorySamples = [(f64, Pose)];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    None,
    Se3,
    Sim3,
}

impl std::str::FromStr for AlignMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AlignMode::None),
            "se3" => Ok(AlignMode::Se3),
            "sim3" => Ok(AlignMode::Sim3),
            _ => Err(format!("unknown alignment '{s}' (expected none, se3 or sim3)")),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum GroundTruth<'a> {
    Spline(&'a SplineTrajectory),
    Samples(&'a TrajectorySamples),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Alignment {
    /// Unit quaternion, `w` first.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
    pub scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairError {
    pub t: f64,
    pub position_m: f64,
    pub rotation_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AteReport {
    pub align: AlignMode,
    pub matched_pairs: usize,
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
    /// Rotation errors are informational; the headline numbers are positional.
    pub rotation_rmse_deg: f64,
    pub rotation_max_deg: f64,
    pub alignment: Alignment,
    pub errors: Vec<PairError>,
}

/// Least-squares transform `x ↦ s·R·x + p` taking `est` onto `reference`.
/// Without `with_scale` the returned scale is exactly 1.
pub fn umeyama_align(est: &[Vector3<f64>], reference: &[Vector3<f64>], with_scale: bool) -> Result<(Pose, f64)> {
    if est.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "alignment needs equal-length point sets, got {} and {}",
            est.len(),
            reference.len()
        )));
    }
    let n = est.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("alignment needs at least 3 points, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() * inv_n;
    let mu_r = reference.iter().sum::<Vector3<f64>>() * inv_n;
    let mut cov = Matrix3::zeros();
    let mut spread = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, r) in est.iter().zip(reference) {
        let de = e - mu_e;
        cov += (r - mu_r) * de.transpose();
        spread += de * de.transpose();
        var_e += de.norm_squared();
    }
    cov *= inv_n;
    var_e *= inv_n;

    let mut ev: Vec<f64> = spread.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    if !(ev[2] > 0.0) || ev[1] <= 1e-12 * ev[2] {
        return Err(Error::Degenerate("alignment points are coincident or collinear".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_e
    } else {
        1.0
    };
    let p = mu_r - scale * r * mu_e;
    let rotation = Rotation::from_unit_quaternion(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)));
    Ok((Pose::new(rotation, p), scale))
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn nearest(gt: &TrajectorySamples, t: f64) -> Option<&Pose> {
    let i = gt.partition_point(|(s, _)| *s < t);
    let mut best: Option<(f64, &Pose)> = None;
    for j in [i.wrapping_sub(1), i] {
        if let Some((s, p)) = gt.get(j) {
            let d = (s - t).abs();
            if d <= MATCH_WINDOW && best.is_none_or(|(b, _)| d < b) {
                best = Some((d, p));
            }
        }
    }
    best.map(|(_, p)| p)
}

/// Pairs estimate samples with ground truth poses at the same times.
pub fn match_poses(est: &TrajectorySamples, gt: GroundTruth<'_>) -> Result<Vec<(f64, Pose, Pose)>> {
    let mut out = Vec::with_capacity(est.len());
    for (t, e) in est {
        let g = match gt {
            GroundTruth::Spline(s) => {
                if !s.contains(*t) {
                    continue;
                }
                s.pose_at(*t)?
            }
            GroundTruth::Samples(g) => match nearest(g, *t) {
                Some(p) => *p,
                None => continue,
            },
        };
        out.push((*t, *e, g));
    }
    Ok(out)
}

/// Absolute trajectory error of `est` against `gt` after the requested alignment.
pub fn compute_ate(est: &TrajectorySamples, gt: GroundTruth<'_>, align: AlignMode) -> Result<AteReport> {
    let pairs = match_poses(est, gt)?;
    if pairs.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "only {} estimate pose(s) overlap the ground truth, need at least 3",
            pairs.len()
        )));
    }
    let (transform, scale) = match align {
        AlignMode::None => (Pose::identity(), 1.0),
        AlignMode::Se3 | AlignMode::Sim3 => {
            let e: Vec<_> = pairs.iter().map(|p| p.1.position).collect();
            let g: Vec<_> = pairs.iter().map(|p| p.2.position).collect();
            umeyama_align(&e, &g, align == AlignMode::Sim3)?
        }
    };
    let errors: Vec<PairError> = pairs
        .iter()
        .map(|(t, e, g)| {
            let p = scale * transform.rotation.act(&e.position) + transform.position;
            let r = transform.rotation.compose(&e.rotation);
            PairError {
                t: *t,
                position_m: (p - g.position).norm(),
                rotation_deg: r.angle_to(&g.rotation).to_degrees(),
            }
        })
        .collect();
    let n = errors.len() as f64;
    let mut pos: Vec<f64> = errors.iter().map(|e| e.position_m).collect();
    pos.sort_by(f64::total_cmp);
    let rot_sq: f64 = errors.iter().map(|e| e.rotation_deg * e.rotation_deg).sum();
    Ok(AteReport {
        align,
        matched_pairs: errors.len(),
        rmse: (pos.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean: pos.iter().sum::<f64>() / n,
        median: median(&pos),
        max: *pos.last().unwrap(),
        rotation_rmse_deg: (rot_sq / n).sqrt(),
        rotation_max_deg: errors.iter().map(|e| e.rotation_deg).fold(0.0, f64::max),
        alignment: Alignment {
            rotation: transform.rotation.wxyz(),
            translation: transform.position.into(),
            scale,
        },
        errors,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VelocityStats {
    pub samples: usize,
    pub max_kmh: f64,
    pub median_kmh: f64,
    pub bin_width_kmh: f64,
    /// Counts for bins `[i·w, (i+1)·w)` starting at zero.
    pub histogram: Vec<usize>,
}

/// Speed of the spline sampled every `1/rate` seconds from the start of its domain.
pub fn velocity_stats(traj: &SplineTrajectory, rate: f64, bin_width_kmh: f64) -> Result<VelocityStats> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidInput(format!("sampling rate must be positive, got {rate}")));
    }
    if !(bin_width_kmh > 0.0 && bin_width_kmh.is_finite()) {
        return Err(Error::InvalidInput(format!("histogram bin width must be positive, got {bin_width_kmh}")));
    }
    let (start, end) = traj.domain();
    let mut speeds = Vec::new();
    let mut i = 0usize;
    loop {
        let t = start + i as f64 / rate;
        if t >= end {
            break;
        }
        speeds.push(traj.velocity_world(t)?.norm() * MS_TO_KMH);
        i += 1;
    }
    let mut histogram = Vec::new();
    for s in &speeds {
        let bin = (s / bin_width_kmh).floor() as usize;
        if histogram.len() <= bin {
            histogram.resize(bin + 1, 0);
        }
        histogram[bin] += 1;
    }
    let mut sorted = speeds.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(VelocityStats {
        samples: speeds.len(),
        max_kmh: sorted.last().copied().unwrap_or(0.0),
        median_kmh: median(&sorted),
        bin_width_kmh,
        histogram,
    })
}

/// Histogram as `bin_start_kmh,bin_end_kmh,count` rows.
pub fn histogram_csv(stats: &VelocityStats) -> String {
    let mut out = String::from("bin_start_kmh,bin_end_kmh,count\n");
    for (i, c) in stats.histogram.iter().enumerate() {
        let a = i as f64 * stats.bin_width_kmh;
        out.push_str(&format!("{a},{},{c}\n", a + stats.bin_width_kmh));
    }
    out
}

//! Trajectory and bias estimation from prior poses, lidar points and IMU
//! samples.
//!
//! The cost is the sum of four families of squared whitened residuals:
//!
//! * pose prior: `Log(R̄⁻¹ R(t_k))` and `p(t_k) − p̄`
//! * lidar: `nᵀ(R(t_i) f + p(t_i)) − μ` against the plane of the voxel the
//!   point falls in, both rotation and position taken at the point time
//! * gyroscope: `R⁻¹(t) ω_W(t) + b_gyro − ω̆`
//! * accelerometer: `R⁻¹(t) (a_W(t) + g) + b_acce − ă`
//!
//! Lidar residuals go through a Huber loss; the others are quadratic.

mod association;
mod factors;
mod solver;

pub use association::{associate_scan, deskew_scan, Association};
pub use factors::{
    linearize_acce, linearize_gyro, linearize_lidar, linearize_pose, residual_acce, residual_gyro,
    residual_lidar, residual_pose, Linearized, BIAS_DIM, KNOT_DIM,
};
pub use solver::{solve_registration, FactorCosts, FactorCounts, SolveReport, StageReport, Termination};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::geometry::Pose;
use crate::priormap::{PlaneFitParams, DEFAULT_VOXEL_SIZE};
use crate::trajectory::{SplineTrajectory, DEFAULT_KNOT_INTERVAL, DEFAULT_ORDER};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Body-frame angular rate, rad/s.
    pub gyro: Vector3<f64>,
    /// Body-frame specific force, m/s².
    pub accel: Vector3<f64>,
}

/// A lidar return in the sensor body frame at its own acquisition time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub t: f64,
    pub f: Vector3<f64>,
}

/// Accepted open interval of lidar ranges, meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeGate {
    pub range_min: f64,
    pub range_max: f64,
}

impl Default for RangeGate {
    fn default() -> Self {
        RangeGate {
            range_min: 0.5,
            range_max: 120.0,
        }
    }
}

impl RangeGate {
    pub fn accepts(&self, f: &Vector3<f64>) -> bool {
        let r = f.norm();
        r.is_finite() && r > self.range_min && r < self.range_max
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PosePrior {
    pub t: f64,
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImuBias {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuBias {
    pub const MAX_GYRO: f64 = 1.0;
    pub const MAX_ACCEL: f64 = 5.0;

    /// True when the bias is finite and inside the sanity bounds.
    pub fn is_plausible(&self) -> bool {
        self.gyro.iter().chain(self.accel.iter()).all(|v| v.is_finite())
            && self.gyro.norm() < Self::MAX_GYRO
            && self.accel.norm() < Self::MAX_ACCEL
    }
}

/// Measurement standard deviations used to whiten the residuals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorWeights {
    /// rad, per rotation-vector component.
    pub pose_rot: Vector3<f64>,
    /// m, per axis.
    pub pose_pos: Vector3<f64>,
    /// m.
    pub lidar: f64,
    /// rad/s.
    pub gyro: f64,
    /// m/s².
    pub accel: f64,
}

impl Default for FactorWeights {
    fn default() -> Self {
        FactorWeights {
            pose_rot: Vector3::repeat(0.01),
            pose_pos: Vector3::repeat(0.1),
            lidar: 0.05,
            gyro: 0.01,
            accel: 0.1,
        }
    }
}

impl FactorWeights {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .pose_rot
            .iter()
            .chain(self.pose_pos.iter())
            .copied()
            .chain([self.lidar, self.gyro, self.accel]);
        for v in all {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("factor std-dev must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConstants {
    /// Added to the world acceleration before rotating into the body, so a
    /// level accelerometer at rest reads `+gravity`.
    pub gravity: Vector3<f64>,
}

impl Default for WorldConstants {
    fn default() -> Self {
        WorldConstants {
            gravity: Vector3::new(0.0, 0.0, 9.81),
        }
    }
}

impl WorldConstants {
    /// Checks `|g| ∈ [9.7, 9.9]` unless `allow_any` is set.
    pub fn validate(&self, allow_any: bool) -> Result<()> {
        let g = self.gravity.norm();
        if !g.is_finite() || (!allow_any && !(9.7..=9.9).contains(&g)) {
            return Err(Error::InvalidInput(format!("gravity magnitude {g} outside [9.7, 9.9]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MeasurementSet {
    pub scans: Vec<Vec<LidarPoint>>,
    pub imu: Vec<ImuSample>,
    pub priors: Vec<PosePrior>,
}

impl MeasurementSet {
    pub fn lidar_count(&self) -> usize {
        self.scans.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.lidar_count() == 0 && self.imu.is_empty() && self.priors.is_empty()
    }

    /// `(min, max)` over every measurement timestamp.
    pub fn time_span(&self) -> Option<(f64, f64)> {
        let times = self
            .scans
            .iter()
            .flatten()
            .map(|p| p.t)
            .chain(self.imu.iter().map(|s| s.t))
            .chain(self.priors.iter().map(|p| p.t));
        times.fold(None, |acc, t| match acc {
            None => Some((t, t)),
            Some((a, b)) => Some((a.min(t), b.max(t))),
        })
    }
}

/// Solver schedule and robustness parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub initial_lambda: f64,
    pub lambda_factor: f64,
    pub max_inner_iterations: usize,
    /// Relative cost decrease below which an inner loop stops.
    pub cost_tolerance: f64,
    pub max_outer_loops: usize,
    /// Fraction of unchanged associations that ends the outer loop.
    pub association_stability: f64,
    /// Huber threshold on whitened lidar residuals.
    pub huber_delta: f64,
    /// Maximum |whitened lidar residual| accepted during association.
    pub association_gate: f64,
    /// Run a priors + IMU solve before the first lidar association.
    pub inertial_warm_start: bool,
    /// Consecutive rejected steps before an inner loop gives up.
    pub max_rejections: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            initial_lambda: 1e-4,
            lambda_factor: 10.0,
            max_inner_iterations: 50,
            cost_tolerance: 1e-9,
            max_outer_loops: 5,
            association_stability: 0.99,
            huber_delta: 1.0,
            association_gate: 5.0,
            inertial_warm_start: true,
            max_rejections: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplineConfig {
    pub dt: f64,
    pub order: usize,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig {
            dt: DEFAULT_KNOT_INTERVAL,
            order: DEFAULT_ORDER,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub voxel_size: f64,
    pub min_points: usize,
    pub min_planarity: f64,
    pub max_rms: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        let fit = PlaneFitParams::default();
        MapConfig {
            voxel_size: DEFAULT_VOXEL_SIZE,
            min_points: fit.min_points,
            min_planarity: fit.min_planarity,
            max_rms: fit.max_rms,
        }
    }
}

impl MapConfig {
    pub fn fit_params(&self) -> PlaneFitParams {
        PlaneFitParams {
            min_points: self.min_points,
            min_planarity: self.min_planarity,
            max_rms: self.max_rms,
        }
    }
}

/// Everything `register` reads from its config file.
///
/// ```toml
/// [weights]
/// pose_rot = [0.01, 0.01, 0.01]
/// pose_pos = [0.1, 0.1, 0.1]
/// lidar = 0.05
/// gyro = 0.01
/// accel = 0.1
///
/// [map]
/// voxel_size = 0.4
/// min_points = 6
///
/// [spline]
/// dt = 0.1
/// order = 4
///
/// [solver]
/// initial_lambda = 1e-4
/// huber_delta = 1.0
///
/// [world]
/// gravity = [0.0, 0.0, 9.81]
/// ```
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub weights: FactorWeights,
    pub map: MapConfig,
    pub spline: SplineConfig,
    pub solver: SolverConfig,
    pub world: WorldConstants,
    pub lidar: RangeGate,
}

impl RegistrationConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RegistrationConfig =
            toml::from_str(text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.world.validate(false)?;
        let s = &self.solver;
        if !(s.initial_lambda > 0.0) || !(s.lambda_factor > 1.0) || !(s.huber_delta > 0.0) || !(s.association_gate > 0.0) {
            return Err(Error::InvalidInput("solver parameters must be positive (lambda factor > 1)".into()));
        }
        if !(self.spline.dt > 0.0) {
            return Err(Error::InvalidInput("spline dt must be positive".into()));
        }
        if !(self.map.voxel_size > 0.0) {
            return Err(Error::InvalidInput("voxel size must be positive".into()));
        }
        Ok(())
    }
}

/// Starting spline over `span` fitted to the pose priors with
/// [`SplineTrajectory::fit_from_poses_over`]. A single prior gives a
/// constant spline.
pub fn initial_trajectory(priors: &[PosePrior], span: (f64, f64), spline: &SplineConfig) -> Result<SplineTrajectory> {
    let (start, end) = span;
    if !(end >= start) || !start.is_finite() || !end.is_finite() {
        return Err(Error::InvalidInput(format!("invalid time span [{start}, {end}]")));
    }
    if priors.is_empty() {
        return Err(Error::InvalidInput("at least one pose prior is needed to initialize".into()));
    }
    let n = SplineTrajectory::knots_for_duration(end - start, spline.dt, spline.order);
    let poses: Vec<(f64, Pose)> = priors.iter().map(|p| (p.t, p.pose)).collect();
    SplineTrajectory::fit_from_poses_over(&poses, start, spline.dt, spline.order, n)
}

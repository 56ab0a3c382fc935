//! Whitened residuals and their analytic Jacobians.
//!
//! Knot parameters are perturbed as `R_j ← R_j exp(δr_j)`, `p_j ← p_j + δp_j`;
//! the Jacobian of a factor touching knots `first_knot .. first_knot + k`
//! is laid out per knot as `[δr (3) | δp (3)]`. Bias columns are
//! `[gyro (3) | accel (3)]`.

use nalgebra::{Matrix3, Vector3, Vector6};

use super::{FactorWeights, ImuBias, ImuSample, LidarPoint, PosePrior, WorldConstants};
use crate::geometry::{right_jacobian_inv, skew};
use crate::priormap::VoxelPlane;
use crate::trajectory::{SplineEval, SplineTrajectory};
use crate::Result;

pub const KNOT_DIM: usize = 6;
pub const BIAS_DIM: usize = 6;

/// One factor linearized at the current estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct Linearized {
    pub residual: Vec<f64>,
    pub first_knot: usize,
    pub order: usize,
    /// Row-major `residual.len() × KNOT_DIM·order`.
    pub knot_jacobian: Vec<f64>,
    /// Row-major `residual.len() × BIAS_DIM`; empty when the bias is not involved.
    pub bias_jacobian: Vec<f64>,
}

impl Linearized {
    fn new(rows: usize, e: &SplineEval, with_bias: bool) -> Self {
        let k = e.order();
        Linearized {
            residual: vec![0.0; rows],
            first_knot: e.first_knot,
            order: k,
            knot_jacobian: vec![0.0; rows * KNOT_DIM * k],
            bias_jacobian: if with_bias { vec![0.0; rows * BIAS_DIM] } else { Vec::new() },
        }
    }

    fn knot_cols(&self) -> usize {
        KNOT_DIM * self.order
    }

    fn set_knot_block(&mut self, row0: usize, knot: usize, offset: usize, block: &Matrix3<f64>, rows: usize) {
        let cols = self.knot_cols();
        for r in 0..rows {
            for c in 0..3 {
                self.knot_jacobian[(row0 + r) * cols + KNOT_DIM * knot + offset + c] = block[(r, c)];
            }
        }
    }

    /// `∂r/∂(knot m, column c)`.
    pub fn knot_entry(&self, row: usize, knot: usize, col: usize) -> f64 {
        self.knot_jacobian[row * self.knot_cols() + KNOT_DIM * knot + col]
    }

    pub fn bias_entry(&self, row: usize, col: usize) -> f64 {
        if self.bias_jacobian.is_empty() {
            0.0
        } else {
            self.bias_jacobian[row * BIAS_DIM + col]
        }
    }
}

fn pose_residual_from(e: &SplineEval, prior: &PosePrior, w: &FactorWeights) -> (Vector3<f64>, Vector6<f64>) {
    let rot_raw = prior.pose.rotation.inverse().compose(&e.rotation).log();
    let pos_raw = e.position - prior.pose.position;
    let r = Vector6::new(
        rot_raw.x / w.pose_rot.x,
        rot_raw.y / w.pose_rot.y,
        rot_raw.z / w.pose_rot.z,
        pos_raw.x / w.pose_pos.x,
        pos_raw.y / w.pose_pos.y,
        pos_raw.z / w.pose_pos.z,
    );
    (rot_raw, r)
}

/// Pose-prior residual `[Log(R̄⁻¹R(t)) / σ_R ; (p(t) − p̄) / σ_p]`.
pub fn residual_pose(traj: &SplineTrajectory, prior: &PosePrior, w: &FactorWeights) -> Result<Vector6<f64>> {
    let e = traj.evaluate(prior.t)?;
    Ok(pose_residual_from(&e, prior, w).1)
}

pub fn linearize_pose(traj: &SplineTrajectory, prior: &PosePrior, w: &FactorWeights) -> Result<Linearized> {
    let e = traj.evaluate(prior.t)?;
    let (rot_raw, r) = pose_residual_from(&e, prior, w);
    let mut lin = Linearized::new(6, &e, false);
    lin.residual.copy_from_slice(r.as_slice());
    let rot_white = Matrix3::from_diagonal(&w.pose_rot.map(|s| 1.0 / s)) * right_jacobian_inv(&rot_raw);
    for (m, jm) in e.rotation_jacobians().iter().enumerate() {
        lin.set_knot_block(0, m, 0, &(rot_white * jm), 3);
        let pos_block = Matrix3::from_diagonal(&w.pose_pos.map(|s| e.pos_weight[m] / s));
        lin.set_knot_block(3, m, 3, &pos_block, 3);
    }
    Ok(lin)
}

fn lidar_residual_from(e: &SplineEval, pt: &LidarPoint, plane: &VoxelPlane, w: &FactorWeights) -> f64 {
    let world = e.rotation.act(&pt.f) + e.position;
    (plane.normal.dot(&world) - plane.offset) / w.lidar
}

/// Point-to-plane residual with rotation and position both taken at the
/// point's timestamp.
pub fn residual_lidar(traj: &SplineTrajectory, pt: &LidarPoint, plane: &VoxelPlane, w: &FactorWeights) -> Result<f64> {
    let e = traj.evaluate(pt.t)?;
    Ok(lidar_residual_from(&e, pt, plane, w))
}

pub fn linearize_lidar(
    traj: &SplineTrajectory,
    pt: &LidarPoint,
    plane: &VoxelPlane,
    w: &FactorWeights,
) -> Result<Linearized> {
    let e = traj.evaluate(pt.t)?;
    let mut lin = Linearized::new(1, &e, false);
    lin.residual[0] = lidar_residual_from(&e, pt, plane, w);
    // ∂(R f)/∂ε = −R [f]×
    let d_eps = -(plane.normal.transpose() * e.rotation.matrix() * skew(&pt.f)) / w.lidar;
    let cols = lin.knot_cols();
    for (m, jm) in e.rotation_jacobians().iter().enumerate() {
        let row = d_eps * jm;
        for c in 0..3 {
            lin.knot_jacobian[KNOT_DIM * m + c] = row[c];
            lin.knot_jacobian[KNOT_DIM * m + 3 + c] = plane.normal[c] * e.pos_weight[m] / w.lidar;
        }
    }
    debug_assert_eq!(lin.knot_jacobian.len(), cols);
    Ok(lin)
}

fn gyro_residual_from(e: &SplineEval, bias: &ImuBias, s: &ImuSample, w: &FactorWeights) -> Vector3<f64> {
    (e.omega_body + bias.gyro - s.gyro) / w.gyro
}

/// `(R⁻¹ ω_W + b_gyro − ω̆) / σ_gyro`.
pub fn residual_gyro(traj: &SplineTrajectory, bias: &ImuBias, s: &ImuSample, w: &FactorWeights) -> Result<Vector3<f64>> {
    let e = traj.evaluate(s.t)?;
    Ok(gyro_residual_from(&e, bias, s, w))
}

pub fn linearize_gyro(traj: &SplineTrajectory, bias: &ImuBias, s: &ImuSample, w: &FactorWeights) -> Result<Linearized> {
    let e = traj.evaluate(s.t)?;
    let mut lin = Linearized::new(3, &e, true);
    lin.residual.copy_from_slice(gyro_residual_from(&e, bias, s, w).as_slice());
    for (m, jm) in e.omega_body_jacobians().iter().enumerate() {
        lin.set_knot_block(0, m, 0, &(jm / w.gyro), 3);
    }
    for r in 0..3 {
        lin.bias_jacobian[r * BIAS_DIM + r] = 1.0 / w.gyro;
    }
    Ok(lin)
}

fn specific_force(e: &SplineEval, c: &WorldConstants) -> Vector3<f64> {
    e.rotation.inverse_act(&(e.acceleration + c.gravity))
}

fn acce_residual_from(e: &SplineEval, bias: &ImuBias, s: &ImuSample, w: &FactorWeights, c: &WorldConstants) -> Vector3<f64> {
    (specific_force(e, c) + bias.accel - s.accel) / w.accel
}

/// `(R⁻¹ (a_W + g) + b_acce − ă) / σ_acce`.
pub fn residual_acce(
    traj: &SplineTrajectory,
    bias: &ImuBias,
    s: &ImuSample,
    w: &FactorWeights,
    c: &WorldConstants,
) -> Result<Vector3<f64>> {
    let e = traj.evaluate(s.t)?;
    Ok(acce_residual_from(&e, bias, s, w, c))
}

pub fn linearize_acce(
    traj: &SplineTrajectory,
    bias: &ImuBias,
    s: &ImuSample,
    w: &FactorWeights,
    c: &WorldConstants,
) -> Result<Linearized> {
    let e = traj.evaluate(s.t)?;
    let mut lin = Linearized::new(3, &e, true);
    lin.residual.copy_from_slice(acce_residual_from(&e, bias, s, w, c).as_slice());
    // ∂(Rᵀ v)/∂ε = [Rᵀ v]×
    let d_eps = skew(&specific_force(&e, c)) / w.accel;
    let rt = e.rotation.matrix().transpose();
    for (m, jm) in e.rotation_jacobians().iter().enumerate() {
        lin.set_knot_block(0, m, 0, &(d_eps * jm), 3);
        lin.set_knot_block(0, m, 3, &(rt * (e.acc_weight[m] / w.accel)), 3);
    }
    for r in 0..3 {
        lin.bias_jacobian[r * BIAS_DIM + 3 + r] = 1.0 / w.accel;
    }
    Ok(lin)
}

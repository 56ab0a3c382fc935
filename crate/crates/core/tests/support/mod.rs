//! Shared oracles for the integration tests: random splines, central
//! finite differences of the factor residuals, Horn's closed-form
//! alignment and an SVD plane fit.
#![allow(dead_code)]

use ctreg::estimation::{
    linearize_acce, linearize_gyro, linearize_lidar, linearize_pose, residual_acce, residual_gyro, residual_lidar,
    residual_pose, FactorWeights, ImuBias, ImuSample, LidarPoint, Linearized, PosePrior, WorldConstants,
};
use ctreg::priormap::VoxelPlane;
use ctreg::{Pose, Rotation, SplineTrajectory};
use nalgebra::{DMatrix, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rv(rng: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

pub fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = rv(rng, 1.0);
        if v.norm() > 0.1 && v.norm() <= 1.0 {
            return v.normalize();
        }
    }
}

pub fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
    Rotation::exp(&(unit(rng) * rng.random_range(0.0..3.0))).unwrap()
}

/// Random-walk knots: rotation steps up to 0.3 rad, position steps up to 0.5 m.
pub fn random_spline(rng: &mut ChaCha8Rng, n: usize, order: usize) -> SplineTrajectory {
    let mut r = random_rotation(rng);
    let mut p = rv(rng, 5.0);
    let mut rots = Vec::new();
    let mut pos = Vec::new();
    for _ in 0..n {
        rots.push(r);
        pos.push(p);
        r = r.retract(&rv(rng, 0.3));
        p += rv(rng, 0.5);
    }
    let t0 = rng.random_range(-5.0..5.0);
    SplineTrajectory::new(t0, rng.random_range(0.05..0.2), order, rots, pos).unwrap()
}

pub fn random_time(rng: &mut ChaCha8Rng, traj: &SplineTrajectory) -> f64 {
    let (a, b) = traj.domain();
    rng.random_range(a..b)
}

pub fn random_weights(rng: &mut ChaCha8Rng) -> FactorWeights {
    FactorWeights {
        pose_rot: Vector3::new(rng.random_range(0.005..0.1), rng.random_range(0.005..0.1), rng.random_range(0.005..0.1)),
        pose_pos: Vector3::new(rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)),
        lidar: rng.random_range(0.01..0.2),
        gyro: rng.random_range(0.005..0.05),
        accel: rng.random_range(0.05..0.5),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Factor {
    Pose,
    Lidar,
    Gyro,
    Accel,
}

pub const ALL_FACTORS: [Factor; 4] = [Factor::Pose, Factor::Lidar, Factor::Gyro, Factor::Accel];

struct Config {
    w: FactorWeights,
    c: WorldConstants,
    bias: ImuBias,
    prior: PosePrior,
    point: LidarPoint,
    plane: VoxelPlane,
    imu: ImuSample,
}

fn residual(f: Factor, traj: &SplineTrajectory, bias: &ImuBias, cfg: &Config) -> Vec<f64> {
    match f {
        Factor::Pose => residual_pose(traj, &cfg.prior, &cfg.w).unwrap().as_slice().to_vec(),
        Factor::Lidar => vec![residual_lidar(traj, &cfg.point, &cfg.plane, &cfg.w).unwrap()],
        Factor::Gyro => residual_gyro(traj, bias, &cfg.imu, &cfg.w).unwrap().as_slice().to_vec(),
        Factor::Accel => residual_acce(traj, bias, &cfg.imu, &cfg.w, &cfg.c).unwrap().as_slice().to_vec(),
    }
}

fn linearize(f: Factor, traj: &SplineTrajectory, cfg: &Config) -> Linearized {
    match f {
        Factor::Pose => linearize_pose(traj, &cfg.prior, &cfg.w).unwrap(),
        Factor::Lidar => linearize_lidar(traj, &cfg.point, &cfg.plane, &cfg.w).unwrap(),
        Factor::Gyro => linearize_gyro(traj, &cfg.bias, &cfg.imu, &cfg.w).unwrap(),
        Factor::Accel => linearize_acce(traj, &cfg.bias, &cfg.imu, &cfg.w, &cfg.c).unwrap(),
    }
}

fn perturb_knot(traj: &SplineTrajectory, knot: usize, col: usize, h: f64) -> SplineTrajectory {
    let mut t = traj.clone();
    let mut d = Vector3::zeros();
    d[col % 3] = h;
    if col < 3 {
        let r = t.rot_knots()[knot].retract(&d);
        t.rot_knots_mut()[knot] = r;
    } else {
        t.pos_knots_mut()[knot] += d;
    }
    t
}

fn perturb_bias(bias: &ImuBias, col: usize, h: f64) -> ImuBias {
    let mut b = *bias;
    if col < 3 {
        b.gyro[col] += h;
    } else {
        b.accel[col - 3] += h;
    }
    b
}

/// Frobenius-relative error between the analytic Jacobian of one random
/// configuration of `f` and central finite differences.
pub fn jacobian_relative_error(f: Factor, rng: &mut ChaCha8Rng) -> f64 {
    let order = rng.random_range(3..=5);
    let traj = random_spline(rng, order + 3, order);
    let t = random_time(rng, &traj);
    let pose = traj.pose_at(t).unwrap();
    let normal = unit(rng);
    let cfg = Config {
        w: random_weights(rng),
        c: WorldConstants { gravity: Vector3::new(0.0, 0.0, 9.81) },
        bias: ImuBias { gyro: rv(rng, 0.05), accel: rv(rng, 0.3) },
        prior: PosePrior {
            t,
            pose: Pose::new(pose.rotation.retract(&rv(rng, 0.5)), pose.position + rv(rng, 1.0)),
        },
        point: LidarPoint { t, f: rv(rng, 10.0) },
        plane: VoxelPlane { normal, offset: rng.random_range(-5.0..5.0), planarity: 1.0, point_count: 6 },
        imu: ImuSample { t, gyro: rv(rng, 1.0), accel: rv(rng, 10.0) },
    };
    let lin = linearize(f, &traj, &cfg);
    let rows = lin.residual.len();
    let base = residual(f, &traj, &cfg.bias, &cfg);
    for (a, b) in base.iter().zip(&lin.residual) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "linearized residual differs from residual");
    }
    let mut diff_sq = 0.0;
    let mut norm_sq = 0.0;
    for m in 0..lin.order {
        for col in 0..6 {
            let knot = lin.first_knot + m;
            let plus = residual(f, &perturb_knot(&traj, knot, col, FD_STEP), &cfg.bias, &cfg);
            let minus = residual(f, &perturb_knot(&traj, knot, col, -FD_STEP), &cfg.bias, &cfg);
            for row in 0..rows {
                let fd = (plus[row] - minus[row]) / (2.0 * FD_STEP);
                let an = lin.knot_entry(row, m, col);
                diff_sq += (fd - an).powi(2);
                norm_sq += fd * fd;
            }
        }
    }
    if !lin.bias_jacobian.is_empty() {
        for col in 0..6 {
            let plus = residual(f, &traj, &perturb_bias(&cfg.bias, col, FD_STEP), &cfg);
            let minus = residual(f, &traj, &perturb_bias(&cfg.bias, col, -FD_STEP), &cfg);
            for row in 0..rows {
                let fd = (plus[row] - minus[row]) / (2.0 * FD_STEP);
                diff_sq += (fd - lin.bias_entry(row, col)).powi(2);
                norm_sq += fd * fd;
            }
        }
    }
    diff_sq.sqrt() / norm_sq.sqrt().max(1e-12)
}

/// Worst relative Jacobian error of `f` over `configs` random configurations.
pub fn max_jacobian_error(f: Factor, configs: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    (0..configs).map(|_| jacobian_relative_error(f, &mut rng)).fold(0.0, f64::max)
}

/// Horn's quaternion solution for the rotation taking centered `a` onto centered `b`.
pub fn horn_align(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Pose {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vector3<f64>>() / n;
    let cb = b.iter().sum::<Vector3<f64>>() / n;
    let mut s = nalgebra::Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        s += (x - ca) * (y - cb).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let nm = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = nm.symmetric_eigen();
    let i = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(i);
    let r = Rotation::from_wxyz(q[0], q[1], q[2], q[3]).unwrap();
    Pose::new(r, cb - r.act(&ca))
}

/// Position RMSE after Horn alignment of `est` onto `gt`, summed directly.
pub fn brute_force_ate(est: &[Vector3<f64>], gt: &[Vector3<f64>]) -> f64 {
    let t = horn_align(est, gt);
    let sum: f64 = est.iter().zip(gt).map(|(e, g)| (t.apply(e) - g).norm_squared()).sum();
    (sum / est.len() as f64).sqrt()
}

/// Total-least-squares plane normal: last right singular vector of the centered points.
pub fn svd_normal(points: &[Vector3<f64>]) -> Vector3<f64> {
    let n = points.len();
    let c = points.iter().sum::<Vector3<f64>>() / n as f64;
    let m = DMatrix::from_fn(n, 3, |i, j| points[i][j] - c[j]);
    let svd = m.svd(false, true);
    let v_t = svd.v_t.unwrap();
    let i = svd.singular_values.imin();
    Vector3::new(v_t[(i, 0)], v_t[(i, 1)], v_t[(i, 2)])
}

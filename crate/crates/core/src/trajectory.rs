//! Continuous-time trajectory as a uniform cumulative B-spline.
//!
//! Rotation and position use separate knot sequences on a shared time
//! grid. Rotation is the cumulative product
//!
//! ```text
//! R(t) = R_i · Π_{j=1}^{k-1} exp(λ_j(u) · log(R_{i+j-1}⁻¹ R_{i+j}))
//! ```
//!
//! with cumulative basis `λ_j`, and position is the ordinary uniform
//! B-spline blend of the position knots. Segment `i` covers
//! `[t0 + i·dt, t0 + (i+1)·dt)` and uses knots `i .. i+k`.
//!
//! Angular velocity is reported in the world frame with the convention
//! `Ṙ = [ω_W]× R`; the body-frame rate `ω_B = Rᵀ ω_W` is what a gyroscope
//! measures.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{right_jacobian, right_jacobian_inv, skew, Pose, Rotation};
use crate::io::FileFormatError;
use crate::linalg::ArrowSystem;
use crate::{Error, Result};

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_KNOT_INTERVAL: f64 = 0.1;
pub const MIN_ORDER: usize = 2;
pub const MAX_ORDER: usize = 6;

/// Weight pulling knots toward the interpolated input path in
/// [`SplineTrajectory::fit_from_poses`]; only matters for knots the data
/// does not constrain.
const FIT_REGULARIZATION: f64 = 1e-8;

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Uniform B-spline blending matrix `M` (row-major `k × k`), so that the
/// weight of knot `i+s` at local time `u` is `Σ_n M[s][n] uⁿ`.
pub fn blending_matrix(order: usize) -> Vec<f64> {
    let k = order;
    let fact: f64 = (1..k).map(|v| v as f64).product();
    let mut m = vec![0.0; k * k];
    for s in 0..k {
        for n in 0..k {
            let mut sum = 0.0;
            for l in s..k {
                let sign = if (l - s) % 2 == 0 { 1.0 } else { -1.0 };
                sum += sign * binomial(k, l - s) * ((k - 1 - l) as f64).powi((k - 1 - n) as i32);
            }
            m[s * k + n] = binomial(k - 1, n) * sum / fact;
        }
    }
    m
}

/// Blending weights and their first two `u`-derivatives.
#[derive(Clone, Debug)]
struct Basis {
    value: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl Basis {
    fn evaluate(blend: &[f64], k: usize, u: f64) -> Basis {
        let mut value = vec![0.0; k];
        let mut d1 = vec![0.0; k];
        let mut d2 = vec![0.0; k];
        for s in 0..k {
            let row = &blend[s * k..(s + 1) * k];
            let mut pw = 1.0;
            for (n, &c) in row.iter().enumerate() {
                value[s] += c * pw;
                if n + 1 < k {
                    d1[s] += (n + 1) as f64 * row[n + 1] * pw;
                }
                if n + 2 < k {
                    d2[s] += ((n + 2) * (n + 1)) as f64 * row[n + 2] * pw;
                }
                pw *= u;
            }
        }
        Basis { value, d1, d2 }
    }

    /// Cumulative sums `Σ_{s ≥ j}`.
    fn cumulative(v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for j in (0..v.len().saturating_sub(1)).rev() {
            out[j] += out[j + 1];
        }
        out
    }
}

/// Everything the factors need from one spline evaluation, including the
/// pieces required for analytic Jacobians with respect to the `k` knots of
/// the active segment.
#[derive(Clone, Debug)]
pub struct SplineEval {
    /// Index of the first knot influencing this time.
    pub first_knot: usize,
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    /// Body-frame angular velocity `Rᵀ ω_W`, rad/s.
    pub omega_body: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
    /// Position blending weights (plain, first and second time derivative).
    pub pos_weight: Vec<f64>,
    pub vel_weight: Vec<f64>,
    pub acc_weight: Vec<f64>,
    lambda: Vec<f64>,
    lambda_dot: Vec<f64>,
    /// `d_j = log(R_{j-1}⁻¹ R_j)`, index 0 unused.
    incr: Vec<Vector3<f64>>,
    /// `R_{j-1}⁻¹ R_j` as matrices, index 0 unused.
    incr_mat: Vec<Matrix3<f64>>,
    /// `P_j = A_{j+1} ⋯ A_{k-1}`.
    suffix: Vec<Matrix3<f64>>,
}

impl SplineEval {
    pub fn order(&self) -> usize {
        self.lambda.len()
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }

    /// `∂ε/∂δ_m` where `R(t) ← R(t) exp(ε)` under knot perturbations
    /// `R_m ← R_m exp(δ_m)`, for `m = 0..k`.
    pub fn rotation_jacobians(&self) -> Vec<Matrix3<f64>> {
        let k = self.order();
        let g: Vec<Matrix3<f64>> = (0..k)
            .map(|j| {
                if j == 0 {
                    return Matrix3::zeros();
                }
                let scaled = self.incr[j] * self.lambda[j];
                self.suffix[j].transpose()
                    * self.lambda[j]
                    * right_jacobian(&scaled)
                    * right_jacobian_inv(&self.incr[j])
            })
            .collect();
        (0..k)
            .map(|m| {
                let mut jm = if m == 0 { self.suffix[0].transpose() } else { g[m] };
                if m + 1 < k {
                    jm -= g[m + 1] * self.incr_mat[m + 1].transpose();
                }
                jm
            })
            .collect()
    }

    /// `∂ω_B/∂δ_m` for `m = 0..k`.
    pub fn omega_body_jacobians(&self) -> Vec<Matrix3<f64>> {
        let k = self.order();
        // W_j = ∂ω_B/∂d_j
        let mut w = vec![Matrix3::zeros(); k];
        let mut partial = Vector3::zeros();
        for j in 1..k {
            let pt = self.suffix[j].transpose();
            let scaled = self.incr[j] * self.lambda[j];
            w[j] = pt * self.lambda_dot[j]
                + skew(&partial) * pt * self.lambda[j] * right_jacobian(&scaled);
            // ω_B = Σ P_jᵀ λ̇_j d_j; the running sum enters later W terms.
            partial += pt * (self.incr[j] * self.lambda_dot[j]);
        }
        let chained: Vec<Matrix3<f64>> = (0..k)
            .map(|j| if j == 0 { Matrix3::zeros() } else { w[j] * right_jacobian_inv(&self.incr[j]) })
            .collect();
        (0..k)
            .map(|m| {
                let mut jm = chained[m];
                if m + 1 < k {
                    jm -= chained[m + 1] * self.incr_mat[m + 1].transpose();
                }
                jm
            })
            .collect()
    }
}

/// Uniform cumulative B-spline over rotations and positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineTrajectory {
    t0: f64,
    dt: f64,
    order: usize,
    rot_knots: Vec<Rotation>,
    pos_knots: Vec<Vector3<f64>>,
    blend: Vec<f64>,
}

impl SplineTrajectory {
    pub fn new(
        t0: f64,
        dt: f64,
        order: usize,
        rot_knots: Vec<Rotation>,
        pos_knots: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        if !t0.is_finite() || !dt.is_finite() || dt <= 0.0 {
            return Err(Error::InvalidInput(format!("invalid spline timing t0={t0} dt={dt}")));
        }
        if !(MIN_ORDER..=MAX_ORDER).contains(&order) {
            return Err(Error::InvalidInput(format!(
                "spline order {order} outside [{MIN_ORDER}, {MAX_ORDER}]"
            )));
        }
        if rot_knots.len() != pos_knots.len() {
            return Err(Error::InvalidInput(format!(
                "{} rotation knots but {} position knots",
                rot_knots.len(),
                pos_knots.len()
            )));
        }
        if rot_knots.len() < order {
            return Err(Error::InvalidInput(format!(
                "{} knots is fewer than the spline order {order}",
                rot_knots.len()
            )));
        }
        if pos_knots.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("position knot"));
        }
        Ok(SplineTrajectory {
            t0,
            dt,
            order,
            rot_knots,
            pos_knots,
            blend: blending_matrix(order),
        })
    }

    /// Spline holding `pose` everywhere on `[t0, t0 + duration)`.
    pub fn constant(t0: f64, dt: f64, order: usize, n_knots: usize, pose: Pose) -> Result<Self> {
        Self::new(t0, dt, order, vec![pose.rotation; n_knots], vec![pose.position; n_knots])
    }

    /// Number of knots needed so the domain starting at `t0` covers
    /// `t0 + duration` (strictly inside the half-open domain).
    pub fn knots_for_duration(duration: f64, dt: f64, order: usize) -> usize {
        (duration / dt).floor().max(0.0) as usize + order
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_knots(&self) -> usize {
        self.rot_knots.len()
    }

    pub fn rot_knots(&self) -> &[Rotation] {
        &self.rot_knots
    }

    pub fn pos_knots(&self) -> &[Vector3<f64>] {
        &self.pos_knots
    }

    pub fn rot_knots_mut(&mut self) -> &mut [Rotation] {
        &mut self.rot_knots
    }

    pub fn pos_knots_mut(&mut self) -> &mut [Vector3<f64>] {
        &mut self.pos_knots
    }

    /// Time around which knot `j` has the most influence.
    pub fn knot_time(&self, j: usize) -> f64 {
        self.t0 + (j as f64 - (self.order as f64 - 2.0) / 2.0) * self.dt
    }

    /// Half-open evaluation interval `[start, end)`.
    pub fn domain(&self) -> (f64, f64) {
        let segments = (self.num_knots() - self.order + 1) as f64;
        (self.t0, self.t0 + segments * self.dt)
    }

    pub fn contains(&self, t: f64) -> bool {
        let (a, b) = self.domain();
        t >= a && t < b
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let (start, end) = self.domain();
        if !(t >= start && t < end) {
            return Err(Error::OutOfDomain { t, start, end });
        }
        let s = (t - self.t0) / self.dt;
        let last = self.num_knots() - self.order;
        let i = (s.floor() as usize).min(last);
        Ok((i, (s - i as f64).clamp(0.0, 1.0)))
    }

    /// Full evaluation at `t`.
    pub fn evaluate(&self, t: f64) -> Result<SplineEval> {
        let (i, u) = self.locate(t)?;
        let k = self.order;
        let basis = Basis::evaluate(&self.blend, k, u);
        let lambda = Basis::cumulative(&basis.value);
        let inv_dt = 1.0 / self.dt;
        let lambda_dot: Vec<f64> = Basis::cumulative(&basis.d1).iter().map(|v| v * inv_dt).collect();

        let knots = &self.rot_knots[i..i + k];
        let mut incr = vec![Vector3::zeros(); k];
        let mut incr_mat = vec![Matrix3::identity(); k];
        let mut factors = vec![Rotation::identity(); k];
        for j in 1..k {
            let rel = knots[j - 1].inverse().compose(&knots[j]);
            incr[j] = rel.log();
            incr_mat[j] = rel.matrix();
            factors[j] = Rotation::exp_unchecked(&(incr[j] * lambda[j]));
        }
        let mut suffix = vec![Matrix3::identity(); k];
        for j in (0..k - 1).rev() {
            suffix[j] = factors[j + 1].matrix() * suffix[j + 1];
        }
        let mut rotation = knots[0];
        for f in &factors[1..] {
            rotation = rotation.compose(f);
        }
        let mut omega_body = Vector3::zeros();
        for j in 1..k {
            omega_body += suffix[j].transpose() * (incr[j] * lambda_dot[j]);
        }

        let pos = &self.pos_knots[i..i + k];
        let vel_weight: Vec<f64> = basis.d1.iter().map(|v| v * inv_dt).collect();
        let acc_weight: Vec<f64> = basis.d2.iter().map(|v| v * inv_dt * inv_dt).collect();
        // Cumulative form over knot differences; constant knots give exact zeros.
        let diffs: Vec<Vector3<f64>> = (1..k).map(|j| pos[j] - pos[j - 1]).collect();
        let blend = |w: &[f64]| diffs.iter().zip(&w[1..]).fold(Vector3::zeros(), |acc, (d, c)| acc + d * *c);
        let position = pos[0] + blend(&lambda);
        let velocity = blend(&lambda_dot);
        let lambda_ddot: Vec<f64> = Basis::cumulative(&basis.d2).iter().map(|v| v * inv_dt * inv_dt).collect();
        let acceleration = blend(&lambda_ddot);

        Ok(SplineEval {
            first_knot: i,
            rotation,
            position,
            omega_body,
            velocity,
            acceleration,
            pos_weight: basis.value,
            vel_weight,
            acc_weight,
            lambda,
            lambda_dot,
            incr,
            incr_mat,
            suffix,
        })
    }

    pub fn pose_at(&self, t: f64) -> Result<Pose> {
        self.evaluate(t).map(|e| e.pose())
    }

    /// `ω_W(t)`, rad/s, with `Ṙ = [ω_W]× R`.
    pub fn angular_velocity_world(&self, t: f64) -> Result<Vector3<f64>> {
        self.evaluate(t).map(|e| e.rotation.act(&e.omega_body))
    }

    pub fn angular_velocity_body(&self, t: f64) -> Result<Vector3<f64>> {
        self.evaluate(t).map(|e| e.omega_body)
    }

    pub fn velocity_world(&self, t: f64) -> Result<Vector3<f64>> {
        self.evaluate(t).map(|e| e.velocity)
    }

    /// Second time derivative of position, m/s².
    pub fn acceleration_world(&self, t: f64) -> Result<Vector3<f64>> {
        self.evaluate(t).map(|e| e.acceleration)
    }

    /// Poses at arbitrary times, order preserved.
    pub fn sample(&self, times: &[f64]) -> Result<Vec<(f64, Pose)>> {
        times
            .iter()
            .map(|&t| self.pose_at(t).map(|p| (t, p)))
            .collect()
    }

    /// Least-squares knot fit to timestamped poses.
    ///
    /// The domain starts at the first timestamp and extends past the last.
    /// See [`SplineTrajectory::fit_from_poses_over`].
    pub fn fit_from_poses(poses: &[(f64, Pose)], dt: f64, order: usize) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::InvalidInput("fit needs at least two poses".into()));
        }
        let t0 = poses[0].0;
        let n = Self::knots_for_duration(poses[poses.len() - 1].0 - t0, dt, order);
        Self::fit_from_poses_over(poses, t0, dt, order, n)
    }

    /// Least-squares fit of an `n_knots` spline starting at `t0`.
    ///
    /// Poses outside the spline domain only shape the initial path. Each
    /// knot is weakly pulled toward the input path at its knot time: linear
    /// in position and geodesic in rotation between poses, extrapolated up to
    /// `order · dt` past the ends and held constant beyond. Knots between
    /// sparse poses therefore follow the straight path between them.
    pub fn fit_from_poses_over(poses: &[(f64, Pose)], t0: f64, dt: f64, order: usize, n_knots: usize) -> Result<Self> {
        let first = poses
            .first()
            .ok_or_else(|| Error::InvalidInput("fit needs at least one pose".into()))?;
        if let Some(w) = poses.windows(2).find(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::InvalidInput(format!(
                "pose timestamps not strictly increasing at t = {}",
                w[1].0
            )));
        }
        let mut spline = Self::constant(t0, dt, order, n_knots, first.1)?;
        if poses.len() == 1 {
            return Ok(spline);
        }
        let reach = order as f64 * dt;
        let (lo, hi) = (first.0 - reach, poses[poses.len() - 1].0 + reach);
        let anchors: Vec<Pose> = (0..n_knots)
            .map(|j| interpolate_pose(poses, spline.knot_time(j).clamp(lo, hi)))
            .collect();
        for (j, a) in anchors.iter().enumerate() {
            spline.rot_knots[j] = a.rotation;
            spline.pos_knots[j] = a.position;
        }
        let inside: Vec<(f64, Pose)> = poses.iter().copied().filter(|(t, _)| spline.contains(*t)).collect();
        spline.fit_positions(&inside, &anchors)?;
        spline.fit_rotations(&inside, &anchors)?;
        Ok(spline)
    }

    fn fit_positions(&mut self, poses: &[(f64, Pose)], anchors: &[Pose]) -> Result<()> {
        let (n, k) = (self.num_knots(), self.order);
        let mut sys = ArrowSystem::new(3 * n, 3 * k - 1, 0);
        // Solve for corrections to the interpolated initialization.
        for (t, pose) in poses {
            let e = self.evaluate(*t)?;
            let r = e.position - pose.position;
            for axis in 0..3 {
                let cols: Vec<usize> = (0..k).map(|s| 3 * (e.first_knot + s) + axis).collect();
                sys.accumulate(&cols, &e.pos_weight, &[r[axis]], 1.0);
            }
        }
        for (j, a) in anchors.iter().enumerate() {
            let r = self.pos_knots[j] - a.position;
            for axis in 0..3 {
                sys.add_diagonal(3 * j + axis, FIT_REGULARIZATION);
                sys.add_gradient(3 * j + axis, FIT_REGULARIZATION * r[axis]);
            }
        }
        let rhs: Vec<f64> = sys.gradient().iter().map(|g| -g).collect();
        let x = sys.solve_banded(&rhs)?;
        for (j, p) in self.pos_knots.iter_mut().enumerate() {
            *p += Vector3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2]);
        }
        Ok(())
    }

    fn rotation_fit_cost(&self, poses: &[(f64, Pose)], anchors: &[Pose]) -> Result<f64> {
        let mut cost = 0.0;
        for (t, pose) in poses {
            let r = self.evaluate(*t)?.rotation;
            cost += pose.rotation.inverse().compose(&r).log().norm_squared();
        }
        for (j, a) in anchors.iter().enumerate() {
            cost += FIT_REGULARIZATION
                * a.rotation.inverse().compose(&self.rot_knots[j]).log().norm_squared();
        }
        Ok(cost)
    }

    fn fit_rotations(&mut self, poses: &[(f64, Pose)], anchors: &[Pose]) -> Result<()> {
        let (n, k) = (self.num_knots(), self.order);
        let mut cost = self.rotation_fit_cost(poses, anchors)?;
        for _ in 0..50 {
            let mut sys = ArrowSystem::new(3 * n, 3 * k - 1, 0);
            for (t, pose) in poses {
                let e = self.evaluate(*t)?;
                let r = pose.rotation.inverse().compose(&e.rotation).log();
                let jr_inv = right_jacobian_inv(&r);
                let jacs = e.rotation_jacobians();
                let cols: Vec<usize> = (0..3 * k).map(|c| 3 * e.first_knot + c).collect();
                let mut jac = vec![0.0; 3 * 3 * k];
                for (m, jm) in jacs.iter().enumerate() {
                    let block = jr_inv * jm;
                    for row in 0..3 {
                        for col in 0..3 {
                            jac[row * 3 * k + 3 * m + col] = block[(row, col)];
                        }
                    }
                }
                sys.accumulate(&cols, &jac, r.as_slice(), 1.0);
            }
            for (j, a) in anchors.iter().enumerate() {
                let r = a.rotation.inverse().compose(&self.rot_knots[j]).log();
                let jr_inv = right_jacobian_inv(&r);
                let cols = [3 * j, 3 * j + 1, 3 * j + 2];
                let jac: Vec<f64> = (0..3).flat_map(|row| (0..3).map(move |col| jr_inv[(row, col)])).collect();
                sys.accumulate(&cols, &jac, r.as_slice(), FIT_REGULARIZATION);
            }
            let rhs: Vec<f64> = sys.gradient().iter().map(|g| -g).collect();
            let step = sys.solve_banded(&rhs)?;
            let max_step = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));

            let base = self.rot_knots.clone();
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                for (j, knot) in self.rot_knots.iter_mut().enumerate() {
                    let d = Vector3::new(step[3 * j], step[3 * j + 1], step[3 * j + 2]) * scale;
                    *knot = base[j].retract(&d);
                }
                let new_cost = self.rotation_fit_cost(poses, anchors)?;
                if new_cost <= cost {
                    cost = new_cost;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                self.rot_knots = base;
                break;
            }
            if max_step * scale < 1e-12 {
                break;
            }
        }
        Ok(())
    }

    /// Text serialization (`ctspline v1`).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("ctspline v1\n");
        let _ = writeln!(s, "{:.16e} {:.16e} {} {}", self.t0, self.dt, self.order, self.num_knots());
        for (r, p) in self.rot_knots.iter().zip(&self.pos_knots) {
            let [w, x, y, z] = r.wxyz();
            let _ = writeln!(
                s,
                "{:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
                w, x, y, z, p.x, p.y, p.z
            );
        }
        s
    }

    /// Parses the `ctspline v1` format; `path` is used for error messages.
    pub fn from_text(text: &str, path: &str) -> std::result::Result<Self, FileFormatError> {
        let err = |line: usize, reason: String| FileFormatError::new(path, line, reason);
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

        match lines.next() {
            Some((_, "ctspline v1")) => {}
            Some((no, other)) => return Err(err(no, format!("expected `ctspline v1`, found `{other}`"))),
            None => return Err(err(1, "empty spline file".into())),
        }
        let (hdr_no, header) = lines.next().ok_or_else(|| err(2, "missing header line".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(hdr_no, "header must be `t0 dt order n_knots`".into()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(hdr_no, format!("`{s}`: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(hdr_no, format!("`{s}`: {e}")));
        let (t0, dt, order, n) = (num(fields[0])?, num(fields[1])?, int(fields[2])?, int(fields[3])?);

        let mut rot = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        let mut last_line = hdr_no;
        for (no, line) in lines {
            last_line = no;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|e| err(no, format!("`{s}`: {e}"))))
                .collect::<std::result::Result<_, _>>()?;
            if vals.len() != 7 {
                return Err(err(no, format!("expected 7 values, found {}", vals.len())));
            }
            if !vals.iter().all(|v| v.is_finite()) {
                return Err(err(no, "non-finite value".into()));
            }
            let r = Rotation::from_wxyz(vals[0], vals[1], vals[2], vals[3])
                .map_err(|e| err(no, e.to_string()))?;
            rot.push(r);
            pos.push(Vector3::new(vals[4], vals[5], vals[6]));
        }
        if rot.len() != n {
            return Err(err(last_line, format!("header declares {n} knots, found {}", rot.len())));
        }
        Self::new(t0, dt, order, rot, pos).map_err(|e| err(hdr_no, e.to_string()))
    }
}

/// Pose at `t` interpolated between the bracketing samples, extrapolated
/// along the first or last segment outside their span.
fn interpolate_pose(poses: &[(f64, Pose)], t: f64) -> Pose {
    let idx = poses.partition_point(|(s, _)| *s <= t).clamp(1, poses.len() - 1);
    let ((ta, a), (tb, b)) = (poses[idx - 1], poses[idx]);
    let s = (t - ta) / (tb - ta);
    let delta = a.rotation.inverse().compose(&b.rotation).log() * s;
    Pose::new(a.rotation.retract(&delta), a.position + (b.position - a.position) * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rv(rng: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    pub(crate) fn random_spline(rng: &mut ChaCha8Rng, n: usize, order: usize) -> SplineTrajectory {
        let mut r = Rotation::exp_unchecked(&rv(rng, 2.0));
        let mut p = rv(rng, 5.0);
        let mut rots = Vec::new();
        let mut poss = Vec::new();
        for _ in 0..n {
            rots.push(r);
            poss.push(p);
            r = r.retract(&rv(rng, 0.3));
            p += rv(rng, 0.5);
        }
        SplineTrajectory::new(rng.random_range(-5.0..5.0), 0.1, order, rots, poss).unwrap()
    }

    #[test]
    fn cubic_blending_matrix() {
        let m = blending_matrix(4);
        let expected = [
            1.0, -3.0, 3.0, -1.0, //
            4.0, 0.0, -6.0, 3.0, //
            1.0, 3.0, 3.0, -3.0, //
            0.0, 0.0, 0.0, 1.0,
        ];
        for (a, b) in m.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(*a, b / 6.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn partition_of_unity_all_orders() {
        for k in MIN_ORDER..=MAX_ORDER {
            let m = blending_matrix(k);
            for u in [0.0, 0.3, 0.77, 1.0] {
                let b = Basis::evaluate(&m, k, u);
                assert_abs_diff_eq!(b.value.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(b.d1.iter().sum::<f64>(), 0.0, epsilon = 1e-12);
                assert!(b.value.iter().all(|v| *v >= -1e-15));
            }
        }
    }

    #[test]
    fn domain_errors() {
        let s = SplineTrajectory::constant(1.0, 0.1, 4, 10, Pose::identity()).unwrap();
        let (a, b) = s.domain();
        assert_eq!(a, 1.0);
        assert_abs_diff_eq!(b, 1.7, epsilon = 1e-12);
        assert!(s.pose_at(0.99).is_err());
        match s.pose_at(b) {
            Err(Error::OutOfDomain { start, end, .. }) => {
                assert_eq!((start, end), (a, b));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(s.pose_at(b - 1e-9).is_ok());
        assert!(s.sample(&[1.1, 5.0]).is_err());
    }

    #[test]
    fn invalid_construction() {
        let p = Pose::identity();
        assert!(SplineTrajectory::constant(0.0, 0.0, 4, 10, p).is_err());
        assert!(SplineTrajectory::constant(0.0, 0.1, 4, 3, p).is_err());
        assert!(SplineTrajectory::constant(0.0, 0.1, 9, 30, p).is_err());
        assert!(SplineTrajectory::new(0.0, 0.1, 4, vec![Rotation::identity(); 5], vec![Vector3::zeros(); 6]).is_err());
    }

    #[test]
    fn constant_spline() {
        let pose = Pose::new(
            Rotation::exp(&Vector3::new(0.4, -1.0, 2.0)).unwrap(),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let s = SplineTrajectory::constant(0.0, 0.1, 4, 12, pose).unwrap();
        for i in 0..90 {
            let t = i as f64 * 0.01;
            let e = s.evaluate(t).unwrap();
            assert!(e.rotation.angle_to(&pose.rotation) < 1e-12);
            assert_abs_diff_eq!(e.position, pose.position, epsilon = 1e-12);
            assert_abs_diff_eq!(s.angular_velocity_world(t).unwrap(), Vector3::zeros(), epsilon = 1e-15);
            assert_abs_diff_eq!(e.acceleration, Vector3::zeros(), epsilon = 1e-12);
        }
        assert!(s.sample(&[]).unwrap().is_empty());
    }

    #[test]
    fn linear_and_fixed_axis_precision() {
        let v = Vector3::new(1.5, -0.5, 2.0);
        let w = Vector3::new(0.2, 0.0, 0.0);
        let dt = 0.1;
        let r0 = Rotation::exp(&Vector3::new(0.1, 0.2, -0.3)).unwrap();
        let n = 20;
        let s0 = SplineTrajectory::new(
            0.0,
            dt,
            4,
            (0..n).map(|j| r0.retract(&(w * (j as f64 * dt)))).collect(),
            (0..n).map(|j| v * (j as f64 * dt)).collect(),
        )
        .unwrap();
        // knot j sits at t = (j - 1) dt for the cubic spline.
        for i in 0..170 {
            let t = i as f64 * 0.01;
            let e = s0.evaluate(t).unwrap();
            let tr = t + dt;
            assert_abs_diff_eq!(e.position, v * tr, epsilon = 1e-9);
            assert_abs_diff_eq!(e.acceleration, Vector3::zeros(), epsilon = 1e-9);
            assert_abs_diff_eq!(e.velocity, v, epsilon = 1e-9);
            assert!(e.rotation.angle_to(&r0.retract(&(w * tr))) < 1e-9);
            assert_abs_diff_eq!(e.omega_body, w, epsilon = 1e-8);
        }
    }

    #[test]
    fn continuity_across_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_spline(&mut rng, 12, 4);
        for i in 1..8 {
            let tb = s.t0() + i as f64 * s.dt();
            let l = s.pose_at(tb - 1e-12).unwrap();
            let r = s.pose_at(tb).unwrap();
            assert!(l.rotation.angle_to(&r.rotation) < 1e-10);
            assert!((l.position - r.position).norm() < 1e-10);
        }
    }

    #[test]
    fn local_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for order in [3, 4, 5] {
            let s = random_spline(&mut rng, 10, order);
            let (a, b) = s.domain();
            for _ in 0..10 {
                let t = rng.random_range(a..b);
                let e = s.evaluate(t).unwrap();
                let jr = e.rotation_jacobians();
                let jw = e.omega_body_jacobians();
                for m in 0..order {
                    for c in 0..3 {
                        let mut d = Vector3::zeros();
                        d[c] = h;
                        let mut sp = s.clone();
                        let mut sm = s.clone();
                        let idx = e.first_knot + m;
                        sp.rot_knots[idx] = s.rot_knots[idx].retract(&d);
                        sm.rot_knots[idx] = s.rot_knots[idx].retract(&-d);
                        let ep = sp.evaluate(t).unwrap();
                        let em = sm.evaluate(t).unwrap();
                        let fd_rot = (e.rotation.inverse().compose(&ep.rotation).log()
                            - e.rotation.inverse().compose(&em.rotation).log())
                            / (2.0 * h);
                        assert_abs_diff_eq!(fd_rot, jr[m].column(c).into_owned(), epsilon = 1e-7);
                        let fd_w = (ep.omega_body - em.omega_body) / (2.0 * h);
                        assert_abs_diff_eq!(fd_w, jw[m].column(c).into_owned(), epsilon = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = random_spline(&mut rng, 8, 4);
        let text = format!("# comment\n{}", s.to_text());
        let back = SplineTrajectory::from_text(&text, "mem").unwrap();
        assert_eq!(back, s);
        let bad = s.to_text().replacen(" 4 8", " 4 9", 1);
        let e = SplineTrajectory::from_text(&bad, "mem").unwrap_err();
        assert!(e.reason.contains("declares 9 knots"));
        assert!(SplineTrajectory::from_text("ctspline v2\n", "mem").is_err());
    }

    #[test]
    fn fit_rejects_bad_input() {
        let p = Pose::identity();
        assert!(SplineTrajectory::fit_from_poses(&[(0.0, p)], 0.1, 4).is_err());
        assert!(SplineTrajectory::fit_from_poses(&[(0.0, p), (0.0, p)], 0.1, 4).is_err());
        assert!(SplineTrajectory::fit_from_poses(&[(1.0, p), (0.5, p)], 0.1, 4).is_err());
    }

    #[test]
    fn fit_two_identical_poses_is_constant() {
        let pose = Pose::new(Rotation::exp(&Vector3::new(0.0, 0.3, 0.0)).unwrap(), Vector3::new(1.0, 0.0, -2.0));
        let s = SplineTrajectory::fit_from_poses(&[(0.0, pose), (1.0, pose)], 0.1, 4).unwrap();
        assert!(s.contains(1.0));
        for i in 0..=100 {
            let p = s.pose_at(i as f64 * 0.01).unwrap();
            assert!(p.rotation.angle_to(&pose.rotation) < 1e-12);
            assert_abs_diff_eq!(p.position, pose.position, epsilon = 1e-12);
        }
    }
}

//! Damped Gauss-Newton (Levenberg-Marquardt) over all spline knots and the
//! constant IMU bias, wrapped in an association loop.
//!
//! Factor linearization runs in parallel; accumulation into the normal
//! equations always happens in factor order, so results do not depend on
//! the number of threads.

use std::collections::HashSet;

use log::{debug, warn};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;

use super::factors::{
    linearize_acce, linearize_gyro, linearize_lidar, linearize_pose, residual_acce, residual_gyro, residual_lidar,
    residual_pose, Linearized, BIAS_DIM, KNOT_DIM,
};
use super::{
    associate_scan, Association, FactorWeights, ImuBias, ImuSample, MeasurementSet, PosePrior, SolverConfig,
    WorldConstants,
};
use crate::linalg::ArrowSystem;
use crate::priormap::VoxelMap;
use crate::trajectory::SplineTrajectory;
use crate::{Error, Result};

/// Knot count below which the normal equations are solved densely.
const DENSE_KNOT_LIMIT: usize = 200;
const MIN_LAMBDA: f64 = 1e-12;
const MAX_LAMBDA: f64 = 1e16;
/// Costs at or below this are treated as an exact fit; relative progress
/// there is rounding noise.
const COST_FLOOR: f64 = 1e-20;

/// Squared-residual sums per factor family (lidar after the Huber loss).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct FactorCosts {
    pub pose: f64,
    pub lidar: f64,
    pub gyro: f64,
    pub accel: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FactorCounts {
    pub pose: usize,
    pub lidar: usize,
    pub gyro: usize,
    pub accel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Relative cost decrease fell below the tolerance.
    CostTolerance,
    /// The cost reached zero.
    ZeroCost,
    /// Associations stopped changing between outer loops.
    AssociationStable,
    MaxOuterLoops,
    MaxIterations,
    /// Repeated steps failed to reduce the cost.
    NoDecrease,
}

impl Termination {
    fn converged(self) -> bool {
        matches!(self, Termination::CostTolerance | Termination::ZeroCost | Termination::AssociationStable)
    }
}

/// One inner Levenberg-Marquardt run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub name: String,
    pub associations: usize,
    pub iterations: usize,
    pub accepted_steps: usize,
    /// Total cost at the start and after every accepted step.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
    pub final_lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub termination: Termination,
    pub outer_loops: usize,
    pub iterations: usize,
    pub cost_before: FactorCosts,
    pub cost_after: FactorCosts,
    pub factors: FactorCounts,
    pub dropped_out_of_domain: usize,
    /// RMS of all whitened residual components at the solution (no robust loss).
    pub final_whitened_rms: f64,
    pub bias: ImuBias,
    pub stages: Vec<StageReport>,
}

#[derive(Clone, Debug)]
struct State {
    traj: SplineTrajectory,
    bias: ImuBias,
}

impl State {
    fn retract(&self, step: &[f64]) -> State {
        let mut traj = self.traj.clone();
        let n = traj.num_knots();
        for (j, knot) in traj.rot_knots_mut().iter_mut().enumerate() {
            let d = Vector3::new(step[KNOT_DIM * j], step[KNOT_DIM * j + 1], step[KNOT_DIM * j + 2]);
            *knot = knot.retract(&d);
        }
        for (j, knot) in traj.pos_knots_mut().iter_mut().enumerate() {
            *knot += Vector3::new(step[KNOT_DIM * j + 3], step[KNOT_DIM * j + 4], step[KNOT_DIM * j + 5]);
        }
        let b = KNOT_DIM * n;
        let bias = ImuBias {
            gyro: self.bias.gyro + Vector3::new(step[b], step[b + 1], step[b + 2]),
            accel: self.bias.accel + Vector3::new(step[b + 3], step[b + 4], step[b + 5]),
        };
        State { traj, bias }
    }
}

/// Sequential sum starting from +0.0.
fn sum(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |a, b| a + b)
}

fn huber(r: f64, delta: f64) -> (f64, f64) {
    let a = r.abs();
    if a <= delta {
        (r * r, 1.0)
    } else {
        (2.0 * delta * a - delta * delta, delta / a)
    }
}

struct Problem<'a> {
    priors: &'a [PosePrior],
    imu: &'a [ImuSample],
    lidar: &'a [Association],
    weights: &'a FactorWeights,
    constants: &'a WorldConstants,
    huber_delta: Option<f64>,
}

impl Problem<'_> {
    fn counts(&self) -> FactorCounts {
        FactorCounts {
            pose: self.priors.len(),
            lidar: self.lidar.len(),
            gyro: self.imu.len(),
            accel: self.imu.len(),
        }
    }

    fn lidar_cost(&self, r: f64) -> (f64, f64) {
        match self.huber_delta {
            Some(d) => huber(r, d),
            None => (r * r, 1.0),
        }
    }

    /// Per-family costs; `robust = false` ignores the Huber loss.
    fn costs(&self, s: &State, robust: bool) -> Result<FactorCosts> {
        let (w, c) = (self.weights, self.constants);
        let pose: Vec<f64> = self
            .priors
            .par_iter()
            .map(|p| residual_pose(&s.traj, p, w).map(|r| r.norm_squared()))
            .collect::<Result<_>>()?;
        let lidar: Vec<f64> = self
            .lidar
            .par_iter()
            .map(|a| {
                residual_lidar(&s.traj, &a.point, &a.plane, w)
                    .map(|r| if robust { self.lidar_cost(r).0 } else { r * r })
            })
            .collect::<Result<_>>()?;
        let imu: Vec<(f64, f64)> = self
            .imu
            .par_iter()
            .map(|m| {
                Ok((
                    residual_gyro(&s.traj, &s.bias, m, w)?.norm_squared(),
                    residual_acce(&s.traj, &s.bias, m, w, c)?.norm_squared(),
                ))
            })
            .collect::<Result<_>>()?;
        let mut out = FactorCosts {
            pose: sum(pose.iter().copied()),
            lidar: sum(lidar.iter().copied()),
            gyro: sum(imu.iter().map(|v| v.0)),
            accel: sum(imu.iter().map(|v| v.1)),
            total: 0.0,
        };
        out.total = out.pose + out.lidar + out.gyro + out.accel;
        Ok(out)
    }

    fn residual_components(&self) -> usize {
        6 * self.priors.len() + self.lidar.len() + 6 * self.imu.len()
    }

    fn linearize(&self, s: &State) -> Result<ArrowSystem> {
        let (w, c) = (self.weights, self.constants);
        let n = s.traj.num_knots();
        let k = s.traj.order();
        let mut sys = ArrowSystem::new(KNOT_DIM * n, KNOT_DIM * k - 1, BIAS_DIM);

        let pose: Vec<Linearized> = self.priors.par_iter().map(|p| linearize_pose(&s.traj, p, w)).collect::<Result<_>>()?;
        let lidar: Vec<(Linearized, f64)> = self
            .lidar
            .par_iter()
            .map(|a| {
                let lin = linearize_lidar(&s.traj, &a.point, &a.plane, w)?;
                let weight = self.lidar_cost(lin.residual[0]).1;
                Ok((lin, weight))
            })
            .collect::<Result<_>>()?;
        let imu: Vec<(Linearized, Linearized)> = self
            .imu
            .par_iter()
            .map(|m| Ok((linearize_gyro(&s.traj, &s.bias, m, w)?, linearize_acce(&s.traj, &s.bias, m, w, c)?)))
            .collect::<Result<_>>()?;

        let mut scratch = Vec::new();
        for lin in &pose {
            accumulate(&mut sys, lin, n, 1.0, &mut scratch);
        }
        for (lin, weight) in &lidar {
            accumulate(&mut sys, lin, n, *weight, &mut scratch);
        }
        for (g, a) in &imu {
            accumulate(&mut sys, g, n, 1.0, &mut scratch);
            accumulate(&mut sys, a, n, 1.0, &mut scratch);
        }
        Ok(sys)
    }
}

fn accumulate(sys: &mut ArrowSystem, lin: &Linearized, n_knots: usize, weight: f64, scratch: &mut Vec<f64>) {
    let knot_cols = KNOT_DIM * lin.order;
    let base = KNOT_DIM * lin.first_knot;
    let mut cols: Vec<usize> = (base..base + knot_cols).collect();
    let rows = lin.residual.len();
    if lin.bias_jacobian.is_empty() {
        sys.accumulate(&cols, &lin.knot_jacobian, &lin.residual, weight);
        return;
    }
    cols.extend(KNOT_DIM * n_knots..KNOT_DIM * n_knots + BIAS_DIM);
    let width = knot_cols + BIAS_DIM;
    scratch.clear();
    scratch.resize(rows * width, 0.0);
    for r in 0..rows {
        scratch[r * width..r * width + knot_cols].copy_from_slice(&lin.knot_jacobian[r * knot_cols..(r + 1) * knot_cols]);
        scratch[r * width + knot_cols..(r + 1) * width].copy_from_slice(&lin.bias_jacobian[r * BIAS_DIM..(r + 1) * BIAS_DIM]);
    }
    sys.accumulate(&cols, scratch, &lin.residual, weight);
}

fn solve_system(sys: &ArrowSystem, rhs: &[f64], n_knots: usize) -> Result<Vec<f64>> {
    if n_knots < DENSE_KNOT_LIMIT {
        sys.solve_dense(rhs)
    } else {
        sys.solve_banded(rhs)
    }
}

fn run_lm(problem: &Problem<'_>, state: &mut State, cfg: &SolverConfig, name: String) -> Result<StageReport> {
    let n = state.traj.num_knots();
    let mut sys = problem.linearize(state)?;
    let mut cost = problem.costs(state, true)?.total;
    let mut lambda = cfg.initial_lambda;
    let mut history = vec![cost];
    let mut rejections = 0;
    let mut accepted = 0;
    let mut iterations = 0;
    let mut termination = Termination::MaxIterations;

    while iterations < cfg.max_inner_iterations {
        if cost <= COST_FLOOR {
            termination = Termination::ZeroCost;
            break;
        }
        iterations += 1;
        let max_diag = (0..sys.dim()).map(|i| sys.diagonal(i)).fold(0.0f64, f64::max);
        let floor = 1e-12 * max_diag.max(1.0);
        let damped = sys.damped(lambda, floor);
        let rhs: Vec<f64> = sys.gradient().iter().map(|g| -g).collect();
        let step = match solve_system(&damped, &rhs, n) {
            Ok(s) => s,
            Err(Error::NotPositiveDefinite) => {
                lambda *= cfg.lambda_factor;
                rejections += 1;
                if rejections >= cfg.max_rejections || lambda > MAX_LAMBDA {
                    termination = Termination::NoDecrease;
                    break;
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let gdot: f64 = sys.gradient().iter().zip(&step).map(|(g, d)| g * d).sum();
        let ddot: f64 = step
            .iter()
            .enumerate()
            .map(|(i, d)| sys.diagonal(i).max(floor) * d * d)
            .sum();
        let predicted = -gdot + lambda * ddot;

        let candidate = state.retract(&step);
        let new_cost = problem.costs(&candidate, true)?.total;
        if new_cost < cost {
            let relative = (cost - new_cost) / cost;
            *state = candidate;
            cost = new_cost;
            history.push(cost);
            accepted += 1;
            rejections = 0;
            lambda = (lambda / cfg.lambda_factor).max(MIN_LAMBDA);
            if relative < cfg.cost_tolerance {
                termination = Termination::CostTolerance;
                break;
            }
            sys = problem.linearize(state)?;
        } else {
            rejections += 1;
            lambda *= cfg.lambda_factor;
            if predicted <= cfg.cost_tolerance * cost {
                termination = Termination::CostTolerance;
                break;
            }
            if rejections >= cfg.max_rejections || lambda > MAX_LAMBDA {
                termination = Termination::NoDecrease;
                break;
            }
        }
    }
    debug!("{name}: {iterations} iterations, cost {} -> {cost}, {termination:?}", history[0]);
    Ok(StageReport {
        name,
        associations: problem.lidar.len(),
        iterations,
        accepted_steps: accepted,
        cost_history: history,
        termination,
        final_lambda: lambda,
    })
}

fn associate_all(traj: &SplineTrajectory, scans: &[Vec<super::LidarPoint>], map: &VoxelMap, w: &FactorWeights, gate: f64) -> Vec<(usize, Association)> {
    let per_scan: Vec<Vec<Association>> = scans.par_iter().map(|scan| associate_scan(traj, scan, map, w, gate)).collect();
    per_scan
        .into_iter()
        .enumerate()
        .flat_map(|(s, v)| v.into_iter().map(move |a| (s, a)))
        .collect()
}

type AssocKey = (usize, usize, [i64; 3]);

fn assoc_keys(a: &[(usize, Association)]) -> HashSet<AssocKey> {
    a.iter().map(|(s, x)| (*s, x.index, x.voxel)).collect()
}

/// Estimates the trajectory and a constant IMU bias from `ms` against `map`,
/// starting from `init`.
///
/// Measurements outside the domain of `init` are dropped with a warning.
/// A failure to converge is reported through [`SolveReport::converged`]; the
/// best iterate is still returned.
pub fn solve_registration(
    ms: &MeasurementSet,
    map: &VoxelMap,
    init: &SplineTrajectory,
    weights: &FactorWeights,
    constants: &WorldConstants,
    cfg: &SolverConfig,
) -> Result<(SplineTrajectory, ImuBias, SolveReport)> {
    weights.validate()?;
    let priors: Vec<PosePrior> = ms.priors.iter().filter(|p| init.contains(p.t)).copied().collect();
    let imu: Vec<ImuSample> = ms.imu.iter().filter(|s| init.contains(s.t)).copied().collect();
    let scans: Vec<Vec<super::LidarPoint>> = ms
        .scans
        .iter()
        .map(|s| s.iter().filter(|p| init.contains(p.t)).copied().collect())
        .collect();
    let lidar_total: usize = scans.iter().map(Vec::len).sum();
    let dropped = (ms.priors.len() - priors.len()) + (ms.imu.len() - imu.len()) + (ms.lidar_count() - lidar_total);
    if dropped > 0 {
        warn!("dropped {dropped} measurement(s) outside the trajectory domain");
    }
    if priors.is_empty() && imu.is_empty() && lidar_total == 0 {
        let (a, b) = init.domain();
        return Err(Error::InvalidInput(format!(
            "no measurement falls inside the trajectory domain [{a}, {b})"
        )));
    }

    let mut state = State {
        traj: init.clone(),
        bias: ImuBias::default(),
    };
    let gate = cfg.association_gate;
    let initial_assoc = associate_all(&state.traj, &scans, map, weights, gate);
    let initial_pairs: Vec<Association> = initial_assoc.iter().map(|(_, a)| *a).collect();
    let cost_before = Problem {
        priors: &priors,
        imu: &imu,
        lidar: &initial_pairs,
        weights,
        constants,
        huber_delta: Some(cfg.huber_delta),
    }
    .costs(&state, true)?;

    let mut stages = Vec::new();
    if cfg.inertial_warm_start && lidar_total > 0 && !(priors.is_empty() && imu.is_empty()) {
        let problem = Problem {
            priors: &priors,
            imu: &imu,
            lidar: &[],
            weights,
            constants,
            huber_delta: None,
        };
        stages.push(run_lm(&problem, &mut state, cfg, "inertial_warm_start".into())?);
    }

    let mut outer = 0;
    let mut previous: Option<HashSet<AssocKey>> = None;
    let mut used: Vec<Association> = Vec::new();
    let termination;
    let mut lm_converged = true;
    loop {
        let assoc = if lidar_total > 0 {
            associate_all(&state.traj, &scans, map, weights, gate)
        } else {
            Vec::new()
        };
        let keys = assoc_keys(&assoc);
        if let Some(prev) = &previous {
            let common = prev.intersection(&keys).count();
            let denom = prev.len().max(keys.len()).max(1);
            let stable = common as f64 / denom as f64;
            debug!("association overlap {stable:.4} ({} pairs)", keys.len());
            if stable >= cfg.association_stability {
                termination = Termination::AssociationStable;
                break;
            }
        }
        if outer >= cfg.max_outer_loops.max(1) {
            termination = Termination::MaxOuterLoops;
            break;
        }
        outer += 1;
        used = assoc.into_iter().map(|(_, a)| a).collect();
        let problem = Problem {
            priors: &priors,
            imu: &imu,
            lidar: &used,
            weights,
            constants,
            huber_delta: Some(cfg.huber_delta),
        };
        let stage = run_lm(&problem, &mut state, cfg, format!("outer_{outer}"))?;
        lm_converged = stage.termination.converged();
        let stage_termination = stage.termination;
        stages.push(stage);
        if lidar_total == 0 {
            termination = stage_termination;
            break;
        }
        previous = Some(keys);
    }

    let problem = Problem {
        priors: &priors,
        imu: &imu,
        lidar: &used,
        weights,
        constants,
        huber_delta: Some(cfg.huber_delta),
    };
    let cost_after = problem.costs(&state, true)?;
    let raw = problem.costs(&state, false)?;
    let components = problem.residual_components().max(1);
    if !state.bias.is_plausible() {
        warn!("estimated IMU bias {:?} exceeds sanity bounds", state.bias);
    }
    let converged = lm_converged && !matches!(termination, Termination::NoDecrease | Termination::MaxIterations);
    let report = SolveReport {
        converged,
        termination,
        outer_loops: outer,
        iterations: stages.iter().map(|s| s.iterations).sum(),
        cost_before,
        cost_after,
        factors: problem.counts(),
        dropped_out_of_domain: dropped,
        final_whitened_rms: (raw.total / components as f64).sqrt(),
        bias: state.bias,
        stages,
    };
    Ok((state.traj, state.bias, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_is_continuous() {
        let d = 1.0;
        let (a, wa) = huber(1.0 - 1e-12, d);
        let (b, wb) = huber(1.0 + 1e-12, d);
        assert!((a - b).abs() < 1e-10);
        assert!((wa - wb).abs() < 1e-10);
        assert_eq!(huber(3.0, d), (5.0, 1.0 / 3.0));
        assert_eq!(huber(-0.5, d), (0.25, 1.0));
    }
}

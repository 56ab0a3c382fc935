//! Synthetic scenarios with exact ground truth.
//!
//! Measurements are produced by inverting the residual models of
//! [`crate::estimation`] at a known spline and bias, so at zero noise the
//! true trajectory is a zero-cost solution. Every random draw comes from a
//! ChaCha stream keyed by `(seed, stream, measurement index)`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::estimation::{ImuBias, ImuSample, LidarPoint, MeasurementSet, PosePrior, RangeGate, SplineConfig, WorldConstants};
use crate::geometry::{Pose, Rotation};
use crate::io;
use crate::trajectory::SplineTrajectory;
use crate::{Error, Result};

const STREAM_IMU: u64 = 1;
const STREAM_LIDAR: u64 = 2;
const STREAM_PRIOR: u64 = 3;
const STREAM_WORLD: u64 = 1 << 32;
/// 32-bit words reserved per measurement in its stream.
const WORDS_PER_DRAW: u128 = 256;
const MAX_RAY_ATTEMPTS: usize = 16;

fn draw_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(index as u128 * WORDS_PER_DRAW);
    rng
}

fn gaussian3(rng: &mut ChaCha8Rng, sigma: f64) -> Vector3<f64> {
    let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
    Vector3::from(v) * sigma
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v: Vector3<f64> = gaussian3(rng, 1.0);
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryStyle {
    Stationary,
    ConstantVelocity,
    FigureEight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FigureEightSpec {
    /// Peak excursion along x, y and z, m.
    pub amplitude: [f64; 3],
    pub height: f64,
    pub period: f64,
    /// Peak roll and pitch, degrees.
    pub tilt_deg: f64,
}

impl Default for FigureEightSpec {
    fn default() -> Self {
        FigureEightSpec {
            amplitude: [6.0, 4.0, 0.3],
            height: 0.5,
            period: 15.0,
            tilt_deg: 8.0,
        }
    }
}

/// A finite planar patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneSpec {
    pub center: [f64; 3],
    pub normal: [f64; 3],
    /// Half side lengths along the two in-plane axes, m.
    pub half_size: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    /// Add the six faces of the box `[box_min, box_max]`.
    pub walls: bool,
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    pub planes: Vec<PlaneSpec>,
    /// Map points per square meter.
    pub density: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        // Faces sit in the middle of 0.4 m voxels.
        WorldSpec {
            walls: true,
            box_min: [-10.2, -8.2, -2.2],
            box_max: [10.2, 8.2, 4.2],
            planes: Vec::new(),
            density: 200.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Range noise along the ray, m.
    pub lidar: f64,
    pub gyro: f64,
    pub accel: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateSpec {
    pub imu: f64,
    /// Lidar points per second.
    pub lidar: f64,
    pub scan: f64,
    pub prior: f64,
}

impl Default for RateSpec {
    fn default() -> Self {
        RateSpec {
            imu: 200.0,
            lidar: 400.0,
            scan: 10.0,
            prior: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorPerturbation {
    /// Offset magnitude, m.
    pub position: f64,
    /// Rotation magnitude, degrees.
    pub rotation_deg: f64,
}

impl Default for PriorPerturbation {
    fn default() -> Self {
        PriorPerturbation {
            position: 0.1,
            rotation_deg: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub duration: f64,
    pub seed: u64,
    pub style: TrajectoryStyle,
    /// Speed of the constant-velocity style, m/s.
    pub speed: f64,
    pub figure_eight: FigureEightSpec,
    /// Knot layout of the ground-truth spline.
    pub spline: SplineConfig,
    pub world: WorldSpec,
    pub noise: NoiseSpec,
    pub bias: ImuBias,
    pub rates: RateSpec,
    pub prior_perturbation: PriorPerturbation,
    /// Lidar beams are drawn uniformly within ± this elevation, degrees.
    pub elevation_deg: f64,
    pub constants: WorldConstants,
    pub lidar_gate: RangeGate,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            duration: 30.0,
            seed: 0,
            style: TrajectoryStyle::FigureEight,
            speed: 2.0,
            figure_eight: FigureEightSpec::default(),
            spline: SplineConfig::default(),
            world: WorldSpec::default(),
            noise: NoiseSpec::default(),
            bias: ImuBias::default(),
            rates: RateSpec::default(),
            prior_perturbation: PriorPerturbation::default(),
            elevation_deg: 45.0,
            constants: WorldConstants::default(),
            lidar_gate: RangeGate::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::InvalidInput(format!("scenario: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("duration", self.duration),
            ("imu rate", self.rates.imu),
            ("lidar rate", self.rates.lidar),
            ("scan rate", self.rates.scan),
            ("prior rate", self.rates.prior),
            ("spline dt", self.spline.dt),
            ("map density", self.world.density),
            ("figure-eight period", self.figure_eight.period),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("lidar noise", self.noise.lidar),
            ("gyro noise", self.noise.gyro),
            ("accel noise", self.noise.accel),
            ("prior position perturbation", self.prior_perturbation.position),
            ("prior rotation perturbation", self.prior_perturbation.rotation_deg),
            ("speed", self.speed),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.elevation_deg > 0.0 && self.elevation_deg < 90.0) {
            return Err(Error::InvalidInput("elevation must lie in (0, 90) degrees".into()));
        }
        self.constants.validate(true)
    }

    fn is_inside(&self, t: f64) -> bool {
        t >= 0.0 && t < self.duration
    }
}

/// Rectangular patch `center + a·u + b·v`, `|a| ≤ half[0]`, `|b| ≤ half[1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub u: Vector3<f64>,
    pub v: Vector3<f64>,
    pub half: [f64; 2],
}

impl Rect {
    fn new(center: Vector3<f64>, normal: Vector3<f64>, half: [f64; 2]) -> Result<Rect> {
        let n = normal.try_normalize(1e-12).ok_or_else(|| Error::InvalidInput("plane normal is zero".into()))?;
        if !(half[0] > 0.0 && half[1] > 0.0) {
            return Err(Error::InvalidInput(format!("plane has zero area (half size {half:?})")));
        }
        // Axis-aligned normals get axis-aligned edges so walls stay exact.
        let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = (seed - n * n.dot(&seed)).normalize();
        let v = n.cross(&u);
        Ok(Rect { center, normal: n, u, v, half })
    }

    pub fn area(&self) -> f64 {
        4.0 * self.half[0] * self.half[1]
    }

    /// Distance along the unit ray `o + s·d` to this patch, if it is hit in front.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        let den = self.normal.dot(d);
        if den.abs() < 1e-12 {
            return None;
        }
        let s = self.normal.dot(&(self.center - o)) / den;
        if s <= 0.0 {
            return None;
        }
        let rel = o + s * d - self.center;
        (rel.dot(&self.u).abs() <= self.half[0] && rel.dot(&self.v).abs() <= self.half[1]).then_some(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub planes: Vec<Rect>,
    /// Axis-aligned bounds of all planes.
    pub bounds: (Vector3<f64>, Vector3<f64>),
}

impl World {
    pub fn from_spec(spec: &WorldSpec) -> Result<World> {
        let mut planes = Vec::new();
        if spec.walls {
            let lo = Vector3::from(spec.box_min);
            let hi = Vector3::from(spec.box_max);
            let c = (lo + hi) / 2.0;
            let h = (hi - lo) / 2.0;
            for axis in 0..3 {
                let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
                for (side, value) in [(-1.0, lo[axis]), (1.0, hi[axis])] {
                    let mut center = c;
                    center[axis] = value;
                    let mut normal = Vector3::zeros();
                    normal[axis] = side;
                    let rect = Rect::new(center, normal, [1.0, 1.0])?;
                    // Match half sizes to whichever in-plane axis `u` follows.
                    let half = if rect.u[a].abs() > 0.5 { [h[a], h[b]] } else { [h[b], h[a]] };
                    planes.push(Rect::new(center, normal, half)?);
                }
            }
        }
        for p in &spec.planes {
            planes.push(Rect::new(Vector3::from(p.center), Vector3::from(p.normal), p.half_size)?);
        }
        if planes.is_empty() {
            return Err(Error::InvalidInput("the world has no planes".into()));
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for r in &planes {
            for (sa, sb) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                let corner = r.center + sa * r.half[0] * r.u + sb * r.half[1] * r.v;
                lo = lo.inf(&corner);
                hi = hi.sup(&corner);
            }
        }
        Ok(World { planes, bounds: (lo, hi) })
    }

    /// Nearest hit along a unit ray.
    pub fn cast(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        self.planes
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(o, d).map(|s| (s, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        let (lo, hi) = &self.bounds;
        (0..3).all(|i| x[i] > lo[i] && x[i] < hi[i])
    }
}

/// Samples every plane on a jittered grid at `spec.world.density` points/m².
pub fn make_world(spec: &ScenarioSpec) -> Result<Vec<Vector3<f64>>> {
    let world = World::from_spec(&spec.world)?;
    sample_world(&world, spec.world.density, spec.seed)
}

pub fn sample_world(world: &World, density: f64, seed: u64) -> Result<Vec<Vector3<f64>>> {
    if !(density > 0.0) {
        return Err(Error::InvalidInput(format!("density must be positive, got {density}")));
    }
    let spacing = density.sqrt().recip();
    let mut out = Vec::new();
    for (i, rect) in world.planes.iter().enumerate() {
        let na = ((2.0 * rect.half[0]) / spacing).ceil().max(1.0) as usize;
        let nb = ((2.0 * rect.half[1]) / spacing).ceil().max(1.0) as usize;
        let (sa, sb) = (2.0 * rect.half[0] / na as f64, 2.0 * rect.half[1] / nb as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_WORLD + i as u64);
        for ia in 0..na {
            for ib in 0..nb {
                let a = -rect.half[0] + (ia as f64 + rng.random::<f64>()) * sa;
                let b = -rect.half[1] + (ib as f64 + rng.random::<f64>()) * sb;
                let mut p = rect.center + a * rect.u + b * rect.v;
                // Pin the normal coordinate so axis-aligned walls stay exactly planar.
                p -= rect.normal * (rect.normal.dot(&(p - rect.center)));
                out.push(p);
            }
        }
    }
    Ok(out)
}

fn figure_eight(f: &FigureEightSpec, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    let w = 2.0 * PI / f.period;
    let [ax, ay, az] = f.amplitude;
    let p = Vector3::new(ax * (w * t).sin(), ay * (2.0 * w * t).sin(), f.height + az * (3.0 * w * t).sin());
    let v = Vector3::new(ax * w * (w * t).cos(), 2.0 * ay * w * (2.0 * w * t).cos(), 3.0 * az * w * (3.0 * w * t).cos());
    (p, v)
}

/// Ground-truth spline covering `[0, duration]`.
pub fn make_trajectory(spec: &ScenarioSpec) -> Result<SplineTrajectory> {
    let (dt, order) = (spec.spline.dt, spec.spline.order);
    let n = SplineTrajectory::knots_for_duration(spec.duration, dt, order);
    let shell = SplineTrajectory::constant(0.0, dt, order, n, Pose::identity())?;
    let times: Vec<f64> = (0..n).map(|j| shell.knot_time(j)).collect();
    let (rots, pos): (Vec<Rotation>, Vec<Vector3<f64>>) = match spec.style {
        TrajectoryStyle::Stationary => (vec![Rotation::identity(); n], vec![Vector3::new(0.0, 0.0, 0.5); n]),
        TrajectoryStyle::ConstantVelocity => {
            let start = Vector3::new(-0.5 * spec.speed * spec.duration, 0.0, 0.5);
            (
                vec![Rotation::identity(); n],
                times.iter().map(|t| start + Vector3::new(spec.speed * t, 0.0, 0.0)).collect(),
            )
        }
        TrajectoryStyle::FigureEight => {
            let f = &spec.figure_eight;
            let w = 2.0 * PI / f.period;
            let tilt = f.tilt_deg.to_radians();
            let mut yaw_prev: Option<f64> = None;
            let mut rots = Vec::with_capacity(n);
            let mut pos = Vec::with_capacity(n);
            for &t in &times {
                let (p, v) = figure_eight(f, t);
                let mut yaw = v.y.atan2(v.x);
                if let Some(prev) = yaw_prev {
                    yaw += 2.0 * PI * ((prev - yaw) / (2.0 * PI)).round();
                }
                yaw_prev = Some(yaw);
                let roll = tilt * (1.3 * w * t).sin();
                let pitch = tilt * (0.7 * w * t + 0.5).cos();
                rots.push(Rotation::from_unit_quaternion(UnitQuaternion::from_euler_angles(roll, pitch, yaw)));
                pos.push(p);
            }
            (rots, pos)
        }
    };
    SplineTrajectory::new(0.0, dt, order, rots, pos)
}

fn check_inside(traj: &SplineTrajectory, world: &World, spec: &ScenarioSpec) -> Result<bool> {
    let n = (spec.duration * 10.0).ceil() as usize;
    for i in 0..=n {
        let t = (i as f64 * 0.1).min(spec.duration);
        if traj.contains(t) && !world.contains(&traj.pose_at(t)?.position) {
            warn!("trajectory leaves the world bounding box near t = {t:.1} s");
            return Ok(false);
        }
    }
    Ok(true)
}

fn count(rate: f64, duration: f64) -> usize {
    (rate * duration).round() as usize
}

/// IMU, lidar and prior measurements along `traj`.
///
/// Gyro readings are `R⁻¹ω_W + b_g + n`, accelerometer readings
/// `R⁻¹(a_W + g) + b_a + n`. Lidar points are the first intersection of a
/// spinning beam with the world planes, displaced along the ray by range
/// noise and expressed in the body frame at their own timestamps. Priors
/// are truth poses offset by fixed-magnitude random perturbations.
pub fn simulate_measurements(traj: &SplineTrajectory, world: &World, spec: &ScenarioSpec) -> Result<MeasurementSet> {
    spec.validate()?;
    let (start, end) = traj.domain();
    if start > 0.0 || end <= spec.duration {
        return Err(Error::InvalidInput(format!(
            "trajectory domain [{start}, {end}) does not cover the scenario duration {}",
            spec.duration
        )));
    }
    check_inside(traj, world, spec)?;
    let seed = spec.seed;

    let mut imu = Vec::new();
    for i in 0..count(spec.rates.imu, spec.duration) {
        let t = i as f64 / spec.rates.imu;
        if !spec.is_inside(t) {
            break;
        }
        let e = traj.evaluate(t)?;
        let mut rng = draw_rng(seed, STREAM_IMU, i as u64);
        let gyro = e.omega_body + spec.bias.gyro + gaussian3(&mut rng, spec.noise.gyro);
        let accel = e.rotation.inverse_act(&(e.acceleration + spec.constants.gravity))
            + spec.bias.accel
            + gaussian3(&mut rng, spec.noise.accel);
        imu.push(ImuSample { t, gyro, accel });
    }

    let n_points = count(spec.rates.lidar, spec.duration);
    let n_scans = count(spec.rates.scan, spec.duration).max(1);
    let mut scans: Vec<Vec<LidarPoint>> = vec![Vec::new(); n_scans];
    let max_el = spec.elevation_deg.to_radians();
    let mut misses = 0usize;
    for i in 0..n_points {
        let t = (i as f64 + 0.5) / spec.rates.lidar;
        if !spec.is_inside(t) {
            break;
        }
        let pose = traj.pose_at(t)?;
        let mut rng = draw_rng(seed, STREAM_LIDAR, i as u64);
        let spin = (t * spec.rates.scan).fract() * 2.0 * PI;
        let mut point = None;
        for _ in 0..MAX_RAY_ATTEMPTS {
            let azimuth = spin + rng.random_range(-0.05..0.05);
            let elevation = rng.random_range(-max_el..max_el);
            let d_body = Vector3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin());
            let d = pose.rotation.act(&d_body);
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * spec.noise.lidar;
            if let Some((s, _)) = world.cast(&pose.position, &d) {
                let f = d_body * (s + noise);
                if spec.lidar_gate.accepts(&f) {
                    point = Some(f);
                    break;
                }
            }
        }
        match point {
            Some(f) => {
                let scan = ((t * spec.rates.scan).floor() as usize).min(n_scans - 1);
                scans[scan].push(LidarPoint { t, f });
            }
            None => misses += 1,
        }
    }
    if misses > 0 {
        warn!("{misses} lidar beam(s) found no surface");
    }
    scans.retain(|s| !s.is_empty());

    let mut priors = Vec::new();
    for k in 0..count(spec.rates.prior, spec.duration).max(1) {
        let t = k as f64 / spec.rates.prior;
        if !spec.is_inside(t) {
            break;
        }
        let truth = traj.pose_at(t)?;
        let mut rng = draw_rng(seed, STREAM_PRIOR, k as u64);
        let dp = unit_vector(&mut rng) * spec.prior_perturbation.position;
        let dr = unit_vector(&mut rng) * spec.prior_perturbation.rotation_deg.to_radians();
        priors.push(PosePrior {
            t,
            pose: Pose::new(truth.rotation.retract(&dr), truth.position + dp),
        });
    }
    Ok(MeasurementSet { scans, imu, priors })
}

/// Files written by [`write_scenario`], relative to its directory.
pub const MAP_FILE: &str = "map.xyz";
pub const IMU_FILE: &str = "imu.csv";
pub const PRIORS_FILE: &str = "priors.tum";
pub const TRUTH_FILE: &str = "truth.spline";
pub const SCENARIO_FILE: &str = "scenario.toml";
pub const SCAN_DIR: &str = "scans";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub map_points: usize,
    pub scans: usize,
    pub lidar_points: usize,
    pub imu_samples: usize,
    pub priors: usize,
    pub inside_world: bool,
}

/// Generates a full scenario directory: map cloud, per-scan CSVs, IMU CSV,
/// priors, the truth spline and the spec itself.
pub fn write_scenario(dir: &Path, spec: &ScenarioSpec) -> Result<ScenarioSummary> {
    spec.validate()?;
    let world = World::from_spec(&spec.world)?;
    let cloud = sample_world(&world, spec.world.density, spec.seed)?;
    let traj = make_trajectory(spec)?;
    let inside_world = check_inside(&traj, &world, spec)?;
    let ms = simulate_measurements(&traj, &world, spec)?;

    let scan_dir = dir.join(SCAN_DIR);
    fs::create_dir_all(&scan_dir).map_err(|e| Error::io(&scan_dir, e))?;
    io::write_xyz(dir.join(MAP_FILE), &cloud)?;
    io::write_imu_csv(dir.join(IMU_FILE), &ms.imu)?;
    let priors: Vec<(f64, Pose)> = ms.priors.iter().map(|p| (p.t, p.pose)).collect();
    io::write_trajectory_tum(dir.join(PRIORS_FILE), &priors)?;
    io::write_spline(dir.join(TRUTH_FILE), &traj)?;
    io::write_string(dir.join(SCENARIO_FILE), &spec.to_toml_string())?;
    for (i, scan) in ms.scans.iter().enumerate() {
        io::write_scan_csv(scan_path(&scan_dir, i), scan)?;
    }
    Ok(ScenarioSummary {
        map_points: cloud.len(),
        scans: ms.scans.len(),
        lidar_points: ms.lidar_count(),
        imu_samples: ms.imu.len(),
        priors: ms.priors.len(),
        inside_world,
    })
}

pub fn scan_path(scan_dir: &Path, index: usize) -> PathBuf {
    scan_dir.join(format!("scan_{index:05}.csv"))
}

use std::fs;
use std::path::{Path, PathBuf};

use ctreg::estimation::{
    deskew_scan, initial_trajectory, solve_registration, LidarPoint, MeasurementSet, PosePrior, RangeGate,
    RegistrationConfig, SolveReport,
};
use ctreg::eval::{self, compute_ate, histogram_csv, GroundTruth};
use ctreg::priormap::{build_map_with_stats, BuildStats, VoxelMap};
use ctreg::synth::{write_scenario, ScenarioSpec};
use ctreg::{io, Pose, SplineTrajectory};
use log::{info, warn};
use serde::Serialize;

use crate::{BuildMapArgs, CliError, DeskewArgs, EvaluateArgs, RegisterArgs, SampleArgs, SimulateArgs, VelocityArgs};

const SPLINE_HEADER: &str = "ctspline v1";
const VOXMAP_HEADER: &str = "voxmap v1";

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} '{}' does not exist", path.display())))
    }
}

fn read_to_string(path: &Path, what: &str) -> Result<String, CliError> {
    require_file(path, what)?;
    fs::read_to_string(path).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn load_config(path: Option<&Path>) -> Result<RegistrationConfig, CliError> {
    match path {
        Some(p) => Ok(RegistrationConfig::from_toml_str(&read_to_string(p, "config file")?)?),
        None => Ok(RegistrationConfig::default()),
    }
}

fn print_build_stats(stats: &BuildStats) {
    println!(
        "points {}  occupied voxels {}  planes {}  rejected: {} too few points, {} bad fit",
        stats.points, stats.occupied_voxels, stats.accepted, stats.too_few_points, stats.rejected_fit
    );
}

pub fn build_map(a: &BuildMapArgs) -> Result<(), CliError> {
    require_file(&a.cloud, "cloud file")?;
    let mut cfg = load_config(a.config.as_deref())?.map;
    if let Some(v) = a.voxel_size {
        cfg.voxel_size = v;
    }
    if let Some(v) = a.min_points {
        cfg.min_points = v;
    }
    if let Some(v) = a.min_planarity {
        cfg.min_planarity = v;
    }
    if let Some(v) = a.max_rms {
        cfg.max_rms = v;
    }
    let cloud = io::read_xyz(&a.cloud)?;
    let (map, stats) = build_map_with_stats(&cloud, cfg.voxel_size, &cfg.fit_params())?;
    io::write_voxmap(&a.out, &map)?;
    print_build_stats(&stats);
    Ok(())
}

fn load_map(path: &Path, cfg: &RegistrationConfig) -> Result<VoxelMap, CliError> {
    require_file(path, "map file")?;
    if io::has_header(path, VOXMAP_HEADER)? {
        return Ok(io::read_voxmap(path)?);
    }
    let cloud = io::read_xyz(path)?;
    let (map, stats) = build_map_with_stats(&cloud, cfg.map.voxel_size, &cfg.map.fit_params())?;
    print_build_stats(&stats);
    Ok(map)
}

fn scan_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .map_err(|e| CliError::Domain(format!("{}: {e}", input.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
                .collect();
            found.sort();
            if found.is_empty() {
                return Err(CliError::Usage(format!("scan directory '{}' has no .csv files", input.display())));
            }
            files.extend(found);
        } else {
            require_file(input, "scan file")?;
            files.push(input.clone());
        }
    }
    Ok(files)
}

#[derive(Serialize)]
struct InputSummary {
    scans: usize,
    lidar_points: usize,
    gated_points: usize,
    imu_samples: usize,
    priors: usize,
    map_planes: usize,
}

#[derive(Serialize)]
struct SplineSummary {
    t0: f64,
    dt: f64,
    order: usize,
    knots: usize,
    domain: (f64, f64),
}

#[derive(Serialize)]
struct RegisterReport<'a> {
    converged: bool,
    inputs: InputSummary,
    spline: SplineSummary,
    solve: &'a SolveReport,
    config: &'a RegistrationConfig,
}

pub fn register(a: &RegisterArgs) -> Result<(), CliError> {
    require_file(&a.priors, "priors file")?;
    if let Some(imu) = &a.imu {
        require_file(imu, "IMU file")?;
    }
    if let Some(c) = &a.config {
        require_file(c, "config file")?;
    }
    let files = scan_files(&a.scans)?;
    if !files.is_empty() && a.map.is_none() {
        return Err(CliError::Usage("--scans needs --map".into()));
    }
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(dt) = a.dt {
        cfg.spline.dt = dt;
    }
    if let Some(k) = a.order {
        cfg.spline.order = k;
    }
    cfg.validate()?;

    let map = match &a.map {
        Some(p) => load_map(p, &cfg)?,
        None => VoxelMap::empty(cfg.map.voxel_size),
    };
    let priors: Vec<PosePrior> = io::read_trajectory_tum(&a.priors)?
        .into_iter()
        .map(|(t, pose)| PosePrior { t, pose })
        .collect();
    let imu = match &a.imu {
        Some(p) => io::read_imu_csv(p)?,
        None => Vec::new(),
    };
    let mut scans = Vec::with_capacity(files.len());
    let mut gated = 0;
    for f in &files {
        let read = io::read_scan_csv(f, cfg.lidar)?;
        gated += read.gated;
        scans.push(read.points);
    }
    if gated > 0 {
        warn!("{gated} lidar point(s) outside the range gate were dropped");
    }
    let ms = MeasurementSet { scans, imu, priors };
    let span = ms
        .time_span()
        .ok_or_else(|| CliError::Domain("no measurements to register".into()))?;
    let init = initial_trajectory(&ms.priors, span, &cfg.spline)?;
    let (traj, bias, report) = solve_registration(&ms, &map, &init, &cfg.weights, &cfg.world, &cfg.solver)?;

    io::write_spline(&a.out_spline, &traj)?;
    let summary = RegisterReport {
        converged: report.converged,
        inputs: InputSummary {
            scans: ms.scans.len(),
            lidar_points: ms.lidar_count(),
            gated_points: gated,
            imu_samples: ms.imu.len(),
            priors: ms.priors.len(),
            map_planes: map.len(),
        },
        spline: SplineSummary {
            t0: traj.t0(),
            dt: traj.dt(),
            order: traj.order(),
            knots: traj.num_knots(),
            domain: traj.domain(),
        },
        solve: &report,
        config: &cfg,
    };
    if let Some(path) = &a.report {
        io::write_string(path, &to_json(&summary))?;
    }
    println!(
        "{}: {} outer loop(s), {} iteration(s), cost {:.6e} -> {:.6e}, whitened rms {:.6e}",
        if report.converged { "converged" } else { "NOT converged" },
        report.outer_loops,
        report.iterations,
        report.cost_before.total,
        report.cost_after.total,
        report.final_whitened_rms
    );
    println!(
        "gyro bias [{:.6e}, {:.6e}, {:.6e}]  accel bias [{:.6e}, {:.6e}, {:.6e}]",
        bias.gyro.x, bias.gyro.y, bias.gyro.z, bias.accel.x, bias.accel.y, bias.accel.z
    );
    if report.converged {
        Ok(())
    } else {
        Err(CliError::Domain(format!(
            "solver did not converge ({:?}); best iterate written to {}",
            report.termination,
            a.out_spline.display()
        )))
    }
}

fn read_spline(path: &Path) -> Result<SplineTrajectory, CliError> {
    require_file(path, "spline file")?;
    Ok(io::read_spline(path)?)
}

fn rate_times(spline: &SplineTrajectory, rate: f64) -> Result<Vec<f64>, CliError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(CliError::Usage(format!("--rate must be positive, got {rate}")));
    }
    let (start, end) = spline.domain();
    Ok((0..)
        .map(|i| start + i as f64 / rate)
        .take_while(|t| *t < end)
        .collect())
}

fn parse_times(text: &str, path: &Path) -> Result<Vec<f64>, CliError> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(no, l)| {
            l.parse::<f64>()
                .ok()
                .filter(|t| t.is_finite())
                .ok_or_else(|| CliError::Domain(format!("{}:{no}: invalid timestamp '{l}'", path.display())))
        })
        .collect()
}

pub fn sample(a: &SampleArgs) -> Result<(), CliError> {
    let spline = read_spline(&a.spline)?;
    let times = match (&a.times, a.rate) {
        (Some(p), _) => parse_times(&read_to_string(p, "times file")?, p)?,
        (None, Some(rate)) => rate_times(&spline, rate)?,
        (None, None) => return Err(CliError::Usage("one of --rate or --times is required".into())),
    };
    let poses = spline.sample(&times)?;
    io::write_trajectory_tum(&a.out, &poses)?;
    println!("{} poses written", poses.len());
    Ok(())
}

pub fn deskew(a: &DeskewArgs) -> Result<(), CliError> {
    let spline = read_spline(&a.spline)?;
    require_file(&a.scan, "scan file")?;
    let defaults = load_config(a.config.as_deref())?.lidar;
    let gate = RangeGate {
        range_min: a.range_min.unwrap_or(defaults.range_min),
        range_max: a.range_max.unwrap_or(defaults.range_max),
    };
    let read = io::read_scan_csv(&a.scan, gate)?;
    if read.gated > 0 {
        warn!("{} point(s) outside the range gate were dropped", read.gated);
    }
    let ref_time = match (a.ref_time, read.points.first()) {
        (Some(t), _) => t,
        (None, Some(p)) => p.t,
        (None, None) => return Err(CliError::Domain("scan has no points".into())),
    };
    let out = deskew_scan(&spline, &read.points, ref_time)?;
    let points: Vec<LidarPoint> = read
        .points
        .iter()
        .zip(out)
        .map(|(p, f)| LidarPoint { t: p.t, f })
        .collect();
    io::write_scan_csv(&a.out, &points)?;
    println!("{} points deskewed to t = {ref_time}", points.len());
    Ok(())
}

enum Trajectory {
    Spline(SplineTrajectory),
    Samples(Vec<(f64, Pose)>),
}

fn read_trajectory(path: &Path, what: &str) -> Result<Trajectory, CliError> {
    require_file(path, what)?;
    if io::has_header(path, SPLINE_HEADER)? {
        Ok(Trajectory::Spline(io::read_spline(path)?))
    } else {
        Ok(Trajectory::Samples(io::read_trajectory_tum(path)?))
    }
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let est = match read_trajectory(&a.est, "estimate file")? {
        Trajectory::Samples(s) => s,
        Trajectory::Spline(s) => s.sample(&rate_times(&s, a.rate)?)?,
    };
    let gt = read_trajectory(&a.gt, "ground truth file")?;
    let gt_ref = match &gt {
        Trajectory::Spline(s) => GroundTruth::Spline(s),
        Trajectory::Samples(s) => GroundTruth::Samples(s),
    };
    let mut report = compute_ate(&est, gt_ref, a.align)?;
    println!(
        "ATE ({:?}, {} pairs): rmse {:.6e} m  mean {:.6e}  median {:.6e}  max {:.6e}  rotation max {:.6e} deg",
        a.align, report.matched_pairs, report.rmse, report.mean, report.median, report.max, report.rotation_max_deg
    );
    if let Some(path) = &a.out {
        let json = if a.verbose {
            to_json(&report)
        } else {
            report.errors.clear();
            let mut v = serde_json::to_value(&report).expect("report serializes");
            v.as_object_mut().expect("object").remove("errors");
            to_json(&v)
        };
        io::write_string(path, &json)?;
    }
    Ok(())
}

pub fn velocity_stats(a: &VelocityArgs) -> Result<(), CliError> {
    let spline = read_spline(&a.spline)?;
    if !(a.rate > 0.0) || !(a.bin_width > 0.0) {
        return Err(CliError::Usage("--rate and --bin-width must be positive".into()));
    }
    let stats = eval::velocity_stats(&spline, a.rate, a.bin_width)?;
    println!("max {:.6} km/h  median {:.6} km/h  ({} samples)", stats.max_kmh, stats.median_kmh, stats.samples);
    let csv = histogram_csv(&stats);
    match &a.out {
        Some(p) => io::write_string(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = &a.json {
        io::write_string(p, &to_json(&stats))?;
    }
    Ok(())
}

pub fn simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let mut spec = match &a.config {
        Some(p) => ScenarioSpec::from_toml_str(&read_to_string(p, "scenario file")?)?,
        None => ScenarioSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    fs::create_dir_all(&a.out_dir).map_err(|e| CliError::Domain(format!("{}: {e}", a.out_dir.display())))?;
    let summary = write_scenario(&a.out_dir, &spec)?;
    if !summary.inside_world {
        warn!("the trajectory leaves the world bounding box");
    }
    info!("scenario written to {}", a.out_dir.display());
    println!(
        "map points {}  scans {}  lidar points {}  imu samples {}  priors {}",
        summary.map_points, summary.scans, summary.lidar_points, summary.imu_samples, summary.priors
    );
    Ok(())
}

//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export returns flat `f64` arrays so the page needs no glue beyond
//! the generated bindings.

use ctreg::estimation::deskew_scan;
use ctreg::eval::velocity_stats;
use ctreg::synth::{make_trajectory, simulate_measurements, ScenarioSpec, TrajectoryStyle, World};
use ctreg::SplineTrajectory;
use nalgebra::Vector3;
use wasm_bindgen::prelude::*;

fn style(name: &str) -> Result<TrajectoryStyle, String> {
    match name {
        "stationary" => Ok(TrajectoryStyle::Stationary),
        "constant-velocity" => Ok(TrajectoryStyle::ConstantVelocity),
        "figure-eight" => Ok(TrajectoryStyle::FigureEight),
        other => Err(format!("unknown trajectory style {other:?}")),
    }
}

fn trajectory(style_name: &str, speed: f64, duration: f64) -> Result<(ScenarioSpec, SplineTrajectory), String> {
    let spec = ScenarioSpec {
        style: style(style_name)?,
        speed,
        duration,
        ..ScenarioSpec::default()
    };
    let traj = make_trajectory(&spec).map_err(|e| e.to_string())?;
    Ok((spec, traj))
}

/// Samples `[t, x, y, z, yaw, speed]` rows at `rate` Hz.
pub fn sample_rows(style_name: &str, speed: f64, duration: f64, rate: f64) -> Result<Vec<f64>, String> {
    if !(rate > 0.0 && rate <= 1000.0) {
        return Err(format!("rate must be in (0, 1000], got {rate}"));
    }
    let (_, traj) = trajectory(style_name, speed, duration)?;
    let (a, b) = traj.domain();
    let mut out = Vec::new();
    for t in (0..).map(|i| a + i as f64 / rate).take_while(|t| *t < b) {
        let pose = traj.pose_at(t).map_err(|e| e.to_string())?;
        let v = traj.velocity_world(t).map_err(|e| e.to_string())?;
        let heading = pose.rotation.act(&Vector3::x());
        out.extend_from_slice(&[
            t,
            pose.position.x,
            pose.position.y,
            pose.position.z,
            heading.y.atan2(heading.x),
            v.norm(),
        ]);
    }
    Ok(out)
}

/// One simulated scan at `speed` m/s placed in the world frame twice: with
/// every point taken at the scan start pose (raw) and after deskewing.
///
/// Layout: `[raw_rms, deskewed_rms, n, raw xyz.., deskewed xyz..]`, where
/// the RMS values are distances to the nearest world plane.
pub fn deskew_rows(speed: f64, seed: u64) -> Result<Vec<f64>, String> {
    let mut spec = ScenarioSpec {
        style: TrajectoryStyle::ConstantVelocity,
        speed,
        duration: 1.0,
        seed,
        ..ScenarioSpec::default()
    };
    spec.rates.lidar = 4000.0;
    let traj = make_trajectory(&spec).map_err(|e| e.to_string())?;
    let world = World::from_spec(&spec.world).map_err(|e| e.to_string())?;
    let ms = simulate_measurements(&traj, &world, &spec).map_err(|e| e.to_string())?;
    let scan = ms
        .scans
        .iter()
        .max_by_key(|s| s.len())
        .filter(|s| !s.is_empty())
        .ok_or("simulation produced no lidar points")?;
    let ref_time = scan[0].t;
    let pose = traj.pose_at(ref_time).map_err(|e| e.to_string())?;
    let deskewed = deskew_scan(&traj, scan, ref_time).map_err(|e| e.to_string())?;
    let raw: Vec<_> = scan.iter().map(|p| pose.apply(&p.f)).collect();
    let fixed: Vec<_> = deskewed.iter().map(|f| pose.apply(f)).collect();
    let rms = |pts: &[Vector3<f64>]| {
        let sum: f64 = pts
            .iter()
            .map(|x| {
                world
                    .planes
                    .iter()
                    .map(|p| p.normal.dot(&(x - p.center)).abs())
                    .fold(f64::INFINITY, f64::min)
                    .powi(2)
            })
            .sum();
        (sum / pts.len() as f64).sqrt()
    };
    let mut out = vec![rms(&raw), rms(&fixed), raw.len() as f64];
    out.extend(raw.iter().chain(&fixed).flat_map(|p| [p.x, p.y, p.z]));
    Ok(out)
}

/// Layout: `[max_kmh, median_kmh, bin_width_kmh, count_0, count_1, ..]`.
pub fn histogram_rows(style_name: &str, speed: f64, duration: f64, rate: f64, bin_width: f64) -> Result<Vec<f64>, String> {
    let (_, traj) = trajectory(style_name, speed, duration)?;
    let stats = velocity_stats(&traj, rate, bin_width).map_err(|e| e.to_string())?;
    let mut out = vec![stats.max_kmh, stats.median_kmh, stats.bin_width_kmh];
    out.extend(stats.histogram.iter().map(|&c| c as f64));
    Ok(out)
}

#[wasm_bindgen]
pub fn sample_trajectory(style_name: &str, speed: f64, duration: f64, rate: f64) -> Result<Vec<f64>, JsError> {
    sample_rows(style_name, speed, duration, rate).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn deskew_demo(speed: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    deskew_rows(speed, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn velocity_histogram(
    style_name: &str,
    speed: f64,
    duration: f64,
    rate: f64,
    bin_width: f64,
) -> Result<Vec<f64>, JsError> {
    histogram_rows(style_name, speed, duration, rate, bin_width).map_err(|e| JsError::new(&e))
}

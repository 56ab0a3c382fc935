//! Readers and writers for the on-disk text formats.
//!
//! | format    | layout                                                  |
//! |-----------|---------------------------------------------------------|
//! | TUM       | `t tx ty tz qx qy qz qw` per line                       |
//! | IMU CSV   | header `t,wx,wy,wz,ax,ay,az`                            |
//! | scan CSV  | header `t,x,y,z`                                        |
//! | XYZ       | `x y z` per line                                        |
//! | spline    | `ctspline v1` (see [`SplineTrajectory::to_text`])       |
//! | voxmap    | `voxmap v1` (see [`VoxelMap::to_text`])                 |
//!
//! `#` starts a comment line in every format. Floating-point values are
//! written with 17 significant digits except TUM timestamps, which use nine
//! decimals.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::estimation::{ImuSample, LidarPoint, RangeGate};
use crate::geometry::{Pose, Rotation};
use crate::priormap::VoxelMap;
use crate::trajectory::SplineTrajectory;
use crate::{Error, Result};

/// Maximum deviation of a TUM quaternion norm from 1 before it is rejected.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileFormatError {
    pub path: String,
    /// 1-based.
    pub line: usize,
    pub reason: String,
}

impl FileFormatError {
    pub fn new(path: impl Into<String>, line: usize, reason: impl Into<String>) -> Self {
        FileFormatError {
            path: path.into(),
            line: line.max(1),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for FileFormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.path, self.line, self.reason)
    }
}

impl std::error::Error for FileFormatError {}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

fn parse_f64(s: &str, path: &str, line: usize) -> std::result::Result<f64, FileFormatError> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| FileFormatError::new(path, line, format!("`{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(FileFormatError::new(path, line, format!("non-finite value `{s}`")));
    }
    Ok(v)
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

// ---------------------------------------------------------------- TUM

pub fn parse_tum(text: &str, path: &str) -> std::result::Result<Vec<(f64, Pose)>, FileFormatError> {
    let mut out: Vec<(f64, Pose)> = Vec::new();
    for (no, line) in content_lines(text) {
        let vals = line
            .split_whitespace()
            .map(|s| parse_f64(s, path, no))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if vals.len() != 8 {
            return Err(FileFormatError::new(path, no, format!("expected 8 values, found {}", vals.len())));
        }
        let (qx, qy, qz, qw) = (vals[4], vals[5], vals[6], vals[7]);
        let norm = (qx * qx + qy * qy + qz * qz + qw * qw).sqrt();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(FileFormatError::new(path, no, format!("quaternion norm {norm} is not unit")));
        }
        let rotation = Rotation::from_wxyz(qw, qx, qy, qz).map_err(|e| FileFormatError::new(path, no, e.to_string()))?;
        let t = vals[0];
        if let Some((prev, _)) = out.last() {
            if !(t > *prev) {
                return Err(FileFormatError::new(path, no, format!("timestamp {t} does not increase")));
            }
        }
        out.push((t, Pose::new(rotation, Vector3::new(vals[1], vals[2], vals[3]))));
    }
    Ok(out)
}

pub fn format_tum(samples: &[(f64, Pose)]) -> String {
    let mut s = String::with_capacity(samples.len() * 160);
    s.push_str("# t tx ty tz qx qy qz qw\n");
    for (t, pose) in samples {
        let [w, x, y, z] = pose.rotation.wxyz();
        let p = pose.position;
        s.push_str(&format!(
            "{t:.9} {:.16e} {:.16e} {:.16e} {x:.16e} {y:.16e} {z:.16e} {w:.16e}\n",
            p.x, p.y, p.z
        ));
    }
    s
}

pub fn read_trajectory_tum(path: impl AsRef<Path>) -> Result<Vec<(f64, Pose)>> {
    let path = path.as_ref();
    Ok(parse_tum(&read_text(path)?, &path.display().to_string())?)
}

pub fn write_trajectory_tum(path: impl AsRef<Path>, samples: &[(f64, Pose)]) -> Result<()> {
    write_text(path.as_ref(), &format_tum(samples))
}

// ---------------------------------------------------------------- CSV

fn csv_records(
    text: &str,
    path: &str,
    header: &[&str],
) -> std::result::Result<Vec<(usize, Vec<f64>)>, FileFormatError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let found = reader
        .headers()
        .map_err(|e| FileFormatError::new(path, 1, e.to_string()))?
        .clone();
    if found.iter().collect::<Vec<_>>() != header {
        return Err(FileFormatError::new(
            path,
            1,
            format!("expected header `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(1);
            FileFormatError::new(path, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(1);
        if rec.len() != header.len() {
            return Err(FileFormatError::new(path, line, format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let vals = rec
            .iter()
            .map(|s| parse_f64(s, path, line))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        out.push((line, vals));
    }
    Ok(out)
}

pub const IMU_HEADER: [&str; 7] = ["t", "wx", "wy", "wz", "ax", "ay", "az"];
pub const SCAN_HEADER: [&str; 4] = ["t", "x", "y", "z"];

pub fn parse_imu_csv(text: &str, path: &str) -> std::result::Result<Vec<ImuSample>, FileFormatError> {
    let mut out: Vec<ImuSample> = Vec::new();
    for (line, v) in csv_records(text, path, &IMU_HEADER)? {
        if let Some(prev) = out.last() {
            if !(v[0] > prev.t) {
                return Err(FileFormatError::new(path, line, format!("timestamp {} does not increase", v[0])));
            }
        }
        out.push(ImuSample {
            t: v[0],
            gyro: Vector3::new(v[1], v[2], v[3]),
            accel: Vector3::new(v[4], v[5], v[6]),
        });
    }
    Ok(out)
}

pub fn format_imu_csv(samples: &[ImuSample]) -> String {
    let mut s = IMU_HEADER.join(",");
    s.push('\n');
    for m in samples {
        s.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            m.t, m.gyro.x, m.gyro.y, m.gyro.z, m.accel.x, m.accel.y, m.accel.z
        ));
    }
    s
}

pub fn read_imu_csv(path: impl AsRef<Path>) -> Result<Vec<ImuSample>> {
    let path = path.as_ref();
    Ok(parse_imu_csv(&read_text(path)?, &path.display().to_string())?)
}

pub fn write_imu_csv(path: impl AsRef<Path>, samples: &[ImuSample]) -> Result<()> {
    write_text(path.as_ref(), &format_imu_csv(samples))
}

/// A scan file after range gating.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRead {
    pub points: Vec<LidarPoint>,
    /// Rows dropped by the range gate.
    pub gated: usize,
}

pub fn parse_scan_csv(text: &str, path: &str, gate: RangeGate) -> std::result::Result<ScanRead, FileFormatError> {
    let mut points: Vec<LidarPoint> = Vec::new();
    let mut gated = 0;
    let mut last_t = f64::NEG_INFINITY;
    for (line, v) in csv_records(text, path, &SCAN_HEADER)? {
        if v[0] < last_t {
            return Err(FileFormatError::new(path, line, format!("timestamp {} decreases", v[0])));
        }
        last_t = v[0];
        let f = Vector3::new(v[1], v[2], v[3]);
        if gate.accepts(&f) {
            points.push(LidarPoint { t: v[0], f });
        } else {
            gated += 1;
        }
    }
    Ok(ScanRead { points, gated })
}

pub fn format_scan_csv(points: &[LidarPoint]) -> String {
    let mut s = SCAN_HEADER.join(",");
    s.push('\n');
    for p in points {
        s.push_str(&format!("{:.16e},{:.16e},{:.16e},{:.16e}\n", p.t, p.f.x, p.f.y, p.f.z));
    }
    s
}

pub fn read_scan_csv(path: impl AsRef<Path>, gate: RangeGate) -> Result<ScanRead> {
    let path = path.as_ref();
    Ok(parse_scan_csv(&read_text(path)?, &path.display().to_string(), gate)?)
}

pub fn write_scan_csv(path: impl AsRef<Path>, points: &[LidarPoint]) -> Result<()> {
    write_text(path.as_ref(), &format_scan_csv(points))
}

/// Writes deskewed (or otherwise untimed) points as `x,y,z` CSV.
pub fn write_points_csv(path: impl AsRef<Path>, points: &[Vector3<f64>]) -> Result<()> {
    let mut s = String::from("x,y,z\n");
    for p in points {
        s.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", p.x, p.y, p.z));
    }
    write_text(path.as_ref(), &s)
}

// ---------------------------------------------------------------- XYZ

pub fn parse_xyz(text: &str, path: &str) -> std::result::Result<Vec<Vector3<f64>>, FileFormatError> {
    content_lines(text)
        .map(|(no, line)| {
            let v = line
                .split_whitespace()
                .map(|s| parse_f64(s, path, no))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            if v.len() != 3 {
                return Err(FileFormatError::new(path, no, format!("expected 3 values, found {}", v.len())));
            }
            Ok(Vector3::new(v[0], v[1], v[2]))
        })
        .collect()
}

pub fn format_xyz(points: &[Vector3<f64>]) -> String {
    let mut s = String::with_capacity(points.len() * 72);
    for p in points {
        s.push_str(&format!("{:.16e} {:.16e} {:.16e}\n", p.x, p.y, p.z));
    }
    s
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<Vec<Vector3<f64>>> {
    let path = path.as_ref();
    Ok(parse_xyz(&read_text(path)?, &path.display().to_string())?)
}

pub fn write_xyz(path: impl AsRef<Path>, points: &[Vector3<f64>]) -> Result<()> {
    write_text(path.as_ref(), &format_xyz(points))
}

// ------------------------------------------------- spline and voxel map

pub fn read_spline(path: impl AsRef<Path>) -> Result<SplineTrajectory> {
    let path = path.as_ref();
    Ok(SplineTrajectory::from_text(&read_text(path)?, &path.display().to_string())?)
}

pub fn write_spline(path: impl AsRef<Path>, spline: &SplineTrajectory) -> Result<()> {
    write_text(path.as_ref(), &spline.to_text())
}

pub fn read_voxmap(path: impl AsRef<Path>) -> Result<VoxelMap> {
    let path = path.as_ref();
    Ok(VoxelMap::from_text(&read_text(path)?, &path.display().to_string())?)
}

pub fn write_voxmap(path: impl AsRef<Path>, map: &VoxelMap) -> Result<()> {
    write_text(path.as_ref(), &map.to_text())
}

/// True when the file's first content line is `header`.
pub fn has_header(path: impl AsRef<Path>, header: &str) -> Result<bool> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let first = content_lines(&text).next().map(|(_, l)| l == header);
    Ok(first.unwrap_or(false))
}

pub fn write_string(path: impl AsRef<Path>, text: &str) -> Result<()> {
    write_text(path.as_ref(), text)
}

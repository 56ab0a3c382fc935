//! Continuous-time lidar-inertial registration against a voxelized prior
//! map.
//!
//! The trajectory is a uniform cumulative B-spline ([`trajectory`]). It is
//! estimated together with a constant IMU bias by minimizing pose-prior,
//! point-to-plane lidar, gyroscope and accelerometer residuals
//! ([`estimation`]) against planes fitted in the voxels of a prior map
//! ([`priormap`]). Lidar points are evaluated at their own timestamps, so
//! motion undistortion happens inside the optimization. The fitted
//! trajectory can be sampled at any time, used to deskew scans, and scored
//! with [`eval`]. [`synth`] builds scenarios with known ground truth.

pub mod estimation;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod priormap;
pub mod synth;
pub mod trajectory;

use std::path::PathBuf;

pub use geometry::{Pose, Rotation};
pub use io::FileFormatError;
pub use trajectory::SplineTrajectory;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("time {t} is outside the trajectory domain [{start}, {end})")]
    OutOfDomain { t: f64, start: f64, end: f64 },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("{0}")]
    InvalidInput(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("normal equations are not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Format(#[from] FileFormatError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

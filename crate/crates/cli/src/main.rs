//! `ctreg` command-line tool.
//!
//! Exit codes: 0 success, 1 domain error (bad data, failed solve), 2 usage
//! error (bad flags, missing input files).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "ctreg", version, about = "Continuous-time lidar-inertial registration against a prior map")]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct Threads {
    /// Worker threads; 0 uses all cores. Results do not depend on this value.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit per-voxel planes to a prior map cloud and write a voxmap.
    BuildMap(BuildMapArgs),
    /// Estimate the trajectory and IMU bias from scans, IMU and pose priors.
    Register(RegisterArgs),
    /// Sample a spline at a fixed rate or at listed timestamps (TUM output).
    Sample(SampleArgs),
    /// Undistort a scan into the body frame at a reference time.
    Deskew(DeskewArgs),
    /// Absolute trajectory error of an estimate against ground truth.
    Evaluate(EvaluateArgs),
    /// Maximum and median speed plus a speed histogram.
    VelocityStats(VelocityArgs),
    /// Generate a synthetic scenario directory.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug)]
pub struct BuildMapArgs {
    /// Map cloud, one `x y z` point per line.
    #[arg(long)]
    pub cloud: PathBuf,
    /// Output voxmap file.
    #[arg(long)]
    pub out: PathBuf,
    /// Registration config; its [map] section supplies defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Voxel edge length, m.
    #[arg(long)]
    pub voxel_size: Option<f64>,
    /// Minimum points for a voxel plane.
    #[arg(long)]
    pub min_points: Option<usize>,
    /// Minimum planarity 1 − λmin/λmid.
    #[arg(long)]
    pub min_planarity: Option<f64>,
    /// Maximum RMS point-to-plane distance, m.
    #[arg(long)]
    pub max_rms: Option<f64>,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    /// Prior map: a voxmap file, or an XYZ cloud that is voxelized on the fly.
    #[arg(long)]
    pub map: Option<PathBuf>,
    /// Scan CSV files (`t,x,y,z`), or directories of them; one file per scan.
    #[arg(long, num_args = 1..)]
    pub scans: Vec<PathBuf>,
    /// IMU CSV (`t,wx,wy,wz,ax,ay,az`).
    #[arg(long)]
    pub imu: Option<PathBuf>,
    /// Pose priors in TUM format; also used to initialize the trajectory.
    #[arg(long)]
    pub priors: PathBuf,
    /// Registration config (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output spline file.
    #[arg(long)]
    pub out_spline: PathBuf,
    /// Output JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Knot interval override, s.
    #[arg(long)]
    pub dt: Option<f64>,
    /// Spline order override.
    #[arg(long)]
    pub order: Option<usize>,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub spline: PathBuf,
    /// Sampling rate, Hz, from the start of the spline domain.
    #[arg(long, conflicts_with = "times", required_unless_present = "times")]
    pub rate: Option<f64>,
    /// File with one timestamp per line.
    #[arg(long)]
    pub times: Option<PathBuf>,
    /// Output TUM file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args, Debug)]
pub struct DeskewArgs {
    #[arg(long)]
    pub spline: PathBuf,
    /// Scan CSV (`t,x,y,z`).
    #[arg(long)]
    pub scan: PathBuf,
    /// Reference time; defaults to the first point's timestamp.
    #[arg(long)]
    pub ref_time: Option<f64>,
    /// Output scan CSV with points in the reference body frame.
    #[arg(long)]
    pub out: PathBuf,
    /// Registration config; its [lidar] section supplies the range gate.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Minimum accepted range, m.
    #[arg(long)]
    pub range_min: Option<f64>,
    /// Maximum accepted range, m.
    #[arg(long)]
    pub range_max: Option<f64>,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Estimate: TUM file or spline file.
    #[arg(long)]
    pub est: PathBuf,
    /// Ground truth: spline file (sampled exactly) or TUM file (nearest match within 0.02 s).
    #[arg(long)]
    pub gt: PathBuf,
    /// Alignment applied before computing errors: none, se3 or sim3.
    #[arg(long, default_value = "se3")]
    pub align: ctreg::eval::AlignMode,
    /// Rate used when the estimate is a spline, Hz.
    #[arg(long, default_value_t = 100.0)]
    pub rate: f64,
    /// Output JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Include the per-pair error array in the report.
    #[arg(long)]
    pub verbose: bool,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args, Debug)]
pub struct VelocityArgs {
    #[arg(long)]
    pub spline: PathBuf,
    /// Sampling rate, Hz.
    #[arg(long, default_value_t = 10.0)]
    pub rate: f64,
    /// Histogram bin width, km/h.
    #[arg(long, default_value_t = ctreg::eval::DEFAULT_BIN_WIDTH_KMH)]
    pub bin_width: f64,
    /// Histogram CSV output; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON summary output.
    #[arg(long)]
    pub json: Option<PathBuf>,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Scenario TOML; defaults are used for anything it omits.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if needed.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    threads: Threads,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(String),
}

impl From<ctreg::Error> for CliError {
    fn from(e: ctreg::Error) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl Command {
    fn threads(&self) -> usize {
        match self {
            Command::BuildMap(a) => a.threads.threads,
            Command::Register(a) => a.threads.threads,
            Command::Sample(a) => a.threads.threads,
            Command::Deskew(a) => a.threads.threads,
            Command::Evaluate(a) => a.threads.threads,
            Command::VelocityStats(a) => a.threads.threads,
            Command::Simulate(a) => a.threads.threads,
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(command.threads())
        .build()
        .map_err(|e| CliError::Domain(format!("thread pool: {e}")))?;
    pool.install(|| match command {
        Command::BuildMap(a) => commands::build_map(&a),
        Command::Register(a) => commands::register(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Deskew(a) => commands::deskew(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::VelocityStats(a) => commands::velocity_stats(&a),
        Command::Simulate(a) => commands::simulate(&a),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

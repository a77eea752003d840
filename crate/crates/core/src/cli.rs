//! Command-line front end: scenario generation, estimation runs, evaluation
//! and batch sweeps over a scenario by mode grid.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{self, ErrorReport, StampedPose, Trajectory};
use crate::frontend::{run_estimator, EstimateOutput, EstimatorConfig, EstimatorStats, Mode};
use crate::sim::{self, generate, ScenarioConfig, SensorDataset, Stamp, TruthRecord};

/// Environment variable capping the sweep worker pool.
pub const THREADS_ENV: &str = "AQUAFUSE_THREADS";

/// Positions beyond this magnitude count as numerical divergence.
const DIVERGENCE_LIMIT_M: f64 = 1e6;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Refused(PathBuf),
    #[error("estimate diverged: {0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Refused(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

fn input<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Input(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "aquafuse", version, about = "Visual-inertial-acoustic-depth estimation on synthetic underwater scenarios")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a scenario config.
    Simulate(SimulateArgs),
    /// Run the estimator over a dataset.
    Estimate(EstimateArgs),
    /// Score estimated trajectories against a dataset's ground truth.
    Evaluate(EvaluateArgs),
    /// Simulate, estimate and evaluate every scenario in every mode.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario config (JSON); defaults are used for missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Estimator config (JSON). Without it the config is derived from the
    /// dataset's noise parameters.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// full, visual-inertial-only, acoustic-inertial-depth-only or
    /// dvl-deadreckon-only.
    #[arg(long, default_value = "full")]
    pub mode: Mode,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Leave the generation time out of run.json.
    #[arg(long)]
    pub no_header_timestamp: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Estimate run directory or trajectory file; repeatable.
    #[arg(long = "estimate", required = true)]
    pub estimates: Vec<PathBuf>,
    /// Association tolerance; defaults to half the camera period.
    #[arg(long)]
    pub max_dt: Option<f64>,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Leave the generation time out of report.json.
    #[arg(long)]
    pub no_header_timestamp: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Sweep config (JSON) listing scenarios and modes.
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Overrides every scenario's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Leave the generation time out of every run.json and report.json.
    #[arg(long)]
    pub no_header_timestamp: bool,
}

/// Scenario by mode grid for `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub scenarios: Vec<ScenarioConfig>,
    #[serde(default = "all_modes")]
    pub modes: Vec<Mode>,
}

fn all_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Sweep(a) => cmd_sweep(&a),
    }
}

/// Creates `out`, refusing to touch an existing directory unless forced.
fn prepare_output(o: &OutputArgs) -> Result<(), CliError> {
    if o.out.exists() {
        if !o.force {
            return Err(CliError::Refused(o.out.clone()));
        }
        if !o.out.is_dir() {
            return Err(CliError::Input(format!("{} is not a directory", o.out.display())));
        }
        fs::remove_dir_all(&o.out).map_err(|e| io_error(&o.out, e))?;
    }
    fs::create_dir_all(&o.out).map_err(|e| io_error(&o.out, e))
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_error(path, e))
}

fn unix_time_s() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Optional generation timestamp at the top of report files.
#[derive(Serialize)]
struct Header {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_unix_s: Option<u64>,
    version: &'static str,
}

impl Header {
    fn new(suppress_timestamp: bool) -> Self {
        Self { generated_unix_s: if suppress_timestamp { None } else { Some(unix_time_s()) }, version: env!("CARGO_PKG_VERSION") }
    }
}

fn load_scenario(path: Option<&Path>, seed: Option<u64>) -> Result<ScenarioConfig, CliError> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            ScenarioConfig::from_json(&text).map_err(|e| io_error(p, e))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn summary(ds: &SensorDataset) -> String {
    format!(
        "duration {} s: imu {}, dvl {}, pressure {}, frames {}, groundtruth {}",
        ds.config.duration_s,
        ds.imu.len(),
        ds.dvl.len(),
        ds.pressure.len(),
        ds.frames.len(),
        ds.truth.len()
    )
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let cfg = load_scenario(a.config.as_deref(), a.seed)?;
    let ds = generate(&cfg).map_err(input)?;
    prepare_output(&a.output)?;
    sim::write_dataset(&ds, &a.output.out).map_err(input)?;
    println!("{}", summary(&ds));
    Ok(())
}

#[derive(Serialize)]
struct TrajectoryLine {
    t: Stamp,
    frame: u64,
    /// Row-major rotation matrix.
    rotation: [f64; 9],
    position: [f64; 3],
    velocity: [f64; 3],
    bv: [f64; 3],
    status: &'static str,
    keyframe: bool,
}

#[derive(Serialize)]
struct StatusRow {
    frame: u64,
    t: f64,
    mode: &'static str,
    features: usize,
    keyframe: bool,
    cost: Option<f64>,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    #[serde(flatten)]
    header: Header,
    mode: Mode,
    config: &'a EstimatorConfig,
    stats: &'a EstimatorStats,
}

fn check_divergence(out: &EstimateOutput) -> Result<(), CliError> {
    for p in &out.trajectory {
        let finite = p.position.iter().chain(p.velocity.iter()).all(|x| x.is_finite()) && p.rotation.is_finite();
        if !finite || p.position.norm() > DIVERGENCE_LIMIT_M {
            return Err(CliError::Diverged(format!("frame {} at t = {} has position {:?}", p.frame_id, p.t, p.position.as_slice())));
        }
    }
    Ok(())
}

/// Writes `trajectory.jsonl`, `status.csv` and `run.json` into `dir`.
fn write_run(dir: &Path, cfg: &EstimatorConfig, out: &EstimateOutput, suppress_timestamp: bool) -> Result<(), CliError> {
    let path = dir.join("trajectory.jsonl");
    let mut w = BufWriter::new(fs::File::create(&path).map_err(|e| io_error(&path, e))?);
    for p in &out.trajectory {
        let m = p.rotation.matrix();
        let line = TrajectoryLine {
            t: Stamp(p.t),
            frame: p.frame_id,
            rotation: [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]],
            position: p.position.into(),
            velocity: p.velocity.into(),
            bv: p.bv.into(),
            status: p.status.name(),
            keyframe: p.keyframe,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| io_error(&path, e))?;
        w.write_all(b"\n").map_err(|e| io_error(&path, e))?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;

    let path = dir.join("status.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_error(&path, e))?;
    for (p, f) in out.trajectory.iter().zip(&out.frames) {
        w.serialize(StatusRow {
            frame: f.frame_id,
            t: f.t,
            mode: f.status.name(),
            features: f.tracked_features,
            keyframe: p.keyframe,
            cost: p.cost,
        })
        .map_err(|e| io_error(&path, e))?;
    }
    w.flush().map_err(|e| io_error(&path, e))?;

    let summary = RunSummary { header: Header::new(suppress_timestamp), mode: cfg.mode, config: cfg, stats: &out.stats };
    write_file(&dir.join("run.json"), serde_json::to_string_pretty(&summary).expect("summary serializes").as_bytes())
}

fn estimate(ds: &SensorDataset, cfg: &EstimatorConfig) -> Result<EstimateOutput, CliError> {
    let out = run_estimator(ds, cfg).map_err(input)?;
    if out.stats.failed_solves > 0 {
        warn!("{} window solves failed", out.stats.failed_solves);
    }
    check_divergence(&out)?;
    Ok(out)
}

pub fn cmd_estimate(a: &EstimateArgs) -> Result<(), CliError> {
    let ds = sim::read_dataset(&a.dataset).map_err(input)?;
    let cfg = match &a.config {
        Some(p) => EstimatorConfig { mode: a.mode, ..read_json(p)? },
        None => EstimatorConfig::for_scenario(&ds.config, a.mode),
    };
    let out = estimate(&ds, &cfg)?;
    prepare_output(&a.output)?;
    write_run(&a.output.out, &cfg, &out, a.no_header_timestamp)?;
    println!(
        "{}: {} frames, {} keyframes, {} degraded, {} window solves",
        cfg.mode, out.stats.frames, out.stats.keyframes, out.stats.degraded_frames, out.stats.window_solves
    );
    Ok(())
}

pub fn truth_trajectory(truth: &[TruthRecord]) -> Result<Trajectory, CliError> {
    Trajectory::new(truth.iter().map(|r| StampedPose { t: r.t, pose: r.state.pose() }).collect()).map_err(input)
}

pub fn estimate_trajectory(out: &EstimateOutput) -> Result<Trajectory, CliError> {
    let poses = out
        .trajectory
        .iter()
        .map(|p| StampedPose { t: p.t, pose: crate::manifold::Pose::new(p.rotation, p.position) })
        .collect();
    Trajectory::new(poses).map_err(input)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    #[serde(flatten)]
    header: Header,
    reports: &'a [ErrorReport],
}

/// Writes `report.json`, `table.csv` and one `errors_<sequence>.csv` per report.
fn write_reports(dir: &Path, reports: &[ErrorReport], suppress_timestamp: bool) -> Result<(), CliError> {
    let file = ReportFile { header: Header::new(suppress_timestamp), reports };
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&file).expect("report serializes").as_bytes())?;
    let path = dir.join("table.csv");
    let f = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
    eval::write_table_csv(reports, f).map_err(|e| io_error(&path, e))?;
    for r in reports {
        let path = dir.join(format!("errors_{}.csv", r.sequence.replace(['/', '\\'], "_")));
        let f = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
        eval::write_series_csv(r, f).map_err(|e| io_error(&path, e))?;
    }
    Ok(())
}

/// Sequence name of an estimate: its run directory, or the file stem.
fn sequence_name(path: &Path) -> String {
    let named = if path.is_dir() { Some(path) } else { path.parent().filter(|p| !p.as_os_str().is_empty()) };
    named
        .and_then(Path::file_name)
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "estimate".into())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let meta = sim::read_meta(&a.dataset).map_err(input)?;
    let truth = truth_trajectory(&sim::read_groundtruth(&a.dataset).map_err(input)?)?;
    let max_dt = a.max_dt.unwrap_or(0.5 / meta.camera_hz);
    let mut reports: Vec<ErrorReport> = Vec::new();
    for path in &a.estimates {
        let file = if path.is_dir() { path.join("trajectory.jsonl") } else { path.clone() };
        let est = eval::read_trajectory(&file).map_err(input)?;
        let mut name = sequence_name(path);
        if reports.iter().any(|r| r.sequence == name) {
            name = format!("{name}_{}", reports.len());
        }
        reports.push(eval::evaluate(&est, &truth, max_dt, &name).map_err(input)?);
    }
    prepare_output(&a.output)?;
    write_reports(&a.output.out, &reports, a.no_header_timestamp)?;
    for r in &reports {
        println!(
            "{}: translation RMSE {:.4} m (STD {:.4}), rotation RMSE {:.4} deg (STD {:.4}) over {} poses",
            r.sequence, r.translation_rmse_m, r.translation_std_m, r.rotation_rmse_deg, r.rotation_std_deg, r.pairs
        );
    }
    Ok(())
}

/// Worker pool sized by [`THREADS_ENV`], or rayon's default when unset.
fn worker_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Input(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
        })?;
        b = b.num_threads(n);
    }
    b.build().map_err(input)
}

pub fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let mut sweep: SweepConfig = read_json(&a.config)?;
    if sweep.scenarios.is_empty() || sweep.modes.is_empty() {
        return Err(CliError::Input("sweep needs at least one scenario and one mode".into()));
    }
    for (i, s) in sweep.scenarios.iter_mut().enumerate() {
        if let Some(seed) = a.seed {
            s.seed = seed;
        }
        s.validate().map_err(input)?;
        if s.name.is_empty() || s.name.contains(['/', '\\']) {
            return Err(CliError::Input(format!("scenario {i} needs a plain, non-empty name")));
        }
    }
    let mut names: Vec<&str> = sweep.scenarios.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(CliError::Input("scenario names must be unique".into()));
    }
    prepare_output(&a.output)?;
    let pool = worker_pool()?;
    let out = &a.output.out;

    let datasets: Vec<SensorDataset> = pool.install(|| {
        sweep
            .scenarios
            .par_iter()
            .map(|s| {
                let ds = generate(s).map_err(input)?;
                sim::write_dataset(&ds, &out.join(&s.name).join("dataset")).map_err(input)?;
                info!("{}: {}", s.name, summary(&ds));
                Ok(ds)
            })
            .collect::<Result<_, CliError>>()
    })?;

    let jobs: Vec<(usize, Mode)> =
        (0..datasets.len()).flat_map(|i| sweep.modes.iter().map(move |&m| (i, m))).collect();
    let reports: Vec<ErrorReport> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, mode)| {
                let ds = &datasets[i];
                let cfg = EstimatorConfig::for_scenario(&ds.config, mode);
                let run = estimate(ds, &cfg)?;
                let dir = out.join(&ds.config.name).join(mode.name());
                fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
                write_run(&dir, &cfg, &run, a.no_header_timestamp)?;
                let name = format!("{}/{}", ds.config.name, mode.name());
                let max_dt = 0.5 / ds.config.camera_hz;
                eval::evaluate(&estimate_trajectory(&run)?, &truth_trajectory(&ds.truth)?, max_dt, &name).map_err(input)
            })
            .collect::<Result<_, CliError>>()
    })?;
    write_reports(out, &reports, a.no_header_timestamp)?;
    for r in &reports {
        println!("{}: translation RMSE {:.4} m, rotation RMSE {:.4} deg", r.sequence, r.translation_rmse_m, r.rotation_rmse_deg);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        // [TRIVIAL]
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_are_stable() {
        // [TRIVIAL]
        assert_eq!(CliError::Input("x".into()).exit_code(), 2);
        assert_eq!(CliError::Refused(PathBuf::from("x")).exit_code(), 3);
        assert_eq!(CliError::Diverged("x".into()).exit_code(), 4);
    }

    #[test]
    fn parses_modes_and_flags() {
        // [TRIVIAL]
        let cli = Cli::try_parse_from([
            "aquafuse", "estimate", "--dataset", "d", "--out", "o", "--mode", "visual-inertial-only", "--force",
        ])
        .unwrap();
        match cli.command {
            Command::Estimate(a) => {
                assert_eq!(a.mode, Mode::VisualInertialOnly);
                assert!(a.output.force);
                assert!(!a.no_header_timestamp);
            }
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["aquafuse", "estimate", "--dataset", "d", "--out", "o", "--mode", "vio"]).is_err());
    }

    #[test]
    fn sequence_names_follow_the_run_directory() {
        // [TRIVIAL]
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("full");
        fs::create_dir(&run).unwrap();
        assert_eq!(sequence_name(&run), "full");
        assert_eq!(sequence_name(&run.join("trajectory.jsonl")), "full");
        assert_eq!(sequence_name(Path::new("est.jsonl")), "est");
    }

    #[test]
    fn sweep_config_defaults_to_every_mode() {
        // [TRIVIAL]
        let cfg: SweepConfig = serde_json::from_str(r#"{"scenarios": [{"name": "a"}]}"#).unwrap();
        assert_eq!(cfg.modes, Mode::ALL.to_vec());
        assert_eq!(cfg.scenarios[0].name, "a");
    }
}

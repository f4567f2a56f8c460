//! Command implementations behind the `handkin` binary.
//!
//! Each `cmd_*` function returns the process exit code; diagnostics go to the
//! supplied writers so the commands can be driven from tests.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use handkin::bench::{mean_error, run_suite, write_csv, Method, Suite, NO_AXIS_ERROR_DEG};
use handkin::config::load_config;
use handkin::io::{write_records, ObservationReader, ReportWriter};
use handkin::joint::JointAxis;
use handkin::metrics::{tangent_error_axis, GroundTruthJoint, DEFAULT_SAMPLES};
use handkin::pipeline::EstimateSummary;
use handkin::simulator::{generate, Scenario, ScenarioParams};
use handkin::{Error, JointType, Pipeline, PipelineConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "handkin", version, about = "Estimate articulated-object joints from hand landmark trajectories")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the estimator over an observation stream and write a report.
    Estimate(EstimateArgs),
    /// Generate a synthetic observation sequence and its ground truth.
    Simulate(SimulateArgs),
    /// Run a scenario suite under every method and write tangent errors as CSV.
    Bench(BenchArgs),
    /// Tangent error of an estimate against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Observation JSON Lines file.
    #[arg(long, required_unless_present = "live")]
    pub input: Option<PathBuf>,
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report JSON path.
    #[arg(long)]
    pub output: PathBuf,
    /// Ground-truth joint JSON; adds the tangent error to the report.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Read records from standard input and flush the report after every frame.
    #[arg(long, conflicts_with = "input")]
    pub live: bool,
    /// Include processing throughput in the report (makes it run-dependent).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SimJoint {
    Prismatic,
    Revolute,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = SimJoint::Revolute)]
    pub joint: SimJoint,
    /// Articulation range: meters (prismatic) or radians (revolute).
    /// Defaults to 0.3 m or π/2.
    #[arg(long)]
    pub q_max: Option<f64>,
    /// Base observation noise sigma in meters, scaled per landmark class.
    #[arg(long, default_value_t = 0.002)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.05)]
    pub outlier_rate: f64,
    #[arg(long, default_value_t = 0.05)]
    pub dropout_rate: f64,
    /// Landmarks that drift independently of the hand.
    #[arg(long, default_value_t = 0)]
    pub movers: usize,
    #[arg(long, default_value_t = 4.0)]
    pub duration: f64,
    #[arg(long, default_value_t = 30.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Observation JSON Lines output.
    #[arg(long)]
    pub output: PathBuf,
    /// Ground-truth joint JSON output.
    #[arg(long)]
    pub gt_output: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `default`, `noiseless`, or a suite TOML file.
    #[arg(long, default_value = "default")]
    pub suite: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Report JSON from `estimate`, or a ground-truth joint JSON.
    #[arg(long)]
    pub estimate: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Self { code: EXIT_INPUT, message: message.into() }
    }

    fn config(message: impl Into<String>) -> Self {
        Self { code: EXIT_CONFIG, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::ConfigParse(_) | Error::NotPositiveDefinite(_) | Error::NotPositiveSemidefinite(_) => EXIT_CONFIG,
            _ => EXIT_INPUT,
        };
        Self { code, message: e.to_string() }
    }
}

fn with_path(path: &Path, e: impl std::fmt::Display) -> String {
    format!("{}: {e}", path.display())
}

fn config_from(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => load_config(p).map_err(|e| Failure::config(with_path(p, e))),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| Failure::input(with_path(path, e)))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let file = File::open(path).map_err(|e| Failure::input(with_path(path, e)))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Failure::input(with_path(path, e)))
}

/// Summary fields of an estimate report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    #[serde(flatten)]
    pub estimate: EstimateSummary,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tangent_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tangent_error_note: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frames_per_second: Option<f64>,
}

/// Tangent error of an axis against ground truth; estimates without an axis
/// score [`NO_AXIS_ERROR_DEG`] with a note.
fn score(axis: Option<JointAxis>, gt: &GroundTruthJoint) -> Result<(f64, Option<String>), Failure> {
    match axis {
        Some(a) => Ok((tangent_error_axis(&a, gt, DEFAULT_SAMPLES)?, None)),
        None => Ok((NO_AXIS_ERROR_DEG, Some("no joint axis estimated".into()))),
    }
}

pub fn cmd_estimate(args: &EstimateArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let cfg = config_from(args.config.as_deref())?;
    let gt: Option<GroundTruthJoint> = args.ground_truth.as_deref().map(read_json).transpose()?;
    let input: Box<dyn BufRead> = match (&args.input, args.live) {
        (Some(p), false) => Box::new(BufReader::new(File::open(p).map_err(|e| Failure::input(with_path(p, e)))?)),
        _ => Box::new(io::stdin().lock()),
    };
    let mut pipeline = Pipeline::new(cfg)?;
    let mut report = ReportWriter::new(create(&args.output)?)?;
    let started = Instant::now();
    for record in ObservationReader::new(input) {
        let belief = pipeline.step(&record?)?;
        report.frame(&belief)?;
        if args.live {
            report.flush()?;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    if pipeline.frames() == 0 {
        return Err(Error::NoFrames.into());
    }

    let estimate = EstimateSummary::from_pipeline(&pipeline);
    let (tangent_error, tangent_error_note) = match &gt {
        Some(g) => {
            let (e, note) = score(estimate.joint_axis(), g)?;
            (Some(e), note)
        }
        None => (None, None),
    };
    let frames_per_second = args.timing.then(|| pipeline.frames() as f64 / elapsed.max(1e-9));
    let summary = ReportSummary { estimate, tangent_error, tangent_error_note, frames_per_second };
    report.finish(&summary)?;

    let _ = writeln!(stdout, "joint_type: {}", summary.estimate.joint_type);
    if let Some(e) = summary.tangent_error {
        let _ = writeln!(stdout, "tangent_error: {e:.1}");
    }
    Ok(if summary.estimate.joint_type == JointType::Disconnected { EXIT_NOT_CONVERGED } else { EXIT_OK })
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32, Failure> {
    let (joint, default_q) = match args.joint {
        SimJoint::Prismatic => (JointType::Prismatic, 0.3),
        SimJoint::Revolute => (JointType::Revolute, std::f64::consts::FRAC_PI_2),
    };
    let params = ScenarioParams {
        duration: args.duration,
        rate: args.rate,
        noise: args.noise,
        outlier_rate: args.outlier_rate,
        dropout_rate: args.dropout_rate,
        movers: args.movers,
        ..ScenarioParams::default()
    };
    if !(params.noise >= 0.0) {
        return Err(Failure::input(format!("noise must be non-negative, got {}", params.noise)));
    }
    let scenario = Scenario::synthetic(joint, args.q_max.unwrap_or(default_q), &params, args.seed)?;
    let generated = generate(&scenario)?;
    write_records(create(&args.output)?, &generated.records)?;
    let mut gt = create(&args.gt_output)?;
    serde_json::to_writer_pretty(&mut gt, &generated.joint).map_err(Error::from)?;
    gt.write_all(b"\n").and_then(|_| gt.flush()).map_err(Error::from)?;
    Ok(EXIT_OK)
}

pub fn load_suite(name: &str) -> Result<Suite, Failure> {
    if let Some(s) = Suite::named(name) {
        return Ok(s);
    }
    let path = Path::new(name);
    let text = std::fs::read_to_string(path).map_err(|e| Failure::config(with_path(path, e)))?;
    Suite::from_toml_str(&text).map_err(|e| Failure::config(with_path(path, e)))
}

pub fn cmd_bench(args: &BenchArgs, stdout: &mut dyn Write) -> Result<i32, Failure> {
    let suite = load_suite(&args.suite)?;
    let cfg = config_from(args.config.as_deref())?;
    let rows = run_suite(&suite, &cfg);
    write_csv(create(&args.output_csv)?, &rows)?;
    for m in Method::ALL {
        if let Some(mean) = mean_error(&rows, m) {
            let _ = writeln!(stdout, "{m}: mean tangent error {mean:.2}");
        }
    }
    Ok(EXIT_OK)
}

/// Either side of an evaluation: an estimate report or a ground-truth file.
#[derive(Deserialize)]
#[serde(untagged)]
enum EstimateFile {
    Report(ReportSummary),
    Truth(GroundTruthJoint),
}

pub fn cmd_eval(args: &EvalArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, Failure> {
    let gt: GroundTruthJoint = read_json(&args.ground_truth)?;
    let (axis, est_type) = match read_json::<EstimateFile>(&args.estimate)? {
        EstimateFile::Truth(t) => (Some(t.axis), t.joint_type()),
        EstimateFile::Report(r) => (r.estimate.joint_axis(), r.estimate.joint_type),
    };
    let (error, note) = score(axis, &gt)?;
    let _ = writeln!(stdout, "{error:.1}");
    if est_type != gt.joint_type() {
        let _ = writeln!(stderr, "type mismatch: estimate is {est_type}, ground truth is {}", gt.joint_type());
    }
    if let Some(n) = note {
        let _ = writeln!(stderr, "{n}");
    }
    Ok(EXIT_OK)
}

/// Dispatches a parsed command line.
pub fn run(cli: &Cli) -> i32 {
    let (stdout, stderr) = (&mut io::stdout(), &mut io::stderr());
    let result = match &cli.command {
        Command::Estimate(a) => cmd_estimate(a, stdout),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Bench(a) => cmd_bench(a, stdout),
        Command::Eval(a) => cmd_eval(a, stdout, stderr),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(stderr, "error: {}", f.message);
            f.code
        }
    }
}

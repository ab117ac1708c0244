use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gafield::aero::AIR_DENSITY;
use gafield::data::Task;
use gafield::metrics::VectorMode;
use gafield::model::Injection;
use gafield::tensor::Real;

mod commands;
mod config;
mod manifest;

/// Thread count for data-parallel work; defaults to every core.
pub const THREADS_ENV: &str = "GAFIELD_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Diverged,
    Other,
}

impl ErrorKind {
    fn code(self) -> u8 {
        match self {
            ErrorKind::Other => 1,
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Diverged => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Data => "data",
            ErrorKind::Diverged => "divergence",
            ErrorKind::Other => "internal",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(m: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: m.into(),
        }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: m.into(),
        }
    }

    pub fn other(m: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Other,
            message: m.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.kind.name(), self.message.replace('\n', " "))
    }
}

impl From<gafield::Error> for CliError {
    fn from(e: gafield::Error) -> Self {
        use gafield::Error as E;
        let kind = match &e {
            E::Config(_) => ErrorKind::Config,
            E::Diverged(_) => ErrorKind::Diverged,
            E::InvalidCloud(_) | E::InvalidArgument(_) | E::Format(_) | E::UndefinedMetric(_) | E::Io(_) => {
                ErrorKind::Data
            }
            E::Tensor(_) => ErrorKind::Other,
        };
        let message = match e {
            E::Config(m) => m,
            other => other.to_string(),
        };
        Self {
            kind,
            message: message.trim().to_string(),
        }
    }
}

#[derive(Parser)]
#[command(name = "gafield", version, about = "Geometry-aware field prediction on point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InjectionArg {
    Full,
    NoGeometry,
    Off,
}

impl From<InjectionArg> for Injection {
    fn from(a: InjectionArg) -> Self {
        match a {
            InjectionArg::Full => Injection::Full,
            InjectionArg::NoGeometry => Injection::NoGeometry,
            InjectionArg::Off => Injection::Off,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VectorArg {
    Magnitude,
    Components,
}

impl From<VectorArg> for VectorMode {
    fn from(a: VectorArg) -> Self {
        match a {
            VectorArg::Magnitude => VectorMode::Magnitude,
            VectorArg::Components => VectorMode::Components,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TaskArg {
    Pressure,
    Wss,
    Velocity,
}

impl From<TaskArg> for Task {
    fn from(a: TaskArg) -> Self {
        match a {
            TaskArg::Pressure => Task::Pressure,
            TaskArg::Wss => Task::Wss,
            TaskArg::Velocity => Task::Velocity,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved run configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic corpus of analytic flows around spheres and ellipsoids.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write CSV instead of the binary container.
        #[arg(long)]
        csv: bool,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Train a model; writes checkpoints, a loss log and a manifest into `--out`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs; resume later with `--resume`.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Compute error metrics on a directory of samples.
    Eval {
        /// Model to run on every sample in `--data`.
        #[arg(long, requires = "data", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Directory of files written by `predict`, compared without running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Task of the prediction files.
        #[arg(long, value_enum, default_value = "pressure")]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "magnitude")]
        vector: VectorArg,
        #[arg(long, value_enum, default_value = "full")]
        injection: InjectionArg,
        /// Output directory for `metrics.csv` and `per_sample.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the checkpoint's field on one sample file.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Sample file (`.gpc` or `.csv`) with a `prediction` field added.
        #[arg(long)]
        out: PathBuf,
    },
    /// Part-wise drag from predicted pressure and wall shear stress.
    Drag {
        #[arg(long)]
        pressure: PathBuf,
        #[arg(long)]
        wss: PathBuf,
        /// Surface sample with normals and part labels.
        #[arg(long)]
        input: PathBuf,
        /// Air density in kg/m³.
        #[arg(long, default_value_t = AIR_DENSITY)]
        rho: Real,
        /// Spread this total area evenly instead of using per-point areas.
        #[arg(long)]
        total_area: Option<Real>,
        /// Report CSV.
        #[arg(long)]
        out: PathBuf,
        /// Optional bar-chart JSON.
        #[arg(long)]
        chart: Option<PathBuf>,
    },
}

fn init_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::other(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Config { cfg } => {
            print!(
                "{}",
                config::RunConfig::load(cfg.config.as_deref(), &cfg.set)?.to_toml()?
            );
            Ok(())
        }
        Command::Synth {
            out,
            cfg,
            csv,
            precision,
        } => commands::synth(&out, &cfg, csv, precision),
        Command::Train {
            cfg,
            out,
            resume,
            max_epochs,
        } => commands::train(&cfg, &out, resume.as_deref(), max_epochs),
        Command::Eval {
            checkpoint,
            data,
            predictions,
            task,
            vector,
            injection,
            out,
        } => {
            let source = match (checkpoint, data, predictions) {
                (Some(c), Some(d), None) => commands::EvalSource::Model {
                    checkpoint: c,
                    data: d,
                    injection: injection.into(),
                },
                (None, _, Some(p)) => commands::EvalSource::Predictions {
                    dir: p,
                    task: task.into(),
                },
                _ => {
                    return Err(CliError::config(
                        "eval needs --checkpoint with --data, or --predictions",
                    ))
                }
            };
            commands::eval(&source, vector.into(), &out)
        }
        Command::Predict { checkpoint, input, out } => commands::predict(&checkpoint, &input, &out),
        Command::Drag {
            pressure,
            wss,
            input,
            rho,
            total_area,
            out,
            chart,
        } => commands::drag(&pressure, &wss, &input, rho, total_area, &out, chart.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.code())
        }
    }
}

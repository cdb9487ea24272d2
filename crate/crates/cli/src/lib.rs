//! Command-line front end: dataset generation, training, inference,
//! evaluation and the analysis reports.

use std::ffi::OsString;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;

pub use config::RunConfig;
pub use error::CliError;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "E2P_THREADS";

#[derive(Debug, Parser)]
#[command(name = "e2p", version, about = "Single-step rectified-flow dense prediction toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantization error of depth mappings under bf16 storage.
    QuantAnalyze(Flags),
    /// Render a synthetic train/val dataset.
    GenData(Flags),
    /// Train a velocity network and write a checkpoint.
    Train(Flags),
    /// Predict latent maps for every sample of a split.
    Infer(Flags),
    /// Score predictions against a ground-truth split.
    Eval(Flags),
    /// Metrics as a function of sampler steps.
    StepsSweep(Flags),
    /// Finite-difference gradient verification report.
    GradCheck(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::QuantAnalyze(_) => "quant-analyze",
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Eval(_) => "eval",
            Command::StepsSweep(_) => "steps-sweep",
            Command::GradCheck(_) => "grad-check",
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Command::QuantAnalyze(f)
            | Command::GenData(f)
            | Command::Train(f)
            | Command::Infer(f)
            | Command::Eval(f)
            | Command::StepsSweep(f)
            | Command::GradCheck(f) => f,
        }
    }
}

/// Every flag is accepted syntactically; a flag that does not apply to the
/// chosen command is rejected when the config is resolved.
#[derive(Debug, Default, Args)]
pub struct Flags {
    #[arg(long)]
    pub seed: Option<u64>,
    /// depth, normal or matting.
    #[arg(long)]
    pub task: Option<String>,
    /// uni, sqrt, log or power:P. Repeatable for quant-analyze.
    #[arg(long)]
    pub mapping: Vec<String>,
    #[arg(long = "use-cons")]
    pub use_cons: Option<String>,
    /// Sampler step counts, N[,N...].
    #[arg(long)]
    pub steps: Option<String>,
    /// Depth range LO:HI in meters. Repeatable for quant-analyze.
    #[arg(long)]
    pub range: Vec<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// key=value settings file, overridden by flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Hidden widths of the network, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Directory of predictions to evaluate.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long = "n-train")]
    pub n_train: Option<usize>,
    #[arg(long = "n-val")]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long = "max-objects")]
    pub max_objects: Option<usize>,
    /// Uniform depth samples for the empirical quantization error.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Also scan power mappings and report the best exponent.
    #[arg(long = "power-sweep")]
    pub power_sweep: bool,
    /// Random points per loss in grad-check.
    #[arg(long)]
    pub points: Option<u64>,
}

impl Flags {
    /// Flags that were given, as config key/value pairs.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let joined = |v: &[String]| (!v.is_empty()).then(|| v.join(","));
        put("seed", self.seed.map(|v| v.to_string()));
        put("task", self.task.clone());
        put("mapping", joined(&self.mapping));
        put("use-cons", self.use_cons.clone());
        put("steps", self.steps.clone());
        put("range", joined(&self.range));
        put("data", path(&self.data));
        put("out", path(&self.out));
        put("ckpt", path(&self.ckpt));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("hidden", self.hidden.clone());
        put("pred", path(&self.pred));
        put("n-train", self.n_train.map(|v| v.to_string()));
        put("n-val", self.n_val.map(|v| v.to_string()));
        put("resolution", self.resolution.map(|v| v.to_string()));
        put("max-objects", self.max_objects.map(|v| v.to_string()));
        put("samples", self.samples.map(|v| v.to_string()));
        put("power-sweep", self.power_sweep.then(|| "true".to_string()));
        put("points", self.points.map(|v| v.to_string()));
        out
    }
}

/// Resolves the command's settings: defaults, then `--config`, then flags.
pub fn resolve(command: &Command) -> Result<RunConfig, CliError> {
    let flags = command.flags();
    RunConfig::resolve(command.name(), commands::defaults(command.name()), flags.config.as_deref(), &flags.pairs())
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    // A pool that already exists (repeated calls in one process) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Runs one parsed command, writing its report to `stdout`.
pub fn execute(command: &Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    configure_threads()?;
    let cfg = resolve(command)?;
    commands::run(&cfg, stdout)
}

/// Full entry point: parse, run, and map failures to a one-line
/// `error[category]: message` on stderr with a nonzero exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).render());
            return ExitCode::from(2);
        }
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    match execute(&cli.command, &mut lock) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = lock.flush();
            eprintln!("{}", e.render());
            ExitCode::from(if matches!(e, CliError::Usage(_)) { 2 } else { 1 })
        }
    }
}

//! Command implementations. Each reads a resolved [`RunConfig`], writes its
//! primary outputs plus the config receipt, and prints a short report.

use std::io::Write;

use crate::config::RunConfig;
use crate::error::CliError;

pub mod check;
pub mod data;
pub mod model;
pub mod quant;
pub mod train;

/// Default eval-time sampler steps.
pub const DEFAULT_STEPS: &str = "1";
/// Step grid of the sweep.
pub const SWEEP_STEPS: &str = "1,2,4,10,25";

/// Every key a command accepts, with its default. Empty means "required"
/// or, for model settings, "read from the checkpoint's receipt".
pub fn defaults(command: &str) -> &'static [(&'static str, &'static str)] {
    match command {
        "quant-analyze" => &[
            ("range", "0.1:10,0.1:80"),
            ("mapping", "uni,sqrt"),
            ("samples", "1000000"),
            ("seed", "0"),
            ("power-sweep", "false"),
            ("out", ""),
        ],
        "gen-data" => &[
            ("out", ""),
            ("seed", "0"),
            ("n-train", "500"),
            ("n-val", "100"),
            ("resolution", "64"),
            ("range", "0.1:80"),
            ("max-objects", "8"),
        ],
        "train" => &[
            ("data", ""),
            ("out", ""),
            ("task", "depth"),
            ("mapping", "sqrt"),
            ("use-cons", "true"),
            ("epochs", "3"),
            ("batch", train::DEFAULT_BATCH),
            ("lr", train::DEFAULT_LR),
            ("grad-clip", "1"),
            ("hidden", train::DEFAULT_HIDDEN),
            ("seed", "0"),
            ("steps", DEFAULT_STEPS),
        ],
        "infer" => &[
            ("ckpt", ""),
            ("data", ""),
            ("out", ""),
            ("steps", DEFAULT_STEPS),
            ("task", ""),
            ("mapping", ""),
            ("hidden", ""),
            ("seed", ""),
        ],
        "eval" => &[("pred", ""), ("data", ""), ("out", ""), ("task", ""), ("mapping", "")],
        "steps-sweep" => &[
            ("ckpt", ""),
            ("data", ""),
            ("out", ""),
            ("steps", SWEEP_STEPS),
            ("task", ""),
            ("mapping", ""),
            ("hidden", ""),
            ("seed", ""),
        ],
        "grad-check" => &[("points", "10"), ("out", "")],
        _ => &[],
    }
}

pub fn run(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    match cfg.command() {
        "quant-analyze" => quant::run(cfg, out),
        "gen-data" => data::run(cfg, out),
        "train" => train::run(cfg, out).map(|_| ()),
        "infer" => model::infer(cfg, out),
        "eval" => model::eval(cfg, out).map(|_| ()),
        "steps-sweep" => model::sweep(cfg, out).map(|_| ()),
        "grad-check" => check::run(cfg, out),
        other => Err(CliError::Usage(format!("unknown command `{other}`"))),
    }
}

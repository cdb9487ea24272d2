use std::io;

use e2p_core::{EncodingError, FlowError, MetricError, NnError, QuantError, SynthError, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

impl CliError {
    /// Stable machine-readable category printed in `error[...]`.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::CheckFailed(_) => "check",
            CliError::Io(_) => "io",
            CliError::Quant(_) => "quant",
            CliError::Synth(SynthError::Io(_)) => "io",
            CliError::Synth(_) => "data",
            CliError::Tensor(TensorError::Io(_)) => "io",
            CliError::Tensor(_) | CliError::Encoding(_) => "data",
            CliError::Metric(_) => "metric",
            CliError::Flow(_) => "flow",
            CliError::Nn(e) => match e {
                NnError::Corrupt(_) | NnError::VersionMismatch(_) | NnError::HashMismatch { .. } => "checkpoint",
                NnError::ShapeMismatch { .. } => "shape",
                NnError::Diverged(_) => "diverged",
                NnError::Config(_) => "config",
                NnError::Io(_) | NnError::Tensor(TensorError::Io(_)) => "io",
                NnError::Tensor(_) | NnError::Encoding(_) => "data",
                _ => "model",
            },
        }
    }

    /// `error[category]: message` on a single line.
    pub fn render(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.category(), msg)
    }
}

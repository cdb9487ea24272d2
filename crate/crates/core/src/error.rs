use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unsupported dtype code {0}")]
    BadDtype(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("expected rank 3, found rank {0}")]
    BadRank(u32),
    #[error("tensor has a zero-sized dimension")]
    EmptyTensor,
    #[error("channels must be 1 or 3, got {0}")]
    BadChannels(usize),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("range violation: {0}")]
    RangeViolation(String),
    #[error("invalid metadata: {0}")]
    InvalidMeta(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("degenerate range [{lo}, {hi}]")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("mapping {0} is undefined on the requested range")]
    MappingUndefined(String),
    #[error("non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("quadrature needs at least 1000 intervals, got {0}")]
    TooFewNodes(usize),
    #[error("power grid must contain 0.5")]
    GridMissingHalf,
    #[error("unknown mapping `{0}`")]
    UnknownMapping(String),
}

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("need at least 2 valid pixels, found {0}")]
    TooFewValid(usize),
    #[error("degenerate percentile range: p2 == p98 == {0}")]
    DegenerateRange(f64),
    #[error("zero-norm vector at pixel {0}")]
    ZeroNorm(usize),
    #[error("declared range does not allow normalization: {0}")]
    UndeclaredRange(String),
    #[error("point prompt must contain 1..=10 in-bounds points")]
    InvalidPrompt,
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("timestep {0} outside [0, 1]")]
    BadTimestep(f64),
    #[error("sampler needs at least one step")]
    ZeroSteps,
    #[error("model returned shape {got:?}, expected {expected:?}")]
    ModelShape { expected: [usize; 3], got: [usize; 3] },
    #[error("velocity model failed: {0}")]
    Model(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum LossError {
    #[error("degenerate scale-shift fit: prediction is constant over valid pixels")]
    DegenerateFit,
    #[error("need at least {needed} valid pixels, found {found}")]
    TooFewValid { needed: usize, found: usize },
    #[error("zero-norm prediction at pixel {0}")]
    ZeroNorm(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no valid pixels")]
    NoValidPixels,
    #[error("non-positive value {0}")]
    NonPositive(f64),
    #[error("zero-norm vector at pixel {0}")]
    ZeroNorm(usize),
    #[error("alpha value {0} outside [0, 1]")]
    RangeViolation(f64),
    #[error("ranking needs at least two methods")]
    TooFewMethods,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("loss node {0} is not a scalar on this tape")]
    NotScalar(usize),
    #[error("loss node is disconnected from every parameter")]
    Disconnected,
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint version {0} is not supported")]
    VersionMismatch(u32),
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("checkpoint tensor `{name}` has shape {found:?}, network expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("training diverged: total loss {0}")]
    Diverged(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("resolution must be at least 16, got {0}")]
    Resolution(usize),
    #[error("object count must be in 1..=8, got {0}")]
    ObjectCount(usize),
    #[error("invalid depth range [{0}, {1}]")]
    DepthRange(f64, f64),
    #[error("split counts must be at least 1")]
    EmptySplit,
    #[error("output directory {0} exists and is not empty")]
    DirectoryNotEmpty(String),
    #[error("manifest problem: {0}")]
    Manifest(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

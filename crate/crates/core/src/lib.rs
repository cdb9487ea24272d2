//! Depth, normal and matting estimation by single-step rectified flow.

pub mod dtf;
pub mod encoding;
pub mod error;
pub mod flow;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod tensor;

pub use error::{EncodingError, FlowError, LossError, MetricError, NnError, QuantError, SynthError, TensorError};
pub use rng::SeededRng;
pub use tensor::{DenseMap, Mask, Task, ValueRange};

//! Autodiff tape, velocity network, optimizer, trainer and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod net;
pub mod optim;
pub mod tape;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{NetConfig, VelocityNet};
pub use optim::Adam;
pub use tape::{Activation, NodeId, Tape, Value};
pub use train::{evaluate, infer, prepare_example, prepare_examples, train_step, Example, Trainer, TrainerConfig};

//! File formats, checkpoints, the reply engine, the HTTP service and the
//! command-line front end around `seqchat-core`.

pub mod checkpoint;
pub mod cli;
pub mod engine;
pub mod formats;
pub mod service;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use engine::{ChatEngine, EngineError, Reply};
pub use formats::{Dataset, FormatError};

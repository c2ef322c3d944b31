//! Core of the seqchat engine.
//!
//! Everything here needs only `alloc`: the dense matrix kernel and its
//! reverse-mode tape, the dialog-corpus pipeline, the attention seq2seq
//! model, the training loop and the decoders. File formats, the CLI and the
//! HTTP service live in the `seqchat` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod corpus;
pub mod decode;
pub mod error;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::ShapeError;
pub use tape::{Gradients, OpKind, Tape, TapeError, Var};
pub use tensor::{Scalar, Tensor2};

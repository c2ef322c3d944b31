//! Bidirectional-LSTM encoder, additive-attention LSTM decoder.

pub mod attention;
pub mod cell;
pub mod config;
pub mod params;
pub mod seq2seq;

use thiserror::Error;

use crate::error::ShapeError;

pub use attention::{attention_context, attention_energies, AttentionMemory, MASKED_ENERGY};
pub use cell::{lstm_step, rnn_step, LstmStep};
pub use config::{ConfigError, ModelConfig};
pub use params::{BoundParams, Lstm, ParamSet, Seq2SeqParams};
pub use seq2seq::{
    decoder_step, embed_lookup, encode_bidirectional, encoder_output, forward_teacher_forced, Dropout, Encoded,
    LayerState, StepOutput, TeacherForced,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    IndexOutOfVocab { id: usize, vocab: usize },
    #[error("empty batch or zero-length sequence")]
    EmptyBatch,
    #[error("sequences in a batch must have equal length")]
    RaggedBatch,
}

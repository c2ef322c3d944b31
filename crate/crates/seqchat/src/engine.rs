//! The reply pipeline shared by the terminal chat and the HTTP service.

use std::time::Instant;

use seqchat_core::corpus::Vocab;
use seqchat_core::decode::{chat_reply, ChatModel, DecodeConfig};
use seqchat_core::model::{ModelConfig, ModelError, Seq2SeqParams};
use serde::Serialize;
use thiserror::Error;

use crate::checkpoint::Checkpoint;

/// Longest accepted input, in characters.
pub const MAX_INPUT_CHARS: usize = 2000;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reply {
    pub reply: String,
    pub fallback_used: bool,
    /// Wall time of the model call alone.
    pub latency_ms: f64,
}

pub struct ChatEngine {
    params: Seq2SeqParams<f32>,
    vocab: Vocab,
    config: ModelConfig,
    decode: DecodeConfig,
}

impl ChatEngine {
    /// Decodes with the checkpoint's beam width unless `beam_width` is given.
    /// Replies are capped at the largest bucket's target capacity.
    pub fn new(checkpoint: Checkpoint, beam_width: Option<usize>) -> Self {
        let Checkpoint { params, vocab, config, .. } = checkpoint;
        let max_steps = config.buckets.iter().map(|b| b.tgt_cap).max().unwrap_or(1);
        let decode = DecodeConfig::new(beam_width.unwrap_or(config.beam_width).max(1), max_steps);
        Self { params, vocab, config, decode }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn beam_width(&self) -> usize {
        self.decode.beam_width
    }

    pub fn reply(&self, text: &str) -> Result<Reply, EngineError> {
        if text.trim().is_empty() {
            return Err(EngineError::BadRequest("text is empty".into()));
        }
        let chars = text.chars().count();
        if chars > MAX_INPUT_CHARS {
            return Err(EngineError::BadRequest(format!("text has {chars} characters, limit is {MAX_INPUT_CHARS}")));
        }
        let model = ChatModel {
            params: &self.params,
            vocab: &self.vocab,
            buckets: &self.config.buckets,
            reverse_source: self.config.reverse_source,
            decode: self.decode,
        };
        let started = Instant::now();
        let out = chat_reply(&model, text)?;
        let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        Ok(Reply { reply: out.text, fallback_used: out.fallback_used, latency_ms })
    }
}

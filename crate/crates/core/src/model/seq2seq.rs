use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use super::attention::{attention_context, AttentionMemory};
use super::cell::{carry, lstm_step};
use super::params::BoundParams;
use super::ModelError;
use crate::corpus::{TokenId, PAD};
use crate::error::ShapeError;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor2};

/// Inverted dropout: kept units are scaled by `1 / keep` at training time so
/// inference runs the same graph with dropout off.
pub struct Dropout<'r> {
    keep: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self { keep: 1.0, rng: None }
    }

    pub fn new(keep: f64, rng: &'r mut dyn RngCore) -> Self {
        Self { keep, rng: Some(rng) }
    }

    pub fn is_active(&self) -> bool {
        self.keep < 1.0 && self.rng.is_some()
    }

    pub fn apply<T: Scalar>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, ShapeError> {
        let keep = self.keep;
        let Some(rng) = self.rng.as_deref_mut().filter(|_| keep < 1.0) else {
            return Ok(x);
        };
        let (rows, cols) = tape.value(x).shape();
        let scale = T::lit(1.0 / keep);
        let data = (0..rows * cols).map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() }).collect();
        let mask = tape.constant(Tensor2::from_vec(rows, cols, data)?);
        tape.hadamard(x, mask)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerState {
    pub h: Var,
    pub c: Var,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub memory: AttentionMemory,
    /// Initial decoder state per layer: `h = tanh(B · [h_fwd; h_bwd])`, `c = 0`.
    pub initial: Vec<LayerState>,
}

fn check_ids(ids: impl IntoIterator<Item = TokenId>, vocab: usize) -> Result<(), ModelError> {
    for id in ids {
        if id >= vocab {
            return Err(ModelError::IndexOutOfVocab { id, vocab });
        }
    }
    Ok(())
}

/// Looks rows of the embedding table up; gradients scatter back into them.
pub fn embed_lookup<T: Scalar>(tape: &mut Tape<'_, T>, embedding: Var, ids: &[TokenId]) -> Result<Var, ModelError> {
    check_ids(ids.iter().copied(), tape.value(embedding).rows())?;
    Ok(tape.gather_rows(embedding, ids)?)
}

/// Runs the bidirectional encoder over a batch of equally long sources.
///
/// PAD steps carry the previous state through unchanged, so padding has no
/// influence on the final states or on any unmasked encoder output.
pub fn encode_bidirectional<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &BoundParams,
    src: &[Vec<TokenId>],
    dropout: &mut Dropout<'_>,
) -> Result<Encoded, ModelError> {
    let batch = src.len();
    let len = src.first().map_or(0, Vec::len);
    if batch == 0 || len == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if src.iter().any(|s| s.len() != len) {
        return Err(ModelError::RaggedBatch);
    }
    let vocab = tape.value(p.embedding).rows();
    check_ids(src.iter().flatten().copied(), vocab)?;
    let rnn = tape.value(p.attn_w).rows();

    let valid: Vec<Vec<bool>> = src.iter().map(|s| s.iter().map(|&t| t != PAD).collect()).collect();
    let valid_cols: Vec<Var> = (0..len)
        .map(|j| {
            let col: Vec<T> = valid.iter().map(|row| if row[j] { T::one() } else { T::zero() }).collect();
            tape.constant(Tensor2::column(&col))
        })
        .collect();

    let mut inputs = Vec::with_capacity(len);
    for j in 0..len {
        let ids: Vec<TokenId> = src.iter().map(|s| s[j]).collect();
        inputs.push(tape.gather_rows(p.embedding, &ids)?);
    }

    let mut finals = Vec::with_capacity(p.encoder_fwd.len());
    for (fwd, bwd) in p.encoder_fwd.iter().zip(&p.encoder_bwd) {
        let mut outs_f = Vec::with_capacity(len);
        let mut h = tape.constant(Tensor2::zeros(batch, rnn));
        let mut c = h;
        for j in 0..len {
            let step = lstm_step(tape, inputs[j], h, c, fwd)?;
            h = carry(tape, step.h, h, valid_cols[j])?;
            c = carry(tape, step.c, c, valid_cols[j])?;
            outs_f.push(h);
        }
        let h_fwd = h;

        let mut outs_b = vec![h; len];
        let mut h = tape.constant(Tensor2::zeros(batch, rnn));
        let mut c = h;
        for j in (0..len).rev() {
            let step = lstm_step(tape, inputs[j], h, c, bwd)?;
            h = carry(tape, step.h, h, valid_cols[j])?;
            c = carry(tape, step.c, c, valid_cols[j])?;
            outs_b[j] = h;
        }
        finals.push(tape.concat_cols(&[h_fwd, h])?);
        inputs = outs_f.iter().zip(&outs_b).map(|(&f, &b)| tape.concat_cols(&[f, b])).collect::<Result<_, _>>()?;
    }

    let values = inputs.into_iter().map(|h| dropout.apply(tape, h)).collect::<Result<Vec<_>, _>>()?;
    let mut initial = Vec::with_capacity(p.decoder.len());
    for (layer, &bridge) in p.bridge.iter().enumerate() {
        let last = finals[layer.min(finals.len() - 1)];
        let pre = tape.matmul_nt(last, bridge)?;
        let h = tape.tanh(pre);
        let c = tape.constant(Tensor2::zeros(batch, rnn));
        initial.push(LayerState { h, c });
    }
    let memory = AttentionMemory::new(tape, values, p.attn_u, &valid)?;
    Ok(Encoded { memory, initial })
}

/// Encoder states of one batch row as a `src_len × 2·rnn` matrix, plus the
/// first layer's initial decoder state.
pub fn encoder_output<T: Scalar>(tape: &Tape<'_, T>, enc: &Encoded, row: usize) -> (Tensor2<T>, Tensor2<T>) {
    let width = enc.memory.values.first().map_or(0, |&v| tape.value(v).cols());
    let mut h = Tensor2::zeros(enc.memory.len(), width);
    for (j, &v) in enc.memory.values.iter().enumerate() {
        h.row_mut(j).copy_from_slice(tape.value(v).row(row));
    }
    let s0 = tape.value(enc.initial[0].h);
    (h, Tensor2::row_vector(s0.row(row)))
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub state: Vec<LayerState>,
    pub logits: Var,
    pub alpha: Var,
    pub context: Var,
}

/// One decoder step: attend with the previous top-layer state, feed
/// `[embed(y_prev); context]` through the LSTM stack, project to the
/// vocabulary.
pub fn decoder_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &BoundParams,
    memory: &AttentionMemory,
    y_prev: &[TokenId],
    state: &[LayerState],
    dropout: &mut Dropout<'_>,
) -> Result<StepOutput, ModelError> {
    let top = state.last().ok_or(ModelError::EmptyBatch)?;
    let (context, alpha) = attention_context(tape, top.h, memory, p.attn_w, p.attn_v)?;
    let embedded = embed_lookup(tape, p.embedding, y_prev)?;
    let mut input = tape.concat_cols(&[embedded, context])?;
    let mut next = Vec::with_capacity(state.len());
    for (layer, s) in p.decoder.iter().zip(state) {
        let step = lstm_step(tape, input, s.h, s.c, layer)?;
        next.push(LayerState { h: step.h, c: step.c });
        input = step.h;
    }
    let out = dropout.apply(tape, input)?;
    let logits = tape.matmul_nt(out, p.out_w)?;
    let logits = tape.add_row(logits, p.out_b)?;
    Ok(StepOutput { state: next, logits, alpha, context })
}

#[derive(Debug, Clone)]
pub struct TeacherForced {
    /// Mean cross-entropy over non-PAD target positions, `1 × 1`.
    pub loss: Var,
    /// Per decoder step, `batch × vocab`.
    pub logits: Vec<Var>,
    /// Per decoder step, the token each row should predict.
    pub targets: Vec<Vec<TokenId>>,
    pub tokens: usize,
}

/// Unrolls the decoder over the ground-truth targets. Step `t` reads
/// `tgt[t]` (starting at GO) and predicts `tgt[t + 1]`; PAD targets are
/// masked out of the loss.
pub fn forward_teacher_forced<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &BoundParams,
    src: &[Vec<TokenId>],
    tgt: &[Vec<TokenId>],
    dropout: &mut Dropout<'_>,
) -> Result<TeacherForced, ModelError> {
    if src.len() != tgt.len() {
        return Err(ModelError::RaggedBatch);
    }
    let steps = tgt.first().map_or(0, Vec::len).saturating_sub(1);
    if tgt.iter().any(|t| t.len() != steps + 1) {
        return Err(ModelError::RaggedBatch);
    }
    check_ids(tgt.iter().flatten().copied(), tape.value(p.out_w).rows())?;
    let enc = encode_bidirectional(tape, p, src, dropout)?;
    let mut state = enc.initial.clone();
    let mut total: Option<Var> = None;
    let mut logits = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps);
    let mut tokens = 0;
    for t in 0..steps {
        let y_prev: Vec<TokenId> = tgt.iter().map(|row| row[t]).collect();
        let y_next: Vec<TokenId> = tgt.iter().map(|row| row[t + 1]).collect();
        let out = decoder_step(tape, p, &enc.memory, &y_prev, &state, dropout)?;
        let weights: Vec<T> = y_next.iter().map(|&y| if y == PAD { T::zero() } else { T::one() }).collect();
        tokens += y_next.iter().filter(|&&y| y != PAD).count();
        let nll = tape.nll_sum(out.logits, &y_next, &weights)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, nll)?,
            None => nll,
        });
        state = out.state;
        logits.push(out.logits);
        targets.push(y_next);
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(Tensor2::zeros(1, 1)),
    };
    let k = if tokens == 0 { T::zero() } else { T::one() / T::lit(tokens as f64) };
    let loss = tape.scale(total, k);
    Ok(TeacherForced { loss, logits, targets, tokens })
}

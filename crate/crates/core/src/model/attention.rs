//! Additive attention.
//!
//! The energy of source position `j` for the decoder state `s` is
//! `v · tanh(W·s + U·h_j)`. PAD positions get [`MASKED_ENERGY`] so the softmax
//! gives them zero weight. The context is the weight-averaged `h_j`.

use alloc::vec::Vec;

use crate::error::ShapeError;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor2};

pub const MASKED_ENERGY: f64 = -1e9;

/// Encoder states prepared for attention.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    /// `h_j`, one `batch × 2·rnn` node per source position.
    pub values: Vec<Var>,
    /// `U·h_j`, precomputed once per source.
    pub keys: Vec<Var>,
    /// `batch × src_len`, 0 at real tokens and [`MASKED_ENERGY`] at PAD.
    pub mask: Var,
}

impl AttentionMemory {
    pub fn new<T: Scalar>(
        tape: &mut Tape<'_, T>,
        values: Vec<Var>,
        attn_u: Var,
        valid: &[Vec<bool>],
    ) -> Result<Self, ShapeError> {
        let keys = values.iter().map(|&h| tape.matmul_nt(h, attn_u)).collect::<Result<Vec<_>, _>>()?;
        let mask = tape.constant(energy_mask(valid, values.len()));
        Ok(Self { values, keys, mask })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `valid[b][j]` says whether position `j` of row `b` is a real token.
pub fn energy_mask<T: Scalar>(valid: &[Vec<bool>], src_len: usize) -> Tensor2<T> {
    let mut m = Tensor2::zeros(valid.len(), src_len);
    for (b, row) in valid.iter().enumerate() {
        for (j, &ok) in row.iter().enumerate() {
            if !ok {
                m.set(b, j, T::lit(MASKED_ENERGY));
            }
        }
    }
    m
}

/// Masked energies, `batch × src_len`.
pub fn attention_energies<T: Scalar>(
    tape: &mut Tape<'_, T>,
    s_prev: Var,
    memory: &AttentionMemory,
    attn_w: Var,
    attn_v: Var,
) -> Result<Var, ShapeError> {
    let query = tape.matmul_nt(s_prev, attn_w)?;
    let mut cols = Vec::with_capacity(memory.len());
    for &key in &memory.keys {
        let pre = tape.add(query, key)?;
        let hidden = tape.tanh(pre);
        cols.push(tape.matmul_nt(hidden, attn_v)?);
    }
    let energies = tape.concat_cols(&cols)?;
    tape.add(energies, memory.mask)
}

/// Returns `(context, weights)`: weights are the row softmax of the
/// energies, the context is `Σ_j weights[:, j] ⊙ h_j`.
pub fn attention_context<T: Scalar>(
    tape: &mut Tape<'_, T>,
    s_prev: Var,
    memory: &AttentionMemory,
    attn_w: Var,
    attn_v: Var,
) -> Result<(Var, Var), ShapeError> {
    let energies = attention_energies(tape, s_prev, memory, attn_w, attn_v)?;
    let alpha = tape.softmax_rows(energies);
    let mut context: Option<Var> = None;
    for (j, &h) in memory.values.iter().enumerate() {
        let a = tape.slice_cols(alpha, j, 1)?;
        let term = tape.mul_col(h, a)?;
        context = Some(match context {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let context = context.ok_or(ShapeError::Mismatch { op: "attention_context", left: (0, 0), right: (0, 0) })?;
    Ok((context, alpha))
}

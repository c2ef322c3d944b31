//! Recurrent cells on the tape. Inputs and states are batches of row vectors
//! (`batch × features`); weights are stored `out × in` and applied as
//! `x · Wᵀ`.

use crate::error::ShapeError;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

use super::params::Lstm;

/// Plain recurrent step `h = tanh(W·h_prev + U·x)`.
pub fn rnn_step<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, h_prev: Var, w: Var, u: Var) -> Result<Var, ShapeError> {
    let rec = tape.matmul_nt(h_prev, w)?;
    let inp = tape.matmul_nt(x, u)?;
    let pre = tape.add(rec, inp)?;
    Ok(tape.tanh(pre))
}

#[derive(Debug, Clone, Copy)]
pub struct LstmStep {
    pub h: Var,
    pub c: Var,
    pub forget: Var,
    pub input: Var,
    pub output: Var,
    pub candidate: Var,
}

/// One LSTM step:
/// `[f; i; o; g] = W·x + U·h_prev + b`, gates squashed by the sigmoid and the
/// candidate by tanh, `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    p: &Lstm<Var>,
) -> Result<LstmStep, ShapeError> {
    let r = tape.value(p.u).cols();
    let zx = tape.matmul_nt(x, p.w)?;
    let zh = tape.matmul_nt(h_prev, p.u)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, p.b)?;
    let f = tape.slice_cols(z, 0, r)?;
    let i = tape.slice_cols(z, r, r)?;
    let o = tape.slice_cols(z, 2 * r, r)?;
    let g = tape.slice_cols(z, 3 * r, r)?;
    let forget = tape.sigmoid(f);
    let input = tape.sigmoid(i);
    let output = tape.sigmoid(o);
    let candidate = tape.tanh(g);
    let keep = tape.hadamard(forget, c_prev)?;
    let write = tape.hadamard(input, candidate)?;
    let c = tape.add(keep, write)?;
    let squashed = tape.tanh(c);
    let h = tape.hadamard(output, squashed)?;
    Ok(LstmStep { h, c, forget, input, output, candidate })
}

/// `prev + valid ⊙ (next − prev)` with `valid` a `batch × 1` column of 0/1:
/// rows flagged 0 keep their previous state exactly.
pub fn carry<T: Scalar>(tape: &mut Tape<'_, T>, next: Var, prev: Var, valid: Var) -> Result<Var, ShapeError> {
    let delta = tape.sub(next, prev)?;
    let gated = tape.mul_col(delta, valid)?;
    tape.add(prev, gated)
}

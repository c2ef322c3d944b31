//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records every primitive in execution order, so the node list is
//! already topologically sorted. [`Tape::backward`] walks it once in reverse,
//! visiting each node exactly once and accumulating into its inputs.
//!
//! Parameters enter the tape by reference ([`Tape::param`]); nothing is
//! copied, which matters when the output projection alone is tens of
//! megabytes. Inputs and constants are owned ([`Tape::constant`]) and are not
//! differentiated.

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::error::ShapeError;
use crate::tensor::{softmax_in_place, Scalar, Tensor2};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for fault injection in the gradient checker's
/// self-test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulNt,
    Add,
    Sub,
    Hadamard,
    Scale,
    AddConst,
    Tanh,
    Sigmoid,
    AddRow,
    MulCol,
    ConcatCols,
    SliceCols,
    GatherRows,
    SoftmaxRows,
    NllSum,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TapeError {
    #[error("loss must be a 1x1 tensor, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("variable {index} does not belong to this tape ({len} nodes)")]
    UnknownVar { index: usize, len: usize },
    #[error("gradient shape {got:?} does not match node shape {expected:?} at node {index}")]
    Inconsistent { index: usize, expected: (usize, usize), got: (usize, usize) },
}

#[derive(Clone)]
enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols { src: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    SoftmaxRows(Var),
    NllSum { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Tensor2<T> },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulNt(..) => OpKind::MatMulNt,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Scale(..) => OpKind::Scale,
            Op::AddConst(..) => OpKind::AddConst,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulCol(..) => OpKind::MulCol,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::NllSum { .. } => OpKind::NllSum,
        }
    }
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor2<T>>,
    op: Op<T>,
    tracked: bool,
}

pub struct Tape<'p, T: Scalar = f32> {
    nodes: Vec<Node<'p, T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`]. Untracked nodes and nodes the loss does not
/// depend on have no entry.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor2<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor2<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the backward rule of one primitive kind by 1.5. Only for
    /// checking that the gradient checker notices a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    /// A differentiable leaf borrowed from the caller.
    pub fn param(&mut self, t: &'p Tensor2<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// A differentiable leaf owned by the tape.
    pub fn variable(&mut self, t: Tensor2<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor2<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor2<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'p, Tensor2<T>>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn record(&mut self, value: Tensor2<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = self.tracked(inputs);
        self.push(Cow::Owned(value), op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let y = self.value(a).matmul(self.value(b))?;
        Ok(self.record(y, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let y = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.record(y, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.record(y, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.record(y, Op::Sub(a, b), &[a, b]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let y = self.value(a).hadamard(self.value(b))?;
        Ok(self.record(y, Op::Hadamard(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let y = self.value(a).scale(k);
        self.record(y, Op::Scale(a, k), &[a])
    }

    pub fn add_const(&mut self, a: Var, k: T) -> Var {
        let y = self.value(a).add_const(k);
        self.record(y, Op::AddConst(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).tanh();
        self.record(y, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).sigmoid();
        self.record(y, Op::Sigmoid(a), &[a])
    }

    /// Adds the `1 × cols` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, ShapeError> {
        let y = self.value(a).add_row(self.value(bias))?;
        Ok(self.record(y, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Scales row `r` of `a` by `col[r]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, ShapeError> {
        let y = self.value(a).mul_col(self.value(col))?;
        Ok(self.record(y, Op::MulCol(a, col), &[a, col]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let values: Vec<&Tensor2<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor2::concat_cols(&values)?;
        Ok(self.record(y, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Result<Var, ShapeError> {
        let y = self.value(src).slice_cols(start, width)?;
        Ok(self.record(y, Op::SliceCols { src, start }, &[src]))
    }

    /// Row `i` of the result is row `ids[i]` of `table`. Backward scatters
    /// into the table rows.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, ShapeError> {
        let y = self.value(table).gather_rows(ids)?;
        Ok(self.record(y, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = self.value(a).softmax_rows();
        self.record(y, Op::SoftmaxRows(a), &[a])
    }

    /// `Σ_r weights[r] · −log softmax(logits_r)[targets[r]]` as a `1 × 1`
    /// node. A zero weight masks the row out.
    pub fn nll_sum(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var, ShapeError> {
        let x = self.value(logits);
        if targets.len() != x.rows() || weights.len() != x.rows() {
            return Err(ShapeError::Mismatch { op: "nll_sum", left: x.shape(), right: (targets.len(), 1) });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= x.cols()) {
            return Err(ShapeError::RowIndex { index: bad, rows: x.cols() });
        }
        let mut probs = x.clone();
        let mut total = T::zero();
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = probs.row_mut(r);
            softmax_in_place(row);
            if w != T::zero() {
                total = total - w * log_prob(x.row(r), t);
            }
        }
        let op = Op::NllSum { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.record(Tensor2::filled(1, 1, total), op, &[logits]))
    }

    /// Mean of the masked per-row negative log-likelihood; zero (with zero
    /// gradient) when every row is masked.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, ShapeError> {
        let weights: Vec<T> = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
        let total = self.nll_sum(logits, targets, &weights)?;
        let count = mask.iter().filter(|&&m| m).count();
        let k = if count == 0 { T::zero() } else { T::one() / T::lit(count as f64) };
        Ok(self.scale(total, k))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TapeError> {
        let n = self.nodes.len();
        if loss.0 >= n {
            return Err(TapeError::UnknownVar { index: loss.0, len: n });
        }
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(TapeError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor2<T>>> = vec![None; n];
        grads[loss.0] = Some(Tensor2::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            if g.shape() != node.value.shape() {
                return Err(TapeError::Inconsistent { index: idx, expected: node.value.shape(), got: g.shape() });
            }
            if self.fault == Some(node.op.kind()) {
                g = g.scale(T::lit(1.5));
            }
            self.propagate(idx, &g, &mut grads)?;
        }
        // Only leaf gradients survive; intermediates were taken above.
        Ok(Gradients { grads })
    }

    fn check_index(&self, v: Var, idx: usize) -> Result<(), TapeError> {
        if v.0 >= idx {
            return Err(TapeError::UnknownVar { index: v.0, len: idx });
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor2<T>>], v: Var, g: Tensor2<T>) -> Result<(), TapeError> {
        if !self.nodes[v.0].tracked {
            return Ok(());
        }
        let expected = self.nodes[v.0].value.shape();
        if g.shape() != expected {
            return Err(TapeError::Inconsistent { index: v.0, expected, got: g.shape() });
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g).expect("shape checked"),
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor2<T>, grads: &mut [Option<Tensor2<T>>]) -> Result<(), TapeError> {
        let y = &*self.nodes[idx].value;
        let inconsistent = |_e: ShapeError| TapeError::Inconsistent { index: idx, expected: y.shape(), got: g.shape() };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                self.check_index(*a, idx)?;
                self.check_index(*b, idx)?;
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    self.accumulate(grads, *a, g.matmul_nt(bv).map_err(inconsistent)?)?;
                }
                if self.nodes[b.0].tracked {
                    self.accumulate(grads, *b, av.matmul_tn(g).map_err(inconsistent)?)?;
                }
            }
            Op::MatMulNt(a, b) => {
                self.check_index(*a, idx)?;
                self.check_index(*b, idx)?;
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    self.accumulate(grads, *a, g.matmul(bv).map_err(inconsistent)?)?;
                }
                if self.nodes[b.0].tracked {
                    self.accumulate(grads, *b, g.matmul_tn(av).map_err(inconsistent)?)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-T::one()))?;
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].tracked {
                    self.accumulate(grads, *a, g.hadamard(bv).map_err(inconsistent)?)?;
                }
                if self.nodes[b.0].tracked {
                    self.accumulate(grads, *b, g.hadamard(av).map_err(inconsistent)?)?;
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k))?,
            Op::AddConst(a) => self.accumulate(grads, *a, g.clone())?,
            Op::Tanh(a) => {
                let d = g.zip_with(y, "tanh'", |g, y| g * (T::one() - y * y)).map_err(inconsistent)?;
                self.accumulate(grads, *a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = g.zip_with(y, "sigmoid'", |g, y| g * y * (T::one() - y)).map_err(inconsistent)?;
                self.accumulate(grads, *a, d)?;
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone())?;
                if self.nodes[bias.0].tracked {
                    let mut gb = Tensor2::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc = *acc + v;
                        }
                    }
                    self.accumulate(grads, *bias, gb)?;
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.nodes[a.0].tracked {
                    self.accumulate(grads, *a, g.mul_col(cv).map_err(inconsistent)?)?;
                }
                if self.nodes[col.0].tracked {
                    let mut gc = Tensor2::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        let s = crate::tensor::dot(g.row(r), av.row(r));
                        gc.set(r, 0, s);
                    }
                    self.accumulate(grads, *col, gc)?;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let width = self.value(*p).cols();
                    if self.nodes[p.0].tracked {
                        self.accumulate(grads, *p, g.slice_cols(start, width).map_err(inconsistent)?)?;
                    }
                    start += width;
                }
            }
            Op::SliceCols { src, start } => {
                if self.nodes[src.0].tracked {
                    let (rows, cols) = self.value(*src).shape();
                    let mut d = Tensor2::zeros(rows, cols);
                    for r in 0..rows {
                        d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.accumulate(grads, *src, d)?;
                }
            }
            Op::GatherRows { table, ids } => {
                if self.nodes[table.0].tracked {
                    let (rows, cols) = self.value(*table).shape();
                    let acc = grads[table.0].get_or_insert_with(|| Tensor2::zeros(rows, cols));
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, &v) in acc.row_mut(id).iter_mut().zip(g.row(r)) {
                            *a = *a + v;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let mut d = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = crate::tensor::dot(g.row(r), y.row(r));
                    for ((o, &gy), &yy) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yy * (gy - s);
                    }
                }
                self.accumulate(grads, *a, d)?;
            }
            Op::NllSum { logits, targets, weights, probs } => {
                let up = g.get(0, 0);
                let mut d = Tensor2::zeros(probs.rows(), probs.cols());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let k = up * w;
                    for (o, &p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                        *o = k * p;
                    }
                    let cur = d.get(r, t);
                    d.set(r, t, cur - k);
                }
                self.accumulate(grads, *logits, d)?;
            }
        }
        Ok(())
    }
}

fn log_prob<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln();
    row[target] - max - lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_two_x() {
        let x = Tensor2::<f64>::column(&[1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let xtx = {
            let xt = tape.hadamard(xv, xv).unwrap();
            let ones = tape.constant(Tensor2::filled(1, 3, 1.0));
            tape.matmul(ones, xt).unwrap()
        };
        let grads = tape.backward(xtx).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &x.scale(2.0));
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let a = Tensor2::<f64>::filled(1, 1, 3.0);
        let b = Tensor2::<f64>::filled(1, 1, 4.0);
        let mut tape = Tape::new();
        let av = tape.param(&a);
        let bv = tape.param(&b);
        let loss = tape.scale(av, 2.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(av).unwrap().get(0, 0), 2.0);
        assert!(grads.get(bv).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let v = tape.variable(Tensor2::zeros(2, 2));
        assert_eq!(tape.backward(v).err(), Some(TapeError::NonScalarLoss((2, 2))));
        assert!(matches!(tape.backward(Var(99)), Err(TapeError::UnknownVar { .. })));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.variable(Tensor2::zeros(3, 7));
        let loss = tape.cross_entropy(uniform, &[0, 3, 6], &[true, true, true]).unwrap();
        assert!((tape.value(loss).get(0, 0) - 7f64.ln()).abs() < 1e-12);

        let two = tape.variable(Tensor2::from_rows(&[[0.0, 3f64.ln()]]));
        let loss = tape.cross_entropy(two, &[1], &[true]).unwrap();
        assert!((tape.value(loss).get(0, 0) + 0.75f64.ln()).abs() < 1e-12);

        let masked = tape.variable(Tensor2::from_rows(&[[1.0, 2.0]]));
        let loss = tape.cross_entropy(masked, &[1], &[false]).unwrap();
        assert_eq!(tape.value(loss).get(0, 0), 0.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(masked).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn cross_entropy_rejects_out_of_vocab_target() {
        let mut tape = Tape::<f32>::new();
        let x = tape.variable(Tensor2::zeros(1, 4));
        assert!(matches!(tape.cross_entropy(x, &[4], &[true]), Err(ShapeError::RowIndex { index: 4, .. })));
    }

    #[test]
    fn gather_scatters_into_table_rows() {
        let table = Tensor2::<f64>::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let mut tape = Tape::new();
        let t = tape.param(&table);
        let rows = tape.gather_rows(t, &[1, 1]).unwrap();
        let ones = tape.constant(Tensor2::filled(1, 2, 1.0));
        let col = tape.matmul_nt(rows, ones).unwrap();
        let ones_r = tape.constant(Tensor2::filled(1, 2, 1.0));
        let total = tape.matmul(ones_r, col).unwrap();
        let grads = tape.backward(total).unwrap();
        assert_eq!(grads.get(t).unwrap(), &Tensor2::from_rows(&[[0.0, 0.0], [2.0, 2.0], [0.0, 0.0]]));
    }
}

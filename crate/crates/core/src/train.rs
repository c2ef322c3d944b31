//! Training: Adam, per-epoch learning-rate decay, global-norm clipping,
//! validation tracking and the finite-difference gradient checker.
//!
//! The loop is IO-free. Checkpointing and timing happen in a
//! [`TrainObserver`] supplied by the caller.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{
    batch_dataset, encode_source, encode_target, Bucket, CorpusError, TokenId, TokenizedPair, EOS, GO, PAD,
};
use crate::error::ShapeError;
use crate::model::{forward_teacher_forced, ConfigError, Dropout, ModelConfig, ModelError, Seq2SeqParams};
use crate::tape::{OpKind, Tape, TapeError};
use crate::tensor::{Scalar, Tensor2};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const CLIP_NORM: f64 = 5.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("dataset of {pairs} pairs cannot spare {validation} validation pairs")]
    InsufficientData { pairs: usize, validation: usize },
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, last_good: Box<Seq2SeqParams<f32>> },
    #[error("observer failed: {0}")]
    Observer(String),
}

/// Adam moments, laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Seq2SeqParams<T>,
    pub v: Seq2SeqParams<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Seq2SeqParams<T>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam step on a single tensor, `step` already
/// incremented (≥ 1).
pub fn adam_step_tensor<T: Scalar>(
    param: &mut Tensor2<T>,
    grad: &Tensor2<T>,
    m: &mut Tensor2<T>,
    v: &mut Tensor2<T>,
    step: u64,
    lr: f64,
) -> Result<(), ShapeError> {
    for other in [grad.shape(), m.shape(), v.shape()] {
        if other != param.shape() {
            return Err(ShapeError::Mismatch { op: "adam_update", left: param.shape(), right: other });
        }
    }
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let c1 = T::one() - T::lit(Float::powi(ADAM_BETA1, step as i32));
    let c2 = T::one() - T::lit(Float::powi(ADAM_BETA2, step as i32));
    let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPSILON));
    let iter = param.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
    for ((p, &g), (m, v)) in iter {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `θ ← θ − lr · m̂ / (√v̂ + ε)` over every parameter tensor.
pub fn adam_update<T: Scalar>(
    params: &mut Seq2SeqParams<T>,
    grads: &Seq2SeqParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), ShapeError> {
    let grads = grads.tensors();
    let AdamState { m, v, step } = state;
    let (ms, vs) = (m.tensors_mut(), v.tensors_mut());
    let ps = params.tensors_mut();
    if grads.len() != ps.len() || ms.len() != ps.len() || vs.len() != ps.len() {
        return Err(ShapeError::Mismatch { op: "adam_update", left: (ps.len(), 0), right: (grads.len(), 0) });
    }
    *step += 1;
    for (((p, g), m), v) in ps.into_iter().zip(grads).zip(ms).zip(vs) {
        adam_step_tensor(p, g, m, v, *step, lr)?;
    }
    Ok(())
}

/// `max(min_learning_rate, learning_rate · decay^epoch)`.
pub fn lr_schedule(epoch: usize, config: &ModelConfig) -> f64 {
    let decayed = config.learning_rate * Float::powi(config.learning_rate_decay, epoch.min(i32::MAX as usize) as i32);
    decayed.max(config.min_learning_rate)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Seq2SeqParams<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    grads.for_each(|_, g| sq += g.sum_squares().as_f64());
    let norm = Float::sqrt(sq);
    if norm > max_norm && norm.is_finite() {
        let k = T::lit(max_norm / norm);
        grads.for_each_mut(|_, g| {
            for x in g.data_mut() {
                *x = *x * k;
            }
        });
    }
    norm
}

/// Source and target id rows of a batch.
pub fn split_batch(pairs: &[TokenizedPair]) -> (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>) {
    (pairs.iter().map(|p| p.src.clone()).collect(), pairs.iter().map(|p| p.tgt.clone()).collect())
}

/// Loss value and parameter gradients for one batch.
pub fn loss_and_gradients<T: Scalar>(
    params: &Seq2SeqParams<T>,
    pairs: &[TokenizedPair],
    dropout: &mut Dropout<'_>,
    fault: Option<OpKind>,
) -> Result<(f64, Seq2SeqParams<T>), TrainError> {
    let (src, tgt) = split_batch(pairs);
    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let bound = params.bind(&mut tape);
    let out = forward_teacher_forced(&mut tape, &bound, &src, &tgt, dropout)?;
    let loss = tape.value(out.loss).get(0, 0).as_f64();
    let mut grads = tape.backward(out.loss)?;
    Ok((loss, bound.collect_gradients(&tape, &mut grads)))
}

/// Teacher-forced loss of a batch without recording gradients.
pub fn batch_loss<T: Scalar>(params: &Seq2SeqParams<T>, pairs: &[TokenizedPair]) -> Result<f64, TrainError> {
    let (src, tgt) = split_batch(pairs);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = forward_teacher_forced(&mut tape, &bound, &src, &tgt, &mut Dropout::off())?;
    Ok(tape.value(out.loss).get(0, 0).as_f64())
}

/// Teacher-forced evaluation totals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalStats {
    pub loss_sum: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl EvalStats {
    pub fn mean_loss(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.loss_sum / self.tokens as f64
        }
    }

    pub fn perplexity(&self) -> f64 {
        Float::exp(self.mean_loss())
    }

    pub fn accuracy(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.correct as f64 / self.tokens as f64
        }
    }
}

/// Cross-entropy and argmax accuracy over every non-PAD target token,
/// batched per bucket in dataset order.
pub fn evaluate<T: Scalar>(
    params: &Seq2SeqParams<T>,
    pairs: &[TokenizedPair],
    batch_size: usize,
) -> Result<EvalStats, TrainError> {
    let mut by_bucket: BTreeMap<usize, Vec<TokenizedPair>> = BTreeMap::new();
    for p in pairs {
        by_bucket.entry(p.bucket).or_default().push(p.clone());
    }
    let mut stats = EvalStats::default();
    for group in by_bucket.values() {
        for chunk in group.chunks(batch_size.max(1)) {
            let (src, tgt) = split_batch(chunk);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let out = forward_teacher_forced(&mut tape, &bound, &src, &tgt, &mut Dropout::off())?;
            stats.loss_sum += tape.value(out.loss).get(0, 0).as_f64() * out.tokens as f64;
            stats.tokens += out.tokens;
            for (&logits, targets) in out.logits.iter().zip(&out.targets) {
                let l = tape.value(logits);
                for (r, &t) in targets.iter().enumerate() {
                    if t != PAD && argmax(l.row(r)) == t {
                        stats.correct += 1;
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when no pairs are held out.
    pub validation_loss: Option<f64>,
    pub learning_rate: f64,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
}

pub struct EpochEvent<'a> {
    pub report: &'a EpochReport,
    pub params: &'a Seq2SeqParams<f32>,
    pub adam: &'a AdamState<f32>,
    /// Lowest validation loss so far.
    pub best: bool,
}

pub trait TrainObserver {
    fn on_epoch(&mut self, event: &EpochEvent<'_>) -> Result<(), String>;

    /// Milliseconds from an arbitrary origin, if the caller has a clock.
    fn now_ms(&mut self) -> Option<f64> {
        None
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {
    fn on_epoch(&mut self, _: &EpochEvent<'_>) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    /// Held-out pairs; `None` means one batch worth.
    pub validation_size: Option<usize>,
    pub clip_norm: f64,
}

impl TrainOptions {
    pub fn seeded(seed: u64) -> Self {
        Self { seed, validation_size: None, clip_norm: CLIP_NORM }
    }
}

pub struct TrainOutcome {
    pub params: Seq2SeqParams<f32>,
    pub adam: AdamState<f32>,
    pub report: TrainReport,
    pub train_pairs: Vec<TokenizedPair>,
    pub validation_pairs: Vec<TokenizedPair>,
}

/// Splits off the validation pairs after a seeded shuffle.
pub fn split_validation(
    dataset: &[TokenizedPair],
    validation: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<TokenizedPair>, Vec<TokenizedPair>), TrainError> {
    if dataset.is_empty() {
        return Err(CorpusError::EmptyDataset.into());
    }
    if validation >= dataset.len() {
        return Err(TrainError::InsufficientData { pairs: dataset.len(), validation });
    }
    let mut shuffled = dataset.to_vec();
    shuffled.shuffle(rng);
    let train = shuffled.split_off(validation);
    Ok((train, shuffled))
}

/// The train/validation split that [`train`] makes for `opts.seed`.
pub fn held_out(
    dataset: &[TokenizedPair],
    config: &ModelConfig,
    opts: &TrainOptions,
) -> Result<(Vec<TokenizedPair>, Vec<TokenizedPair>), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.next_u64();
    split_validation(dataset, opts.validation_size.unwrap_or(config.batch_size), &mut rng)
}

/// Trains from freshly initialized parameters.
pub fn train(
    dataset: &[TokenizedPair],
    config: &ModelConfig,
    opts: &TrainOptions,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let params = Seq2SeqParams::init(config, rng.next_u64());
    let adam = AdamState::new(&params);
    resume(dataset, config, opts, observer, params, adam, 0, &mut rng)
}

/// Continues training `params` from `start_epoch`.
#[allow(clippy::too_many_arguments)]
pub fn resume(
    dataset: &[TokenizedPair],
    config: &ModelConfig,
    opts: &TrainOptions,
    observer: &mut dyn TrainObserver,
    mut params: Seq2SeqParams<f32>,
    mut adam: AdamState<f32>,
    start_epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let validation = opts.validation_size.unwrap_or(config.batch_size);
    let (train_pairs, validation_pairs) = split_validation(dataset, validation, rng)?;
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;

    for epoch in start_epoch..config.epochs {
        let started = observer.now_ms();
        let lr = lr_schedule(epoch, config);
        let batches = batch_dataset(&train_pairs, config.batch_size, rng.next_u64())?;
        let last_good = params.clone();
        let mut loss_sum = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
            let mut dropout = Dropout::new(config.keep_probability, &mut dropout_rng);
            let (loss, mut grads) = loss_and_gradients(&params, &batch.pairs, &mut dropout, None)?;
            let norm = clip_global_norm(&mut grads, opts.clip_norm);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, last_good: Box::new(last_good) });
            }
            adam_update(&mut params, &grads, &mut adam, lr)?;
            loss_sum += loss;
        }
        let train_loss = loss_sum / batches.len() as f64;
        let validation_loss = if validation_pairs.is_empty() {
            None
        } else {
            Some(evaluate(&params, &validation_pairs, config.batch_size)?.mean_loss())
        };
        if !train_loss.is_finite() || !params.all_finite() {
            return Err(TrainError::Diverged { epoch, batch: batches.len(), last_good: Box::new(last_good) });
        }
        let wall_ms = match (started, observer.now_ms()) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        };
        let row = EpochReport { epoch, train_loss, validation_loss, learning_rate: lr, wall_ms };
        let score = validation_loss.unwrap_or(train_loss);
        let is_best = score < best;
        if is_best {
            best = score;
        }
        report.epochs.push(row);
        observer
            .on_epoch(&EpochEvent { report: &row, params: &params, adam: &adam, best: is_best })
            .map_err(TrainError::Observer)?;
    }
    Ok(TrainOutcome { params, adam, report, train_pairs, validation_pairs })
}

/// Small configuration for the echo task: vocab 20, width 32, batch 32,
/// constant learning rate 0.001, no dropout, 30 epochs, one (5, 7) bucket.
pub fn copy_task_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        embedding_size: 32,
        rnn_size: 32,
        keep_probability: 1.0,
        batch_size: 32,
        learning_rate: 0.001,
        learning_rate_decay: 1.0,
        epochs: 30,
        buckets: vec![Bucket { src_cap: 5, tgt_cap: 7 }],
        ..ModelConfig::default()
    }
}

/// `count` echo pairs of 2 to 5 word ids drawn from `4..vocab_size`, the
/// target repeating the source.
pub fn copy_task_pairs(count: usize, vocab_size: usize, reverse_source: bool, seed: u64) -> Vec<TokenizedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let n = rng.random_range(2..=5);
            let ids: Vec<TokenId> = (0..n).map(|_| rng.random_range(4..vocab_size)).collect();
            TokenizedPair { src: encode_source(&ids, 5, reverse_source), tgt: encode_target(&ids, 7), bucket: 0 }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
    pub loss: f64,
}

/// Central-difference step.
pub const GRAD_CHECK_EPSILON: f64 = 1e-5;
/// Denominator floor of the relative error. Central differences at the
/// step above carry about 1e-11 of rounding noise, so gradients smaller than
/// the floor are compared by absolute difference.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Random tiny batch for `config`: sources from the first bucket with some
/// left padding, targets `GO … EOS PAD…`.
pub fn random_batch(config: &ModelConfig, batch: usize, seed: u64) -> Vec<TokenizedPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bucket = config.buckets[0];
    let v = config.vocab_size;
    (0..batch)
        .map(|_| {
            let n_src = rng.random_range(1..=bucket.src_cap);
            let n_tgt = rng.random_range(0..=bucket.tgt_cap - 2);
            let words: Vec<TokenId> = (0..n_src).map(|_| rng.random_range(4..v)).collect();
            let mut src = vec![PAD; bucket.src_cap - n_src];
            src.extend(words);
            let mut tgt = vec![GO];
            tgt.extend((0..n_tgt).map(|_| rng.random_range(4..v)));
            tgt.push(EOS);
            tgt.resize(bucket.tgt_cap, PAD);
            TokenizedPair { src, tgt, bucket: 0 }
        })
        .collect()
}

/// Compares tape gradients with central differences over every parameter
/// entry of a model built from `config`, evaluated in 64-bit on `pairs`.
pub fn grad_check_on(
    config: &ModelConfig,
    params: &Seq2SeqParams<f64>,
    pairs: &[TokenizedPair],
    fault: Option<OpKind>,
) -> Result<GradCheckReport, TrainError> {
    config.validate()?;
    let (loss, grads) = loss_and_gradients(params, pairs, &mut Dropout::off(), fault)?;
    let mut analytic = Vec::new();
    grads.for_each(|name, g| analytic.push((String::from(name), g.clone())));

    let mut probe = params.clone();
    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, entries_checked: 0, loss };
    for (slot, (name, g)) in analytic.iter().enumerate() {
        for idx in 0..g.len() {
            let original = probe_entry(&mut probe, slot, idx, None);
            probe_entry(&mut probe, slot, idx, Some(original + GRAD_CHECK_EPSILON));
            let plus = batch_loss(&probe, pairs)?;
            probe_entry(&mut probe, slot, idx, Some(original - GRAD_CHECK_EPSILON));
            let minus = batch_loss(&probe, pairs)?;
            probe_entry(&mut probe, slot, idx, Some(original));
            let numeric = (plus - minus) / (2.0 * GRAD_CHECK_EPSILON);
            let err = relative_error(g.data()[idx], numeric);
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}

/// Reads entry `idx` of parameter tensor `slot`, optionally overwriting it.
fn probe_entry(params: &mut Seq2SeqParams<f64>, slot: usize, idx: usize, set: Option<f64>) -> f64 {
    let t = params.tensors_mut().swap_remove(slot);
    let old = t.data()[idx];
    if let Some(v) = set {
        t.data_mut()[idx] = v;
    }
    old
}

/// Gradient check of a freshly initialized model on a random two-row batch.
pub fn grad_check(config: &ModelConfig, seed: u64, fault: Option<OpKind>) -> Result<GradCheckReport, TrainError> {
    let params = Seq2SeqParams::<f64>::init(config, seed);
    let pairs = random_batch(config, 2, seed ^ 0x9e37_79b9_7f4a_7c15);
    grad_check_on(config, &params, &pairs, fault)
}

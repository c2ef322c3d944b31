use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{xavier_bound, Scalar, Tensor2};

const SQRT_3: f64 = 1.732_050_807_568_877_2;

/// Gain on the Xavier bound of the output projection. The decoder output is
/// squashed into (-1, 1), so a unit-gain projection starts with nearly flat
/// logits and sharpens slowly.
pub const OUTPUT_GAIN: f64 = 2.0;

/// Fused LSTM weights, gate blocks ordered `[forget, input, output, candidate]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<L> {
    /// `4·rnn × input`
    pub w: L,
    /// `4·rnn × rnn`
    pub u: L,
    /// `1 × 4·rnn`
    pub b: L,
}

/// Every trainable tensor of the model, generic over the leaf type so the
/// same layout serves for values (`Tensor2`), tape handles (`Var`) and
/// optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<L> {
    /// `vocab × embedding`, shared by encoder and decoder.
    pub embedding: L,
    pub encoder_fwd: Vec<Lstm<L>>,
    pub encoder_bwd: Vec<Lstm<L>>,
    /// Per decoder layer, `rnn × 2·rnn`.
    pub bridge: Vec<L>,
    pub decoder: Vec<Lstm<L>>,
    /// `rnn × rnn`, applied to the decoder state.
    pub attn_w: L,
    /// `rnn × 2·rnn`, applied to encoder states.
    pub attn_u: L,
    /// `1 × rnn`
    pub attn_v: L,
    /// `vocab × rnn`
    pub out_w: L,
    /// `1 × vocab`
    pub out_b: L,
}

pub type Seq2SeqParams<T = f32> = ParamSet<Tensor2<T>>;
pub type BoundParams = ParamSet<Var>;

impl<L> ParamSet<L> {
    /// Visits every tensor with its unique name, in a fixed order.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a L)) {
        f("embedding", &self.embedding);
        for (dir, layers) in [("fwd", &self.encoder_fwd), ("bwd", &self.encoder_bwd)] {
            for (i, l) in layers.iter().enumerate() {
                f(&format!("encoder.{dir}.{i}.w"), &l.w);
                f(&format!("encoder.{dir}.{i}.u"), &l.u);
                f(&format!("encoder.{dir}.{i}.b"), &l.b);
            }
        }
        for (i, b) in self.bridge.iter().enumerate() {
            f(&format!("bridge.{i}"), b);
        }
        for (i, l) in self.decoder.iter().enumerate() {
            f(&format!("decoder.{i}.w"), &l.w);
            f(&format!("decoder.{i}.u"), &l.u);
            f(&format!("decoder.{i}.b"), &l.b);
        }
        f("attention.w", &self.attn_w);
        f("attention.u", &self.attn_u);
        f("attention.v", &self.attn_v);
        f("output.w", &self.out_w);
        f("output.b", &self.out_b);
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut L)) {
        f("embedding", &mut self.embedding);
        for (dir, layers) in [("fwd", &mut self.encoder_fwd), ("bwd", &mut self.encoder_bwd)] {
            for (i, l) in layers.iter_mut().enumerate() {
                f(&format!("encoder.{dir}.{i}.w"), &mut l.w);
                f(&format!("encoder.{dir}.{i}.u"), &mut l.u);
                f(&format!("encoder.{dir}.{i}.b"), &mut l.b);
            }
        }
        for (i, b) in self.bridge.iter_mut().enumerate() {
            f(&format!("bridge.{i}"), b);
        }
        for (i, l) in self.decoder.iter_mut().enumerate() {
            f(&format!("decoder.{i}.w"), &mut l.w);
            f(&format!("decoder.{i}.u"), &mut l.u);
            f(&format!("decoder.{i}.b"), &mut l.b);
        }
        f("attention.w", &mut self.attn_w);
        f("attention.u", &mut self.attn_u);
        f("attention.v", &mut self.attn_v);
        f("output.w", &mut self.out_w);
        f("output.b", &mut self.out_b);
    }

    pub fn map<'a, M>(&'a self, mut f: impl FnMut(&str, &'a L) -> M) -> ParamSet<M> {
        let lstm = |prefix: &str, l: &'a Lstm<L>, f: &mut dyn FnMut(&str, &'a L) -> M| Lstm {
            w: f(&format!("{prefix}.w"), &l.w),
            u: f(&format!("{prefix}.u"), &l.u),
            b: f(&format!("{prefix}.b"), &l.b),
        };
        let embedding = f("embedding", &self.embedding);
        let encoder_fwd =
            self.encoder_fwd.iter().enumerate().map(|(i, l)| lstm(&format!("encoder.fwd.{i}"), l, &mut f)).collect();
        let encoder_bwd =
            self.encoder_bwd.iter().enumerate().map(|(i, l)| lstm(&format!("encoder.bwd.{i}"), l, &mut f)).collect();
        let bridge = self.bridge.iter().enumerate().map(|(i, b)| f(&format!("bridge.{i}"), b)).collect();
        let decoder = self.decoder.iter().enumerate().map(|(i, l)| lstm(&format!("decoder.{i}"), l, &mut f)).collect();
        ParamSet {
            embedding,
            encoder_fwd,
            encoder_bwd,
            bridge,
            decoder,
            attn_w: f("attention.w", &self.attn_w),
            attn_u: f("attention.u", &self.attn_u),
            attn_v: f("attention.v", &self.attn_v),
            out_w: f("output.w", &self.out_w),
            out_b: f("output.b", &self.out_b),
        }
    }

    /// Mutable references in [`ParamSet::for_each`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut L> {
        let mut out = Vec::new();
        out.push(&mut self.embedding);
        for l in self.encoder_fwd.iter_mut().chain(self.encoder_bwd.iter_mut()) {
            out.extend([&mut l.w, &mut l.u, &mut l.b]);
        }
        out.extend(self.bridge.iter_mut());
        for l in &mut self.decoder {
            out.extend([&mut l.w, &mut l.u, &mut l.b]);
        }
        out.extend([&mut self.attn_w, &mut self.attn_u, &mut self.attn_v, &mut self.out_w, &mut self.out_b]);
        out
    }

    pub fn tensors(&self) -> Vec<&L> {
        let mut out = Vec::new();
        self.for_each(|_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(String::from(n)));
        out
    }
}

impl<T: Scalar> Seq2SeqParams<T> {
    /// Xavier-uniform weights, zero biases except the forget gate (1.0).
    /// Embeddings are uniform with unit variance and the output projection
    /// uses [`OUTPUT_GAIN`].
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, e, r) = (config.vocab_size, config.embedding_size, config.rnn_size);
        let mut lstm = |input: usize| {
            let mut b = Tensor2::zeros(1, 4 * r);
            for x in &mut b.data_mut()[..r] {
                *x = T::one();
            }
            Lstm { w: Tensor2::xavier(4 * r, input, &mut rng), u: Tensor2::xavier(4 * r, r, &mut rng), b }
        };
        let layers = config.num_layers;
        let enc_input = |l: usize| if l == 0 { e } else { 2 * r };
        let encoder_fwd = (0..layers).map(|l| lstm(enc_input(l))).collect();
        let encoder_bwd = (0..layers).map(|l| lstm(enc_input(l))).collect();
        let decoder = (0..layers).map(|l| lstm(if l == 0 { e + 2 * r } else { r })).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(rng.next_u64());
        Self {
            embedding: Tensor2::uniform(v, e, SQRT_3, &mut rng),
            encoder_fwd,
            encoder_bwd,
            bridge: (0..layers).map(|_| Tensor2::xavier(r, 2 * r, &mut rng)).collect(),
            decoder,
            attn_w: Tensor2::xavier(r, r, &mut rng),
            attn_u: Tensor2::xavier(r, 2 * r, &mut rng),
            attn_v: Tensor2::xavier(1, r, &mut rng),
            out_w: Tensor2::uniform(v, r, OUTPUT_GAIN * xavier_bound(v, r), &mut rng),
            out_b: Tensor2::zeros(1, v),
        }
    }

    /// All-zero parameters shaped for `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, e, r) = (config.vocab_size, config.embedding_size, config.rnn_size);
        let lstm = |input: usize| Lstm {
            w: Tensor2::zeros(4 * r, input),
            u: Tensor2::zeros(4 * r, r),
            b: Tensor2::zeros(1, 4 * r),
        };
        let layers = config.num_layers;
        let enc_input = |l: usize| if l == 0 { e } else { 2 * r };
        Self {
            embedding: Tensor2::zeros(v, e),
            encoder_fwd: (0..layers).map(|l| lstm(enc_input(l))).collect(),
            encoder_bwd: (0..layers).map(|l| lstm(enc_input(l))).collect(),
            bridge: (0..layers).map(|_| Tensor2::zeros(r, 2 * r)).collect(),
            decoder: (0..layers).map(|l| lstm(if l == 0 { e + 2 * r } else { r })).collect(),
            attn_w: Tensor2::zeros(r, r),
            attn_u: Tensor2::zeros(r, 2 * r),
            attn_v: Tensor2::zeros(1, r),
            out_w: Tensor2::zeros(v, r),
            out_b: Tensor2::zeros(1, v),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor2::zeros(t.rows(), t.cols()))
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> BoundParams {
        self.map(|_, t| tape.param(t))
    }

    pub fn cast<U: Scalar>(&self) -> Seq2SeqParams<U> {
        self.map(|_, t| t.cast())
    }

    /// Looks a tensor up by its name.
    pub fn get(&self, name: &str) -> Option<&Tensor2<T>> {
        let mut found = None;
        self.for_each(|n, t| {
            if n == name {
                found = Some(t);
            }
        });
        found
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, t| ok &= t.all_finite());
        ok
    }
}

impl BoundParams {
    /// Gradients laid out like the parameters; tensors the loss did not touch
    /// get zeros.
    pub fn collect_gradients<T: Scalar>(&self, tape: &Tape<'_, T>, grads: &mut Gradients<T>) -> Seq2SeqParams<T> {
        self.map(|_, &v| {
            grads.take(v).unwrap_or_else(|| {
                let (r, c) = tape.value(v).shape();
                Tensor2::zeros(r, c)
            })
        })
    }
}

//! Greedy and beam-search decoding, reply rendering and the chat pipeline
//! shared by the terminal REPL and the HTTP service.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use num_traits::Float;

use crate::corpus::{choose_bucket, clean_text, encode_source, Bucket, TokenId, Vocab, EOS, GO, PAD, UNK};
use crate::model::{decoder_step, encode_bidirectional, BoundParams, Dropout, LayerState, ModelError, Seq2SeqParams};
use crate::tape::Tape;
use crate::tensor::{log_softmax, Scalar};

pub const FALLBACK_REPLY: &str = "Sorry, I dint understand your context";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_steps: usize,
    /// Scores are divided by `len^length_penalty`; 0 keeps raw log-probs.
    pub length_penalty: f64,
}

impl DecodeConfig {
    pub fn new(beam_width: usize, max_steps: usize) -> Self {
        Self { beam_width: beam_width.max(1), max_steps: max_steps.max(1), length_penalty: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids; a finished hypothesis ends in EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 || self.tokens.is_empty() {
            self.log_prob
        } else {
            self.log_prob / Float::powf(self.tokens.len() as f64, length_penalty)
        }
    }

    /// Tokens without the terminal EOS.
    pub fn reply_ids(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Finished and surviving hypotheses, best first.
    pub ranked: Vec<Hypothesis>,
}

fn next_log_probs<T: Scalar>(
    tape: &mut Tape<'_, T>,
    p: &BoundParams,
    memory: &crate::model::AttentionMemory,
    y_prev: TokenId,
    state: &[LayerState],
) -> Result<(Vec<f64>, Vec<LayerState>), ModelError> {
    let out = decoder_step(tape, p, memory, &[y_prev], state, &mut Dropout::off())?;
    let logp = log_softmax(tape.value(out.logits).row(0)).iter().map(|x| x.as_f64()).collect();
    Ok((logp, out.state))
}

fn generable(id: TokenId) -> bool {
    id != PAD && id != GO
}

/// Picks the most likely non-PAD, non-GO token at every step until EOS or
/// `max_steps`. The returned ids exclude EOS.
pub fn greedy_decode<T: Scalar>(
    params: &Seq2SeqParams<T>,
    src: &[TokenId],
    max_steps: usize,
) -> Result<Vec<TokenId>, ModelError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let enc = encode_bidirectional(&mut tape, &p, &[src.to_vec()], &mut Dropout::off())?;
    let mut state = enc.initial.clone();
    let mut prev = GO;
    let mut out = Vec::new();
    for _ in 0..max_steps {
        let (logp, next) = next_log_probs(&mut tape, &p, &enc.memory, prev, &state)?;
        let mut best: Option<TokenId> = None;
        for (id, &lp) in logp.iter().enumerate() {
            if generable(id) && best.is_none_or(|b| lp > logp[b]) {
                best = Some(id);
            }
        }
        let Some(tok) = best else { break };
        if tok == EOS {
            break;
        }
        out.push(tok);
        state = next;
        prev = tok;
    }
    Ok(out)
}

struct Live {
    hyp: Hypothesis,
    state: Vec<LayerState>,
}

/// Higher score first, then the lexicographically smaller token list.
fn rank(a: &Hypothesis, b: &Hypothesis, alpha: f64) -> Ordering {
    b.score(alpha).partial_cmp(&a.score(alpha)).unwrap_or(Ordering::Equal).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Left-to-right beam search keeping the `beam_width` best partial
/// sequences by joint log-probability.
///
/// Candidates are ordered by score, then lower token id, then the rank of
/// the parent. Hypotheses ending in EOS leave the beam for a finished pool.
/// The result is the best of the pool and the beams alive at the cutoff.
pub fn beam_search<T: Scalar>(
    params: &Seq2SeqParams<T>,
    src: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<BeamResult, ModelError> {
    let k = cfg.beam_width.max(1);
    let alpha = cfg.length_penalty;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let enc = encode_bidirectional(&mut tape, &p, &[src.to_vec()], &mut Dropout::off())?;

    let mut alive = vec![Live {
        hyp: Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false },
        state: enc.initial.clone(),
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..cfg.max_steps.max(1) {
        let mut candidates: Vec<(Hypothesis, usize)> = Vec::new();
        let mut states = Vec::with_capacity(alive.len());
        for (parent, live) in alive.iter().enumerate() {
            let prev = live.hyp.tokens.last().copied().unwrap_or(GO);
            let (logp, next) = next_log_probs(&mut tape, &p, &enc.memory, prev, &live.state)?;
            states.push(next);
            for (id, &lp) in logp.iter().enumerate().filter(|(id, _)| generable(*id)) {
                let mut tokens = live.hyp.tokens.clone();
                tokens.push(id);
                let hyp = Hypothesis { tokens, log_prob: live.hyp.log_prob + lp, finished: id == EOS };
                candidates.push((hyp, parent));
            }
        }
        candidates.sort_by(|(a, pa), (b, pb)| {
            b.score(alpha)
                .partial_cmp(&a.score(alpha))
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.tokens.last().cmp(&b.tokens.last()))
                .then_with(|| pa.cmp(pb))
        });
        candidates.truncate(k);

        alive.clear();
        for (hyp, parent) in candidates {
            if hyp.finished {
                finished.push(hyp);
            } else {
                alive.push(Live { hyp, state: states[parent].clone() });
            }
        }
        if alive.is_empty() {
            break;
        }
        // Extending only lowers raw log-probs, so nothing alive can overtake.
        if alpha == 0.0 {
            let best_done = finished.iter().map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
            let best_alive = alive.iter().map(|l| l.hyp.log_prob).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_alive {
                break;
            }
        }
    }

    let mut ranked: Vec<Hypothesis> = finished.into_iter().chain(alive.into_iter().map(|l| l.hyp)).collect();
    ranked.sort_by(|a, b| rank(a, b, alpha));
    let best = ranked.first().cloned().unwrap_or(Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false });
    Ok(BeamResult { best, ranked })
}

fn is_attached_punct(word: &str) -> bool {
    matches!(word, "." | "," | "?" | "!")
}

/// Renders ids as text: stops at EOS, drops GO and PAD, and attaches
/// `. , ? !` to the preceding word. UNK is printed as `<UNK>`.
pub fn postprocess_reply(ids: &[TokenId], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in ids {
        if id == EOS {
            break;
        }
        if id == GO || id == PAD {
            continue;
        }
        let Some(word) = vocab.word_of(id) else { continue };
        if !out.is_empty() && !is_attached_punct(word) {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub text: String,
    pub fallback_used: bool,
}

impl ChatReply {
    fn fallback() -> Self {
        Self { text: String::from(FALLBACK_REPLY), fallback_used: true }
    }
}

/// Everything needed to answer one utterance.
#[derive(Debug, Clone, Copy)]
pub struct ChatModel<'a, T: Scalar = f32> {
    pub params: &'a Seq2SeqParams<T>,
    pub vocab: &'a Vocab,
    pub buckets: &'a [Bucket],
    pub reverse_source: bool,
    pub decode: DecodeConfig,
}

/// Cleans, encodes and decodes `text`. Falls back to [`FALLBACK_REPLY`] when
/// no bucket fits, more than half the words are unknown, or the decoded
/// reply is empty.
pub fn chat_reply<T: Scalar>(model: &ChatModel<'_, T>, text: &str) -> Result<ChatReply, ModelError> {
    let cleaned = clean_text(text);
    let ids = model.vocab.encode_words(&cleaned);
    if ids.is_empty() {
        return Ok(ChatReply::fallback());
    }
    let unknown = ids.iter().filter(|&&t| t == UNK).count();
    if 2 * unknown > ids.len() {
        return Ok(ChatReply::fallback());
    }
    let Some(bucket) = choose_bucket(model.buckets, ids.len(), None) else {
        return Ok(ChatReply::fallback());
    };
    let src = encode_source(&ids, model.buckets[bucket].src_cap, model.reverse_source);
    let result = beam_search(model.params, &src, &model.decode)?;
    let reply = postprocess_reply(result.best.reply_ids(), model.vocab);
    if reply.is_empty() {
        return Ok(ChatReply::fallback());
    }
    Ok(ChatReply { text: reply, fallback_used: false })
}

mod common;

use proptest::prelude::*;
use seqchat_core::corpus::{parse_buckets, TokenId, EOS, GO, PAD};
use seqchat_core::decode::{beam_search, greedy_decode, DecodeConfig};
use seqchat_core::model::{ModelConfig, Seq2SeqParams};

fn tiny(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        embedding_size: 3,
        rnn_size: 3,
        buckets: parse_buckets("4,6").unwrap(),
        ..ModelConfig::default()
    }
}

/// A random model whose output layer is sharpened by `gain`, so decodes
/// are not all the same.
fn model(vocab: usize, seed: u64, gain: f64) -> Seq2SeqParams<f64> {
    let mut p = Seq2SeqParams::<f64>::init(&tiny(vocab), seed);
    p.out_w = p.out_w.scale(gain);
    p.out_b = p.out_b.map(|_| 0.0);
    p
}

fn source(seed: u64, vocab: usize) -> Vec<TokenId> {
    let n = 1 + (seed % 4) as usize;
    let mut s = vec![PAD; 4 - n];
    s.extend((0..n).map(|k| 4 + ((seed as usize * 7 + k * 3) % (vocab - 4))));
    s
}

/// Log-probabilities of every next token after `prefix`, from the scalar
/// reference model.
fn reference_log_probs(p: &Seq2SeqParams<f64>, src: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
    let enc = common::encode(p, src);
    let mut state = enc.initial.clone();
    let mut prev = GO;
    let mut logits = Vec::new();
    for &tok in prefix.iter().chain(std::iter::once(&usize::MAX)) {
        let step = common::decoder_step(p, &enc, prev, &state);
        logits = step.logits;
        state = step.state;
        if tok == usize::MAX {
            break;
        }
        prev = tok;
    }
    common::log_softmax(&logits)
}

fn sequence_log_prob(p: &Seq2SeqParams<f64>, src: &[TokenId], seq: &[TokenId]) -> f64 {
    (0..seq.len()).map(|t| reference_log_probs(p, src, &seq[..t])[seq[t]]).sum()
}

fn generable(vocab: usize) -> impl Iterator<Item = TokenId> {
    (0..vocab).filter(|&t| t != PAD && t != GO)
}

/// Reference greedy decode, argmax over non-PAD, non-GO tokens with the
/// lower id winning ties.
fn reference_greedy(p: &Seq2SeqParams<f64>, src: &[TokenId], max_steps: usize, vocab: usize) -> Vec<TokenId> {
    let mut out = Vec::new();
    for _ in 0..max_steps {
        let lp = reference_log_probs(p, src, &out);
        let mut best = EOS;
        for t in generable(vocab) {
            if lp[t] > lp[best] || (lp[t] == lp[best] && t < best) {
                best = t;
            }
        }
        if best == EOS {
            break;
        }
        out.push(best);
    }
    out
}

#[test]
fn greedy_matches_scalar_reference() {
    for seed in 0..20 {
        let vocab = 6 + (seed % 3) as usize;
        let p = model(vocab, seed, 4.0);
        let src = source(seed, vocab);
        let got = greedy_decode(&p, &src, 5).unwrap();
        assert_eq!(got, reference_greedy(&p, &src, 5, vocab), "seed {seed}");
        assert_eq!(got, greedy_decode(&p, &src, 5).unwrap());
    }
}

#[test]
fn beam_width_one_equals_greedy_on_100_models() {
    let mut nonempty = 0;
    for seed in 0..100 {
        let vocab = 5 + (seed % 6) as usize;
        let p = model(vocab, seed, 1.0 + (seed % 5) as f64);
        let src = source(seed, vocab);
        let greedy = greedy_decode(&p, &src, 6).unwrap();
        let beam = beam_search(&p, &src, &DecodeConfig::new(1, 6)).unwrap();
        assert_eq!(beam.best.reply_ids(), greedy.as_slice(), "seed {seed}");
        nonempty += usize::from(!greedy.is_empty());
    }
    assert!(nonempty > 10, "too few non-trivial decodes ({nonempty})");
}

#[test]
fn full_width_beam_equals_brute_force() {
    for seed in 0..25 {
        let vocab = 5 + (seed % 4) as usize;
        let p = model(vocab, seed, 3.0);
        let src = source(seed, vocab);

        // Complete outcomes within two steps: [EOS], [a, EOS] and [a, b].
        let mut outcomes: Vec<Vec<TokenId>> = vec![vec![EOS]];
        for a in generable(vocab).filter(|&t| t != EOS) {
            for b in generable(vocab) {
                outcomes.push(vec![a, b]);
            }
        }
        let mut best: Option<(f64, Vec<TokenId>)> = None;
        for seq in outcomes {
            let lp = sequence_log_prob(&p, &src, &seq);
            if best.as_ref().is_none_or(|(b, s)| lp > *b || (lp == *b && seq < *s)) {
                best = Some((lp, seq));
            }
        }
        let (best_lp, best_seq) = best.unwrap();

        let beam = beam_search(&p, &src, &DecodeConfig::new(vocab, 2)).unwrap();
        assert_eq!(beam.best.tokens, best_seq, "seed {seed}");
        assert!((beam.best.log_prob - best_lp).abs() < 1e-12);
    }
}

#[test]
fn wide_beam_scores_at_least_greedy() {
    for seed in 0..20 {
        let vocab = 6;
        let p = model(vocab, seed, 3.0);
        let src = source(seed, vocab);
        let greedy = greedy_decode(&p, &src, 4).unwrap();
        let mut greedy_seq = greedy.clone();
        if greedy_seq.len() < 4 {
            greedy_seq.push(EOS);
        }
        let greedy_lp = sequence_log_prob(&p, &src, &greedy_seq);
        let beam = beam_search(&p, &src, &DecodeConfig::new(vocab, 4)).unwrap();
        assert!(beam.best.log_prob >= greedy_lp - 1e-12, "seed {seed}");
    }
}

#[test]
fn eos_always_winning_gives_empty_output() {
    let mut p = model(7, 3, 1.0);
    p.out_b.set(0, EOS, 100.0);
    let src = source(3, 7);
    assert!(greedy_decode(&p, &src, 5).unwrap().is_empty());
    let beam = beam_search(&p, &src, &DecodeConfig::new(3, 5)).unwrap();
    assert_eq!(beam.best.tokens, vec![EOS]);
    assert!(beam.best.finished);
    assert!(beam.best.reply_ids().is_empty());
}

#[test]
fn ties_go_to_the_lower_token_id() {
    let mut p = model(8, 1, 1.0);
    p.out_w = p.out_w.map(|_| 0.0);
    p.out_b = p.out_b.map(|_| 0.0);
    p.out_b.set(0, EOS, -5.0);
    p.out_b.set(0, 5, 2.0);
    p.out_b.set(0, 6, 2.0);
    let src = source(1, 8);
    assert_eq!(greedy_decode(&p, &src, 3).unwrap(), vec![5, 5, 5]);
    let beam = beam_search(&p, &src, &DecodeConfig::new(2, 3)).unwrap();
    assert_eq!(beam.best.tokens, vec![5, 5, 5]);
}

#[test]
fn max_steps_bounds_the_output() {
    let mut p = model(7, 4, 1.0);
    p.out_b.set(0, EOS, -100.0);
    let src = source(4, 7);
    assert_eq!(greedy_decode(&p, &src, 3).unwrap().len(), 3);
    let beam = beam_search(&p, &src, &DecodeConfig::new(2, 3)).unwrap();
    assert_eq!(beam.best.tokens.len(), 3);
    assert!(!beam.best.finished);
}

#[test]
fn length_penalty_prefers_longer_replies() {
    let mut found = false;
    for seed in 0..40 {
        let p = model(6, seed, 2.0);
        let src = source(seed, 6);
        let raw = beam_search(&p, &src, &DecodeConfig::new(4, 5)).unwrap();
        let cfg = DecodeConfig { length_penalty: 1.0, ..DecodeConfig::new(4, 5) };
        let normalized = beam_search(&p, &src, &cfg).unwrap();
        found |= normalized.best.tokens.len() > raw.best.tokens.len();
    }
    assert!(found, "normalization never changed the reply length");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn beam_outputs_are_well_formed(seed in 0u64..10_000, vocab in 5usize..9, k in 1usize..5, gain in 0.5f64..4.0) {
        let p = model(vocab, seed, gain);
        let src = source(seed, vocab);
        let result = beam_search(&p, &src, &DecodeConfig::new(k, 5)).unwrap();
        prop_assert!(!result.ranked.is_empty());
        prop_assert_eq!(&result.ranked[0], &result.best);
        for pair in result.ranked.windows(2) {
            prop_assert!(pair[0].log_prob >= pair[1].log_prob);
        }
        for h in &result.ranked {
            prop_assert!(!h.tokens.contains(&PAD) && !h.tokens.contains(&GO));
            let eos = h.tokens.iter().filter(|&&t| t == EOS).count();
            prop_assert!(eos <= 1);
            prop_assert_eq!(h.finished, h.tokens.last() == Some(&EOS));
            // Prefix log-probabilities never increase.
            let mut prev = 0.0;
            for t in 1..=h.tokens.len() {
                let lp = sequence_log_prob(&p, &src, &h.tokens[..t]);
                prop_assert!(lp <= prev + 1e-12);
                prev = lp;
            }
            prop_assert!((prev - h.log_prob).abs() < 1e-9);
        }
        let again = beam_search(&p, &src, &DecodeConfig::new(k, 5)).unwrap();
        prop_assert_eq!(result, again);
    }

    #[test]
    fn beam_one_is_greedy(seed in any::<u64>(), vocab in 5usize..10) {
        let p = Seq2SeqParams::<f32>::init(&tiny(vocab), seed);
        let src = source(seed % 1000, vocab);
        let greedy = greedy_decode(&p, &src, 6).unwrap();
        let beam = beam_search(&p, &src, &DecodeConfig::new(1, 6)).unwrap();
        prop_assert_eq!(beam.best.reply_ids(), greedy.as_slice());
    }
}

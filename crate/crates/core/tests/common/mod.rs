//! Scalar reference implementation of the model, written loop by loop with
//! no tape and no matrix kernel, used as an oracle by the integration tests.

#![allow(dead_code)]

use seqchat_core::corpus::{TokenId, PAD};
use seqchat_core::model::{Lstm, Seq2SeqParams};
use seqchat_core::Tensor2;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `W·x` with `W` stored `out × in`.
pub fn mat_vec(w: &Tensor2<f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(w.cols(), x.len());
    (0..w.rows()).map(|k| (0..w.cols()).map(|j| w.get(k, j) * x[j]).sum()).collect()
}

pub fn rnn_step(x: &[f64], h: &[f64], w: &Tensor2<f64>, u: &Tensor2<f64>) -> Vec<f64> {
    let a = mat_vec(w, h);
    let b = mat_vec(u, x);
    a.iter().zip(&b).map(|(p, q)| (p + q).tanh()).collect()
}

pub struct Gates {
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub o: Vec<f64>,
    pub g: Vec<f64>,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

pub fn lstm_step(x: &[f64], h: &[f64], c: &[f64], p: &Lstm<Tensor2<f64>>) -> Gates {
    let r = h.len();
    let zx = mat_vec(&p.w, x);
    let zh = mat_vec(&p.u, h);
    let z: Vec<f64> = (0..4 * r).map(|k| zx[k] + zh[k] + p.b.get(0, k)).collect();
    let f: Vec<f64> = z[..r].iter().map(|&v| sigmoid(v)).collect();
    let i: Vec<f64> = z[r..2 * r].iter().map(|&v| sigmoid(v)).collect();
    let o: Vec<f64> = z[2 * r..3 * r].iter().map(|&v| sigmoid(v)).collect();
    let g: Vec<f64> = z[3 * r..].iter().map(|&v| v.tanh()).collect();
    let c_new: Vec<f64> = (0..r).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
    let h_new: Vec<f64> = (0..r).map(|k| o[k] * c_new[k].tanh()).collect();
    Gates { f, i, o, g, h: h_new, c: c_new }
}

pub fn softmax(e: &[f64]) -> Vec<f64> {
    let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.iter().map(|v| v / s).collect()
}

pub fn energies(
    s: &[f64],
    h: &[Vec<f64>],
    valid: &[bool],
    wa: &Tensor2<f64>,
    ua: &Tensor2<f64>,
    va: &Tensor2<f64>,
) -> Vec<f64> {
    let ws = mat_vec(wa, s);
    h.iter()
        .zip(valid)
        .map(|(hj, &ok)| {
            let uh = mat_vec(ua, hj);
            let e: f64 = (0..ws.len()).map(|k| va.get(0, k) * (ws[k] + uh[k]).tanh()).sum();
            if ok {
                e
            } else {
                e - 1e9
            }
        })
        .collect()
}

pub fn context(alpha: &[f64], h: &[Vec<f64>]) -> Vec<f64> {
    let width = h[0].len();
    (0..width).map(|m| alpha.iter().zip(h).map(|(a, hj)| a * hj[m]).sum()).collect()
}

pub struct Encoding {
    /// One `2·rnn` row per source position, from the top layer.
    pub h: Vec<Vec<f64>>,
    pub valid: Vec<bool>,
    /// Per decoder layer `(h, c)`.
    pub initial: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn encode(p: &Seq2SeqParams<f64>, src: &[TokenId]) -> Encoding {
    let r = p.attn_w.rows();
    let valid: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
    let mut inputs: Vec<Vec<f64>> = src.iter().map(|&t| p.embedding.row(t).to_vec()).collect();
    let mut finals = Vec::new();
    for (fwd, bwd) in p.encoder_fwd.iter().zip(&p.encoder_bwd) {
        let mut outs_f = Vec::new();
        let (mut h, mut c) = (vec![0.0; r], vec![0.0; r]);
        for (j, x) in inputs.iter().enumerate() {
            if valid[j] {
                let g = lstm_step(x, &h, &c, fwd);
                h = g.h;
                c = g.c;
            }
            outs_f.push(h.clone());
        }
        let h_fwd = h;
        let mut outs_b = vec![Vec::new(); src.len()];
        let (mut h, mut c) = (vec![0.0; r], vec![0.0; r]);
        for j in (0..src.len()).rev() {
            if valid[j] {
                let g = lstm_step(&inputs[j], &h, &c, bwd);
                h = g.h;
                c = g.c;
            }
            outs_b[j] = h.clone();
        }
        finals.push([h_fwd, h].concat());
        inputs = outs_f.iter().zip(&outs_b).map(|(f, b)| [f.as_slice(), b.as_slice()].concat()).collect();
    }
    let initial = p
        .bridge
        .iter()
        .enumerate()
        .map(|(l, b)| {
            let s: Vec<f64> = mat_vec(b, &finals[l.min(finals.len() - 1)]).iter().map(|v| v.tanh()).collect();
            (s, vec![0.0; r])
        })
        .collect();
    Encoding { h: inputs, valid, initial }
}

pub struct Step {
    pub logits: Vec<f64>,
    pub alpha: Vec<f64>,
    pub context: Vec<f64>,
    pub state: Vec<(Vec<f64>, Vec<f64>)>,
}

pub fn decoder_step(p: &Seq2SeqParams<f64>, enc: &Encoding, y_prev: TokenId, state: &[(Vec<f64>, Vec<f64>)]) -> Step {
    let top = &state.last().unwrap().0;
    let e = energies(top, &enc.h, &enc.valid, &p.attn_w, &p.attn_u, &p.attn_v);
    let alpha = softmax(&e);
    let ctx = context(&alpha, &enc.h);
    let mut input = [p.embedding.row(y_prev), ctx.as_slice()].concat();
    let mut next = Vec::new();
    for (layer, (h, c)) in p.decoder.iter().zip(state) {
        let g = lstm_step(&input, h, c, layer);
        input = g.h.clone();
        next.push((g.h, g.c));
    }
    let logits: Vec<f64> = mat_vec(&p.out_w, &input).iter().enumerate().map(|(k, v)| v + p.out_b.get(0, k)).collect();
    Step { logits, alpha, context: ctx, state: next }
}

/// Mean negative log-likelihood over the non-PAD targets of a batch.
pub fn teacher_forced_loss(p: &Seq2SeqParams<f64>, src: &[Vec<TokenId>], tgt: &[Vec<TokenId>]) -> f64 {
    let mut total = 0.0;
    let mut tokens = 0;
    for (s, t) in src.iter().zip(tgt) {
        let enc = encode(p, s);
        let mut state = enc.initial.clone();
        for w in t.windows(2) {
            let step = decoder_step(p, &enc, w[0], &state);
            if w[1] != PAD {
                let probs = softmax(&step.logits);
                total -= probs[w[1]].ln();
                tokens += 1;
            }
            state = step.state;
        }
    }
    if tokens == 0 {
        0.0
    } else {
        total / tokens as f64
    }
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

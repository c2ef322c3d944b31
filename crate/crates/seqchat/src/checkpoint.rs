//! Checkpoint files.
//!
//! Layout: the magic line `SQC1`, a text header, then binary tensor blocks.
//!
//! ```text
//! SQC1
//! version 1
//! epoch 12
//! seed 0
//! validation 32
//! config 13
//! vocab_size=...            (one key=value line per config field)
//! vocab 6286
//! <PAD>                     (one word per line)
//! ...
//! tensors 22 adam 450
//! embedding 6286 1024       (block header, then rows·cols LE f32)
//! ```
//!
//! With Adam state present the parameter blocks are followed by the first
//! and then the second moment blocks, named `m.<param>` and `v.<param>`.
//! `adam -` marks a checkpoint without optimizer state.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use seqchat_core::corpus::Vocab;
use seqchat_core::model::{ModelConfig, Seq2SeqParams};
use seqchat_core::train::AdamState;
use seqchat_core::Tensor2;
use thiserror::Error;

pub const MAGIC: &str = "SQC1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: Seq2SeqParams<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Epochs completed.
    pub epoch: usize,
    pub seed: u64,
    /// Pairs held out for validation when training.
    pub validation: usize,
}

fn write_block(out: &mut Vec<u8>, name: &str, t: &Tensor2<f32>) {
    let _ = writeln!(out, "{name} {} {}", t.rows(), t.cols());
    out.reserve(t.len() * 4);
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str, CheckpointError> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("truncated header"))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| corrupt("header is not UTF-8"))
    }

    fn keyed(&mut self, key: &str) -> Result<&'a str, CheckpointError> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .ok_or_else(|| corrupt(format!("expected {key:?}, found {line:?}")))
    }

    fn number<N: std::str::FromStr>(&mut self, key: &str) -> Result<N, CheckpointError> {
        let v = self.keyed(key)?;
        v.parse().map_err(|_| corrupt(format!("bad {key} value {v:?}")))
    }

    fn block(&mut self, name: &str, into: &mut Tensor2<f32>) -> Result<(), CheckpointError> {
        let header = self.line()?;
        let expect = format!("{name} {} {}", into.rows(), into.cols());
        if header != expect {
            return Err(corrupt(format!("expected tensor block {expect:?}, found {header:?}")));
        }
        let n = into.len() * 4;
        let raw = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| corrupt(format!("truncated tensor {name}")))?;
        for (x, chunk) in into.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        self.pos += n;
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let _ = writeln!(out, "{MAGIC}\nversion {FORMAT_VERSION}");
        let _ = writeln!(out, "epoch {}\nseed {}\nvalidation {}", self.epoch, self.seed, self.validation);
        let kv = self.config.to_kv_lines();
        let _ = writeln!(out, "config {}", kv.len());
        for line in kv {
            let _ = writeln!(out, "{line}");
        }
        let _ = writeln!(out, "vocab {}", self.vocab.len());
        for w in self.vocab.words() {
            let _ = writeln!(out, "{w}");
        }
        let names = self.params.names();
        match &self.adam {
            Some(a) => {
                let _ = writeln!(out, "tensors {} adam {}", names.len(), a.step);
            }
            None => {
                let _ = writeln!(out, "tensors {} adam -", names.len());
            }
        }
        self.params.for_each(|name, t| write_block(&mut out, name, t));
        if let Some(a) = &self.adam {
            a.m.for_each(|name, t| write_block(&mut out, &format!("m.{name}"), t));
            a.v.for_each(|name, t| write_block(&mut out, &format!("v.{name}"), t));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut c = Cursor { bytes, pos: 0 };
        if !bytes.starts_with(MAGIC.as_bytes()) || c.line()? != MAGIC {
            return Err(corrupt("bad magic (not a seqchat checkpoint)"));
        }
        let version: u32 = c.number("version")?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version} (this build reads {FORMAT_VERSION})")));
        }
        let epoch = c.number("epoch")?;
        let seed = c.number("seed")?;
        let validation = c.number("validation")?;

        let n: usize = c.number("config")?;
        let mut config = ModelConfig::default();
        for _ in 0..n {
            let line = c.line()?;
            let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("bad config line {line:?}")))?;
            config.set(k, v).map_err(|e| corrupt(e.to_string()))?;
        }
        config.validate().map_err(|e| corrupt(e.to_string()))?;

        let n: usize = c.number("vocab")?;
        if n != config.vocab_size {
            return Err(corrupt(format!("vocabulary has {n} words but vocab_size is {}", config.vocab_size)));
        }
        let mut words = Vec::with_capacity(n);
        for _ in 0..n {
            words.push(c.line()?);
        }
        let vocab = Vocab::from_words(&words).map_err(|e| corrupt(e.to_string()))?;

        let line = c.keyed("tensors")?;
        let (count, adam_step) = match line.split_once(" adam ") {
            Some((count, step)) => (count, step),
            None => return Err(corrupt(format!("bad tensors line {line:?}"))),
        };
        let floats = config.parameter_count().saturating_mul(if adam_step == "-" { 1 } else { 3 });
        if (bytes.len() - c.pos) / 4 < floats {
            return Err(corrupt(format!("truncated: {floats} tensor values declared")));
        }
        let mut params = Seq2SeqParams::zeros(&config);
        if count.parse::<usize>().ok() != Some(params.names().len()) {
            return Err(corrupt(format!("tensor count {count:?} does not match the configuration")));
        }
        let mut status = Ok(());
        params.for_each_mut(|name, t| {
            if status.is_ok() {
                status = c.block(name, t);
            }
        });
        status?;
        let adam = match adam_step {
            "-" => None,
            step => {
                let step = step.parse().map_err(|_| corrupt(format!("bad adam step {step:?}")))?;
                let mut state = AdamState { m: params.zeros_like(), v: params.zeros_like(), step };
                let mut status = Ok(());
                for (prefix, moments) in [("m", &mut state.m), ("v", &mut state.v)] {
                    moments.for_each_mut(|name, t| {
                        if status.is_ok() {
                            status = c.block(&format!("{prefix}.{name}"), t);
                        }
                    });
                }
                status?;
                Some(state)
            }
        };
        if c.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        Ok(Self { config, vocab, params, adam, epoch, seed, validation })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes =
            fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }
}

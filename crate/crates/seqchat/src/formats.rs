//! Line-oriented dataset and vocabulary files.
//!
//! A dataset starts with `seqchat-dataset v1 <vocab_size> <buckets>` and
//! holds one pair per line, source and target ids separated by `|`:
//!
//! ```text
//! seqchat-dataset v1 9 5,10
//! 0 8 7 6 5 | 1 4 5 6 2 0 0 0 0 0
//! ```
//!
//! A vocabulary file has one word per line, the line number being the id.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use seqchat_core::corpus::{format_buckets, parse_buckets, Bucket, CorpusError, TokenizedPair, Vocab};
use thiserror::Error;

pub const DATASET_TAG: &str = "seqchat-dataset";
pub const DATASET_VERSION: &str = "v1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("dataset header: {0}")]
    Header(String),
    #[error("dataset line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("vocabulary: {0}")]
    Vocab(#[from] CorpusError),
}

impl FormatError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub vocab_size: usize,
    pub buckets: Vec<Bucket>,
    pub pairs: Vec<TokenizedPair>,
}

fn join_ids(ids: &[usize], out: &mut String) {
    for (k, id) in ids.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{id}");
    }
}

impl Dataset {
    pub fn to_text(&self) -> String {
        let mut out =
            format!("{DATASET_TAG} {DATASET_VERSION} {} {}\n", self.vocab_size, format_buckets(&self.buckets));
        for p in &self.pairs {
            join_ids(&p.src, &mut out);
            out.push_str(" | ");
            join_ids(&p.tgt, &mut out);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, FormatError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| FormatError::Header("empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let [tag, version, size, buckets] = fields[..] else {
            return Err(FormatError::Header(format!("expected 4 fields, found {}", fields.len())));
        };
        if tag != DATASET_TAG {
            return Err(FormatError::Header(format!("not a dataset file (starts with {tag:?})")));
        }
        if version != DATASET_VERSION {
            return Err(FormatError::Header(format!("unsupported version {version}")));
        }
        let vocab_size: usize = size.parse().map_err(|_| FormatError::Header(format!("bad vocab size {size:?}")))?;
        let buckets = parse_buckets(buckets).map_err(|e| FormatError::Header(e.to_string()))?;

        let mut pairs = Vec::new();
        for (k, line) in lines.enumerate() {
            let line_no = k + 2;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| FormatError::Line { line: line_no, message };
            let (src, tgt) = line.split_once('|').ok_or_else(|| bad("missing '|'".into()))?;
            let ids = |part: &str| -> Result<Vec<usize>, FormatError> {
                part.split_whitespace()
                    .map(|t| match t.parse::<usize>() {
                        Ok(id) if id < vocab_size => Ok(id),
                        Ok(id) => Err(bad(format!("id {id} outside vocabulary of {vocab_size}"))),
                        Err(_) => Err(bad(format!("bad id {t:?}"))),
                    })
                    .collect()
            };
            let (src, tgt) = (ids(src)?, ids(tgt)?);
            let bucket = buckets
                .iter()
                .position(|b| b.src_cap == src.len() && b.tgt_cap == tgt.len())
                .ok_or_else(|| bad(format!("lengths {}/{} match no bucket", src.len(), tgt.len())))?;
            pairs.push(TokenizedPair { src, tgt, bucket });
        }
        Ok(Self { vocab_size, buckets, pairs })
    }

    pub fn read(path: &Path) -> Result<Self, FormatError> {
        Self::parse(&fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<(), FormatError> {
        fs::write(path, self.to_text()).map_err(|e| FormatError::io(path, e))
    }
}

pub fn vocab_to_text(vocab: &Vocab) -> String {
    let mut out = String::new();
    for w in vocab.words() {
        out.push_str(w);
        out.push('\n');
    }
    out
}

pub fn parse_vocab(text: &str) -> Result<Vocab, FormatError> {
    let words: Vec<&str> = text.lines().collect();
    Ok(Vocab::from_words(&words)?)
}

pub fn read_vocab(path: &Path) -> Result<Vocab, FormatError> {
    parse_vocab(&fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?)
}

pub fn write_vocab(vocab: &Vocab, path: &Path) -> Result<(), FormatError> {
    fs::write(path, vocab_to_text(vocab)).map_err(|e| FormatError::io(path, e))
}

//! Movie-dialog corpus ingestion.
//!
//! The pipeline runs: [`parse_corpus`] → [`resolve_conversations`] →
//! [`extract_pairs`] (collapses same-speaker runs and cleans text) →
//! [`filter_pairs`] → [`build_vocab`] → [`encode_pair`] → [`batch_dataset`].
//! [`preprocess`] chains all of it and keeps the counters.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const GO: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<PAD>", "<GO>", "<EOS>", "<UNK>"];

/// Field delimiter of the distributed corpus files.
pub const DEFAULT_SEPARATOR: &str = "+++$+++";
pub const DEFAULT_MIN_LEN: usize = 2;
pub const DEFAULT_MAX_LEN: usize = 5;
pub const DEFAULT_KEEP_N: usize = 6282;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CorpusError {
    #[error("invalid length range: min {min} > max {max}")]
    InvalidRange { min: usize, max: usize },
    #[error("invalid bucket ({src_cap}, {tgt_cap}): need src_cap >= 1 and tgt_cap >= 3")]
    InvalidBucket { src_cap: usize, tgt_cap: usize },
    #[error("cannot parse bucket list {0:?}")]
    BucketSyntax(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("vocabulary must start with {SPECIAL_TOKENS:?}")]
    MissingSpecials,
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateWord(String),
    #[error("token id {id} is outside the vocabulary of {size}")]
    IdOutOfVocab { id: TokenId, size: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawUtterance {
    pub line_id: String,
    pub character_id: String,
    pub movie_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedCorpus {
    pub utterances: Vec<RawUtterance>,
    pub conversations: Vec<Vec<String>>,
    /// Utterance lines that were not valid UTF-8 or had too few fields.
    pub skipped_lines: usize,
    /// Conversation entries that were unparseable or referenced a missing
    /// line id.
    pub malformed_conversations: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogPair {
    pub question: String,
    pub answer: String,
}

impl DialogPair {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self { question: question.into(), answer: answer.into() }
    }
}

fn split_lines(bytes: &[u8]) -> impl Iterator<Item = &[u8]> {
    bytes.split(|&b| b == b'\n').map(|l| l.strip_suffix(b"\r").unwrap_or(l))
}

fn fields<'a>(line: &'a str, separator: &str) -> Vec<&'a str> {
    line.split(separator).map(str::trim).collect()
}

/// Parses the utterance and conversation files.
///
/// Utterance lines are `line_id SEP character_id SEP movie_id SEP text`, or
/// the five-field form with a character name before the text. Conversation
/// lines carry the ordered line ids in their last field, e.g.
/// `u0 SEP u2 SEP m0 SEP ['L194', 'L195']`. Lines that are not valid UTF-8
/// are skipped and counted; so are conversations naming unknown line ids.
pub fn parse_corpus(lines: &[u8], conversations: &[u8], separator: &str) -> ParsedCorpus {
    let mut out = ParsedCorpus::default();
    for raw in split_lines(lines) {
        if raw.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let Ok(line) = core::str::from_utf8(raw) else {
            out.skipped_lines += 1;
            continue;
        };
        let f = fields(line, separator);
        let text = match f.len() {
            4 => f[3].to_string(),
            n if n >= 5 => f[4..].join(separator),
            _ => {
                out.skipped_lines += 1;
                continue;
            }
        };
        if f[0].is_empty() {
            out.skipped_lines += 1;
            continue;
        }
        out.utterances.push(RawUtterance {
            line_id: f[0].to_string(),
            character_id: f[1].to_string(),
            movie_id: f[2].to_string(),
            text,
        });
    }

    let known: BTreeMap<&str, ()> = out.utterances.iter().map(|u| (u.line_id.as_str(), ())).collect();
    let mut convs = Vec::new();
    for raw in split_lines(conversations) {
        if raw.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let Ok(line) = core::str::from_utf8(raw) else {
            out.malformed_conversations += 1;
            continue;
        };
        let f = fields(line, separator);
        let ids: Vec<String> = f
            .last()
            .map(|list| {
                list.split(|c: char| c == ',' || c == '[' || c == ']' || c.is_whitespace())
                    .map(|s| s.trim_matches(|c| c == '\'' || c == '"'))
                    .filter(|s| !s.is_empty())
                    .map(ToString::to_string)
                    .collect()
            })
            .unwrap_or_default();
        if ids.is_empty() || ids.iter().any(|id| !known.contains_key(id.as_str())) {
            out.malformed_conversations += 1;
            continue;
        }
        convs.push(ids);
    }
    out.conversations = convs;
    out
}

/// Maps each conversation's line ids to utterances, in conversation order.
pub fn resolve_conversations(parsed: &ParsedCorpus) -> Vec<Vec<&RawUtterance>> {
    let by_id: BTreeMap<&str, &RawUtterance> = parsed.utterances.iter().map(|u| (u.line_id.as_str(), u)).collect();
    parsed
        .conversations
        .iter()
        .map(|ids| ids.iter().filter_map(|id| by_id.get(id.as_str()).copied()).collect())
        .collect()
}

/// Collapses consecutive utterances by the same character to the last one
/// of each run, then emits every adjacent pair with both sides cleaned.
pub fn extract_pairs(conversations: &[Vec<&RawUtterance>]) -> Vec<DialogPair> {
    let mut pairs = Vec::new();
    for conv in conversations {
        let mut turns: Vec<&RawUtterance> = Vec::with_capacity(conv.len());
        for &u in conv {
            match turns.last_mut() {
                Some(last) if last.character_id == u.character_id => *last = u,
                _ => turns.push(u),
            }
        }
        for w in turns.windows(2) {
            pairs.push(DialogPair { question: clean_text(&w[0].text), answer: clean_text(&w[1].text) });
        }
    }
    pairs
}

#[inline]
fn is_spaced_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '?' | '!')
}

#[inline]
fn is_kept_punct(c: char) -> bool {
    is_spaced_punct(c) || c == '\''
}

/// Normalizes an utterance.
///
/// Lowercases, keeps only `a-z`, spaces and `. , ? ! '`, reduces a run of one
/// repeated punctuation mark to a single mark, sets `. , ? !` off by single
/// spaces (apostrophes stay inside their word), collapses whitespace and
/// trims. Digits and every other character are dropped.
pub fn clean_text(raw: &str) -> String {
    let mut kept = String::with_capacity(raw.len());
    for ch in raw.chars().flat_map(char::to_lowercase) {
        if ch.is_ascii_lowercase() || is_kept_punct(ch) {
            kept.push(ch);
        } else if ch.is_whitespace() {
            kept.push(' ');
        }
    }

    let mut spaced = String::with_capacity(kept.len() + 8);
    let mut prev: Option<char> = None;
    for ch in kept.chars() {
        if is_kept_punct(ch) && prev == Some(ch) {
            continue;
        }
        if is_spaced_punct(ch) {
            spaced.push(' ');
            spaced.push(ch);
            spaced.push(' ');
        } else {
            spaced.push(ch);
        }
        prev = Some(ch);
    }

    let mut out = String::with_capacity(spaced.len());
    for word in spaced.split(' ').filter(|w| !w.is_empty()) {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps pairs whose question and answer both have between `min_len` and
/// `max_len` whitespace tokens, inclusive.
pub fn filter_pairs(pairs: &[DialogPair], min_len: usize, max_len: usize) -> Result<Vec<DialogPair>, CorpusError> {
    if min_len > max_len {
        return Err(CorpusError::InvalidRange { min: min_len, max: max_len });
    }
    let ok = |s: &str| (min_len..=max_len).contains(&token_count(s));
    Ok(pairs.iter().filter(|p| ok(&p.question) && ok(&p.answer)).cloned().collect())
}

/// Bidirectional word ↔ id map. Ids 0..4 are the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: BTreeMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from its id-ordered word list. The first four
    /// entries must be the special tokens.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self, CorpusError> {
        if words.len() < 4 || words.iter().zip(SPECIAL_TOKENS).any(|(w, s)| w.as_ref() != s) {
            return Err(CorpusError::MissingSpecials);
        }
        let mut ids = BTreeMap::new();
        let mut list = Vec::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            let w = w.as_ref().to_string();
            if ids.insert(w.clone(), i).is_some() {
                return Err(CorpusError::DuplicateWord(w));
            }
            list.push(w);
        }
        Ok(Self { words: list, ids })
    }

    pub fn specials_only() -> Self {
        Self::from_words(&SPECIAL_TOKENS).expect("specials are valid")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id_of(&self, word: &str) -> Option<TokenId> {
        self.ids.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> TokenId {
        self.id_of(word).unwrap_or(UNK)
    }

    pub fn word_of(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Whitespace-splits cleaned text into ids, mapping unknown words to UNK.
    pub fn encode_words(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.id_or_unk(w)).collect()
    }
}

/// Keeps the `keep_n` most frequent words. Ties go to the word seen first
/// (questions before answers, pair by pair).
pub fn build_vocab(pairs: &[DialogPair], keep_n: usize) -> Vocab {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut order = 0usize;
    for p in pairs {
        for w in p.question.split_whitespace().chain(p.answer.split_whitespace()) {
            let e = counts.entry(w).or_insert_with(|| {
                order += 1;
                (0, order)
            });
            e.0 += 1;
        }
    }
    let mut ranked: Vec<(&str, usize, usize)> =
        counts.into_iter().filter(|(w, _)| !SPECIAL_TOKENS.contains(w)).map(|(w, (c, first))| (w, c, first)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
    ranked.truncate(keep_n);

    let mut words: Vec<&str> = SPECIAL_TOKENS.to_vec();
    words.extend(ranked.iter().map(|r| r.0));
    Vocab::from_words(&words).expect("ranked words are unique and not special")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Bucket {
    pub src_cap: usize,
    pub tgt_cap: usize,
}

impl Bucket {
    pub fn new(src_cap: usize, tgt_cap: usize) -> Result<Self, CorpusError> {
        if src_cap < 1 || tgt_cap < 3 {
            return Err(CorpusError::InvalidBucket { src_cap, tgt_cap });
        }
        Ok(Self { src_cap, tgt_cap })
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.src_cap, self.tgt_cap)
    }
}

pub fn default_buckets() -> Vec<Bucket> {
    [(5, 10), (10, 15), (20, 25), (40, 50)].iter().map(|&(s, t)| Bucket { src_cap: s, tgt_cap: t }).collect()
}

/// Parses `"5,10;10,15"` into buckets sorted by source capacity.
pub fn parse_buckets(text: &str) -> Result<Vec<Bucket>, CorpusError> {
    let syntax = || CorpusError::BucketSyntax(text.to_string());
    let mut out = Vec::new();
    for item in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (s, t) = item.split_once(',').ok_or_else(syntax)?;
        let s = s.trim().parse().map_err(|_| syntax())?;
        let t = t.trim().parse().map_err(|_| syntax())?;
        out.push(Bucket::new(s, t)?);
    }
    if out.is_empty() {
        return Err(syntax());
    }
    out.sort();
    Ok(out)
}

pub fn format_buckets(buckets: &[Bucket]) -> String {
    let parts: Vec<String> = buckets.iter().map(ToString::to_string).collect();
    parts.join(";")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPair {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    pub bucket: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("pair does not fit any bucket (source {src_tokens}, target {tgt_tokens} tokens)")]
pub struct Discarded {
    pub src_tokens: usize,
    pub tgt_tokens: usize,
}

/// Smallest bucket holding `src_tokens` source tokens and, when given,
/// `tgt_tokens` target tokens plus GO and EOS.
pub fn choose_bucket(buckets: &[Bucket], src_tokens: usize, tgt_tokens: Option<usize>) -> Option<usize> {
    buckets.iter().position(|b| src_tokens <= b.src_cap && tgt_tokens.is_none_or(|t| t + 2 <= b.tgt_cap))
}

/// Left-pads `ids` with PAD to `cap`, content reversed when `reverse`.
pub fn encode_source(ids: &[TokenId], cap: usize, reverse: bool) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(cap);
    out.resize(cap.saturating_sub(ids.len()), PAD);
    if reverse {
        out.extend(ids.iter().rev());
    } else {
        out.extend_from_slice(ids);
    }
    out
}

/// `GO ids EOS`, right-padded with PAD to `cap`.
pub fn encode_target(ids: &[TokenId], cap: usize) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(cap);
    out.push(GO);
    out.extend_from_slice(ids);
    out.push(EOS);
    out.resize(cap.max(out.len()), PAD);
    out
}

pub fn encode_pair(
    pair: &DialogPair,
    vocab: &Vocab,
    buckets: &[Bucket],
    reverse_source: bool,
) -> Result<TokenizedPair, Discarded> {
    let q = vocab.encode_words(&pair.question);
    let a = vocab.encode_words(&pair.answer);
    let bucket =
        choose_bucket(buckets, q.len(), Some(a.len())).ok_or(Discarded { src_tokens: q.len(), tgt_tokens: a.len() })?;
    let b = buckets[bucket];
    Ok(TokenizedPair { src: encode_source(&q, b.src_cap, reverse_source), tgt: encode_target(&a, b.tgt_cap), bucket })
}

/// Inverse of [`encode_source`]: strips PAD and undoes the reversal.
pub fn decode_source(src: &[TokenId], reverse: bool) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = src.iter().copied().filter(|&t| t != PAD).collect();
    if reverse {
        ids.reverse();
    }
    ids
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub bucket: usize,
    pub pairs: Vec<TokenizedPair>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Groups pairs by bucket, shuffles inside each bucket, cuts batches
/// (keeping a short final one) and shuffles the batch order. Deterministic
/// per seed.
pub fn batch_dataset(pairs: &[TokenizedPair], batch_size: usize, seed: u64) -> Result<Vec<Batch>, CorpusError> {
    if pairs.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(CorpusError::ZeroBatchSize);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_bucket: BTreeMap<usize, Vec<TokenizedPair>> = BTreeMap::new();
    for p in pairs {
        by_bucket.entry(p.bucket).or_default().push(p.clone());
    }
    let mut batches = Vec::new();
    for (bucket, mut group) in by_bucket {
        group.shuffle(&mut rng);
        for chunk in group.chunks(batch_size) {
            batches.push(Batch { bucket, pairs: chunk.to_vec() });
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreprocessOptions {
    pub separator: String,
    pub min_len: usize,
    pub max_len: usize,
    pub keep_n: usize,
    pub buckets: Vec<Bucket>,
    pub reverse_source: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            separator: DEFAULT_SEPARATOR.to_string(),
            min_len: DEFAULT_MIN_LEN,
            max_len: DEFAULT_MAX_LEN,
            keep_n: DEFAULT_KEEP_N,
            buckets: default_buckets(),
            reverse_source: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PreprocessStats {
    pub raw_utterances: usize,
    pub skipped_lines: usize,
    pub conversations: usize,
    pub malformed_conversations: usize,
    pub pairs: usize,
    pub filtered_pairs: usize,
    pub discarded_by_bucket: usize,
    pub vocab_size: usize,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub vocab: Vocab,
    pub pairs: Vec<TokenizedPair>,
    pub stats: PreprocessStats,
}

pub fn preprocess(lines: &[u8], conversations: &[u8], opts: &PreprocessOptions) -> Result<Preprocessed, CorpusError> {
    let parsed = parse_corpus(lines, conversations, &opts.separator);
    let resolved = resolve_conversations(&parsed);
    let pairs = extract_pairs(&resolved);
    let filtered = filter_pairs(&pairs, opts.min_len, opts.max_len)?;
    let vocab = build_vocab(&filtered, opts.keep_n);
    let mut encoded = Vec::with_capacity(filtered.len());
    let mut discarded = 0;
    for p in &filtered {
        match encode_pair(p, &vocab, &opts.buckets, opts.reverse_source) {
            Ok(t) => encoded.push(t),
            Err(_) => discarded += 1,
        }
    }
    let stats = PreprocessStats {
        raw_utterances: parsed.utterances.len(),
        skipped_lines: parsed.skipped_lines,
        conversations: parsed.conversations.len(),
        malformed_conversations: parsed.malformed_conversations,
        pairs: pairs.len(),
        filtered_pairs: filtered.len(),
        discarded_by_bucket: discarded,
        vocab_size: vocab.len(),
    };
    Ok(Preprocessed { vocab, pairs: encoded, stats })
}

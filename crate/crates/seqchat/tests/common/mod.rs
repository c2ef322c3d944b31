#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use seqchat::formats::{read_vocab, Dataset};
use seqchat::Checkpoint;
use seqchat_core::corpus::{TokenizedPair, Vocab};
use seqchat_core::model::{ModelConfig, Seq2SeqParams};
use seqchat_core::train::{train, NoObserver, TrainOptions};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cornell").join(name)
}

pub fn golden_dataset() -> Dataset {
    Dataset::read(&fixture("golden/dataset.txt")).unwrap()
}

pub fn golden_vocab() -> Vocab {
    read_vocab(&fixture("golden/vocab.txt")).unwrap()
}

/// The first 32 fixture pairs with distinct questions.
pub fn memorization_pairs(ds: &Dataset) -> Vec<TokenizedPair> {
    let mut seen = BTreeSet::new();
    ds.pairs.iter().filter(|p| seen.insert(p.src.clone())).take(32).cloned().collect()
}

pub fn small_config(ds: &Dataset, width: usize, epochs: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: ds.vocab_size,
        embedding_size: width,
        rnn_size: width,
        batch_size: 8,
        keep_probability: 1.0,
        learning_rate_decay: 1.0,
        epochs,
        beam_width: 1,
        buckets: ds.buckets.clone(),
        ..ModelConfig::default()
    }
}

/// Trains on the memorization pairs with nothing held out.
pub fn trained_checkpoint(width: usize, epochs: usize) -> Checkpoint {
    let ds = golden_dataset();
    let pairs = memorization_pairs(&ds);
    let config = small_config(&ds, width, epochs);
    let opts = TrainOptions { validation_size: Some(0), ..TrainOptions::seeded(0) };
    let out = train(&pairs, &config, &opts, &mut NoObserver).unwrap();
    Checkpoint {
        config,
        vocab: golden_vocab(),
        params: out.params,
        adam: Some(out.adam),
        epoch: epochs,
        seed: 0,
        validation: 0,
    }
}

pub fn untrained_checkpoint(width: usize, seed: u64) -> Checkpoint {
    let ds = golden_dataset();
    let config = small_config(&ds, width, 0);
    Checkpoint {
        params: Seq2SeqParams::init(&config, seed),
        config,
        vocab: golden_vocab(),
        adam: None,
        epoch: 0,
        seed,
        validation: 8,
    }
}

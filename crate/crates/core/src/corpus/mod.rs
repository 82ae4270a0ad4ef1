//! Tokenization, synthetic corpora and MLM corruption.

pub mod batch;
pub mod dataset;
pub mod mlm;
pub mod synth;
pub mod vocab;

use std::fs;
use std::path::Path;

pub use batch::{pack, pad_batch, BatchIter, BatchStream};
pub use dataset::{Dataset, Splits};
pub use mlm::{mlm_mask, MaskedBatch};
pub use synth::{generate_synthetic, Lexicon, SyntheticCorpora, SyntheticCorpusSpec};
pub use vocab::{Vocab, CLS, MASK, NUM_RESERVED, PAD, SEP, UNK};

use crate::error::Result;

/// Writes one sequence per line.
pub fn write_corpus(path: impl AsRef<Path>, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

pub fn encode_all(vocab: &Vocab, lines: &[String]) -> Vec<Vec<usize>> {
    lines.iter().map(|l| vocab.encode(l)).collect()
}

use crate::autodiff::RngState;
use crate::error::{Error, Result};
use crate::model::TokenBatch;

use super::vocab::{MASK, NUM_RESERVED};

/// A token batch with MLM corruption applied.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub input: TokenBatch,
    /// Original id at corrupted positions, `None` everywhere else.
    pub labels: Vec<Option<usize>>,
}

impl MaskedBatch {
    pub fn num_masked(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// Selects each real, non-special token with probability `ratio`; selected
/// tokens become MASK (80%), a random non-special id (10%) or stay (10%).
pub fn mlm_mask(batch: &TokenBatch, ratio: f32, vocab_size: usize, rng: &mut RngState) -> Result<MaskedBatch> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Contract(format!("mask ratio must be in (0, 1), got {ratio}")));
    }
    if vocab_size <= NUM_RESERVED {
        return Err(Error::Contract("vocabulary has no maskable tokens".into()));
    }
    let mut input = batch.clone();
    let mut labels = vec![None; batch.ids.len()];
    for i in 0..batch.ids.len() {
        let id = batch.ids[i];
        if !batch.padding_mask[i] || id < NUM_RESERVED {
            continue;
        }
        if rng.next_f32() >= ratio {
            continue;
        }
        labels[i] = Some(id);
        let u = rng.next_f32();
        if u < 0.8 {
            input.ids[i] = MASK;
        } else if u < 0.9 {
            input.ids[i] = NUM_RESERVED + rng.below(vocab_size - NUM_RESERVED);
        }
    }
    Ok(MaskedBatch { input, labels })
}

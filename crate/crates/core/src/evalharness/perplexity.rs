use crate::autodiff::{Graph, RngState, Stream};
use crate::corpus::{mlm_mask, pack, pad_batch};
use crate::datrain::mlm_loss_from_trace;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, GateMode};

const MASK_RATIO: f32 = 0.15;

/// `exp` of the mean masked-token cross entropy over `sequences`.
///
/// Sequences are taken in order in chunks of `batch_size`; chunk `i` is
/// corrupted with `RngState::new(seed)` forked at `i`, so the masking is a
/// function of the corpus and seed only. Dropout is disabled.
pub fn perplexity(model: &EncoderModel, sequences: &[Vec<usize>], seed: u64, batch_size: usize) -> Result<f64> {
    let seq_len = model.config().max_seq_len;
    let packed = pack(sequences, seq_len);
    let base = RngState::new(seed).stream(Stream::MlmMask);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, chunk) in packed.chunks(batch_size.max(1)).enumerate() {
        let len = chunk.iter().map(Vec::len).max().unwrap_or(1);
        let seqs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        let batch = pad_batch(&seqs, len);
        let masked = mlm_mask(&batch, MASK_RATIO, model.config().vocab_size, &mut base.fork(i as u64))?;
        let n = masked.num_masked();
        if n == 0 {
            continue;
        }
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let trace = model.encoder_forward(&mut g, &p, &masked.input, &GateMode::Off, None)?;
        let loss = mlm_loss_from_trace(model, &mut g, &p, &trace, &masked.labels)?;
        total += g.value(loss).item() as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok((total / count as f64).exp())
}

use crate::autodiff::RngState;
use crate::error::{Error, Result};
use crate::model::TokenBatch;

use super::vocab::PAD;

/// Splits sequences longer than `seq_len` into consecutive chunks.
pub fn pack(corpus: &[Vec<usize>], seq_len: usize) -> Vec<Vec<usize>> {
    corpus
        .iter()
        .flat_map(|s| s.chunks(seq_len.max(1)).map(<[usize]>::to_vec))
        .filter(|c| !c.is_empty())
        .collect()
}

/// One epoch over a packed corpus in a seeded order, padded to `seq_len`.
#[derive(Debug, Clone)]
pub struct BatchIter<'a> {
    seqs: Vec<&'a [usize]>,
    batch_size: usize,
    seq_len: usize,
    pos: usize,
}

impl<'a> BatchIter<'a> {
    pub fn new(packed: &'a [Vec<usize>], batch_size: usize, seq_len: usize, shuffle_rng: &RngState) -> Result<Self> {
        if packed.is_empty() {
            return Err(Error::Contract("cannot batch an empty corpus".into()));
        }
        if batch_size == 0 || seq_len == 0 {
            return Err(Error::Contract("batch_size and seq_len must be >= 1".into()));
        }
        if let Some(s) = packed.iter().find(|s| s.len() > seq_len) {
            return Err(Error::Contract(format!(
                "sequence of length {} exceeds seq_len {seq_len}; pack it first",
                s.len()
            )));
        }
        let mut seqs: Vec<&[usize]> = packed.iter().map(Vec::as_slice).collect();
        shuffle_rng.clone().shuffle(&mut seqs);
        Ok(Self {
            seqs,
            batch_size,
            seq_len,
            pos: 0,
        })
    }
}

pub fn pad_batch(seqs: &[&[usize]], seq_len: usize) -> TokenBatch {
    let mut ids = Vec::with_capacity(seqs.len() * seq_len);
    let mut mask = Vec::with_capacity(seqs.len() * seq_len);
    for s in seqs {
        ids.extend_from_slice(s);
        mask.extend(std::iter::repeat_n(true, s.len()));
        ids.extend(std::iter::repeat_n(PAD, seq_len - s.len()));
        mask.extend(std::iter::repeat_n(false, seq_len - s.len()));
    }
    TokenBatch::new(ids, seqs.len(), seq_len, mask).expect("consistent batch")
}

impl Iterator for BatchIter<'_> {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        if self.pos >= self.seqs.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.seqs.len());
        let batch = pad_batch(&self.seqs[self.pos..end], self.seq_len);
        self.pos = end;
        Some(batch)
    }
}

/// Endless stream of batches; epoch `e` is shuffled with `rng.fork(e)`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    packed: Vec<Vec<usize>>,
    batch_size: usize,
    seq_len: usize,
    rng: RngState,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchStream {
    pub fn new(corpus: &[Vec<usize>], batch_size: usize, seq_len: usize, rng: RngState) -> Result<Self> {
        let packed = pack(corpus, seq_len);
        if packed.is_empty() {
            return Err(Error::Contract("cannot batch an empty corpus".into()));
        }
        if batch_size == 0 {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        let mut s = Self {
            packed,
            batch_size,
            seq_len,
            rng,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.packed.len()).collect();
        self.rng.fork(self.epoch).shuffle(&mut self.order);
        self.pos = 0;
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let seqs: Vec<&[usize]> = self.order[self.pos..end].iter().map(|&i| self.packed[i].as_slice()).collect();
        self.pos = end;
        pad_batch(&seqs, self.seq_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| vec![5 + i, 6 + i]).collect()
    }

    #[test]
    fn batch_sizes() {
        let packed = pack(&corpus(10), 4);
        let sizes: Vec<usize> = BatchIter::new(&packed, 4, 4, &RngState::new(1)).unwrap().map(|b| b.batch).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_order() {
        let packed = pack(&corpus(10), 4);
        let a: Vec<_> = BatchIter::new(&packed, 3, 4, &RngState::new(9)).unwrap().collect();
        let b: Vec<_> = BatchIter::new(&packed, 3, 4, &RngState::new(9)).unwrap().collect();
        assert_eq!(a, b);
    }

    #[test]
    fn padding_and_packing() {
        let packed = pack(&[vec![5, 6, 7, 8, 9]], 2);
        assert_eq!(packed, vec![vec![5, 6], vec![7, 8], vec![9]]);
        let b = pad_batch(&[&[5, 6], &[9]], 3);
        assert_eq!(b.ids, vec![5, 6, PAD, 9, PAD, PAD]);
        assert_eq!(b.padding_mask, vec![true, true, false, true, false, false]);
    }

    #[test]
    fn stream_cycles_epochs() {
        let mut s = BatchStream::new(&corpus(5), 2, 4, RngState::new(2)).unwrap();
        let sizes: Vec<usize> = (0..6).map(|_| s.next_batch().batch).collect();
        assert_eq!(sizes, vec![2, 2, 1, 2, 2, 1]);
    }
}

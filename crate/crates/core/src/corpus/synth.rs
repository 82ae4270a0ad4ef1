//! Synthetic general and domain corpora with controlled vocabulary overlap.
//!
//! Tokens come in (head, tail) pairs. Pairs are dealt round-robin by Zipf
//! rank into `num_topics` topics. A sequence picks one topic with probability
//! equal to its Zipf mass, then is a run of two-token phrases: the head is
//! drawn from the Zipf law restricted to that topic and is followed by its own
//! tail with probability `continuation_prob`, otherwise by a Zipf-drawn tail
//! of some other pair of the topic. Pair frequencies over the whole corpus
//! therefore follow the unrestricted Zipf law. Both corpora share the `s*` pairs;
//! `g*` pairs appear only in the general corpus and `d*` pairs only in the
//! domain corpus. The first `polysemy_pairs` shared heads take a different
//! tail in the domain corpus, so the same word has a domain-specific usage.

use serde::{Deserialize, Serialize};

use crate::autodiff::RngState;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub shared_vocab_size: usize,
    pub general_only_size: usize,
    pub domain_only_size: usize,
    pub zipf_exponent: f64,
    pub sequences_per_corpus: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub polysemy_pairs: usize,
    pub continuation_prob: f64,
    pub num_topics: usize,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            shared_vocab_size: 1200,
            general_only_size: 400,
            domain_only_size: 400,
            zipf_exponent: 1.0,
            sequences_per_corpus: 20_000,
            seq_len_min: 16,
            seq_len_max: 48,
            polysemy_pairs: 40,
            continuation_prob: 0.9,
            num_topics: 16,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self, max_seq_len: Option<usize>) -> Result<()> {
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return Err(Error::Config(format!(
                "1 <= seq_len_min <= seq_len_max (got {}..{})",
                self.seq_len_min, self.seq_len_max
            )));
        }
        if let Some(t) = max_seq_len {
            if self.seq_len_max > t {
                return Err(Error::Config(format!(
                    "seq_len_max {} exceeds model max_seq_len {t}",
                    self.seq_len_max
                )));
            }
        }
        if !(self.zipf_exponent >= 0.0) {
            return Err(Error::Config("zipf_exponent >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.continuation_prob) {
            return Err(Error::Config("0 <= continuation_prob <= 1".into()));
        }
        if self.num_topics == 0 {
            return Err(Error::Config("num_topics >= 1".into()));
        }
        if self.shared_vocab_size + self.general_only_size == 0
            || self.shared_vocab_size + self.domain_only_size == 0
        {
            return Err(Error::Config("each corpus needs at least one token".into()));
        }
        if self.polysemy_pairs > self.shared_vocab_size.div_ceil(2) {
            return Err(Error::Config(format!(
                "polysemy_pairs {} exceeds shared pair count {}",
                self.polysemy_pairs,
                self.shared_vocab_size.div_ceil(2)
            )));
        }
        Ok(())
    }

    /// Upper bound on distinct tokens (excluding reserved ids).
    pub fn token_count(&self) -> usize {
        self.shared_vocab_size + self.general_only_size + self.domain_only_size
    }
}

/// A two-token phrase template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub head: String,
    pub tail: String,
}

/// Token inventory of one corpus, pairs in Zipf rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLexicon {
    pub pairs: Vec<Pair>,
}

/// Everything the generator decided, so downstream tasks can refer to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub general: CorpusLexicon,
    pub domain: CorpusLexicon,
    pub shared_tokens: Vec<String>,
    pub general_only_tokens: Vec<String>,
    pub domain_only_tokens: Vec<String>,
    /// Shared heads whose continuation differs: `(head, general_tail, domain_tail)`.
    pub polysemy: Vec<(String, String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpora {
    pub general: Vec<String>,
    pub domain: Vec<String>,
    pub lexicon: Lexicon,
}

fn names(prefix: char, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:04}")).collect()
}

fn pairs_of(tokens: &[String]) -> Vec<Pair> {
    tokens
        .chunks(2)
        .map(|c| Pair {
            head: c[0].clone(),
            tail: c.get(1).unwrap_or(&c[0]).clone(),
        })
        .collect()
}

/// Zipf weight `r^-s` of the pair at 0-based rank `i`.
fn zipf_weight(i: usize, s: f64) -> f64 {
    ((i + 1) as f64).powf(-s)
}

fn cumulative(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn sample_cdf(cdf: &[f64], rng: &mut RngState) -> usize {
    let u = rng.next_f64() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

/// Pair ranks of each topic with their within-topic cumulative weights.
struct Topic {
    members: Vec<usize>,
    cdf: Vec<f64>,
}

impl Topic {
    fn sample(&self, rng: &mut RngState) -> usize {
        self.members[sample_cdf(&self.cdf, rng)]
    }
}

fn generate_one(spec: &SyntheticCorpusSpec, lex: &CorpusLexicon, mut rng: RngState) -> Vec<String> {
    let k = spec.num_topics.min(lex.pairs.len()).max(1);
    let topics: Vec<Topic> = (0..k)
        .map(|t| {
            let members: Vec<usize> = (t..lex.pairs.len()).step_by(k).collect();
            let cdf = cumulative(members.iter().map(|&i| zipf_weight(i, spec.zipf_exponent)));
            Topic { members, cdf }
        })
        .collect();
    let topic_cdf = cumulative(topics.iter().map(|t| t.cdf[t.cdf.len() - 1]));
    let span = spec.seq_len_max - spec.seq_len_min + 1;
    let mut lines = Vec::with_capacity(spec.sequences_per_corpus);
    for _ in 0..spec.sequences_per_corpus {
        let len = spec.seq_len_min + rng.below(span);
        let topic = &topics[sample_cdf(&topic_cdf, &mut rng)];
        let mut toks: Vec<&str> = Vec::with_capacity(len);
        while toks.len() < len {
            let pair = &lex.pairs[topic.sample(&mut rng)];
            toks.push(&pair.head);
            if toks.len() == len {
                break;
            }
            if rng.next_f64() < spec.continuation_prob {
                toks.push(&pair.tail);
            } else {
                toks.push(&lex.pairs[topic.sample(&mut rng)].tail);
            }
        }
        lines.push(toks.join(" "));
    }
    lines
}

/// Generates the two corpora; identical `spec` and `rng` give identical text.
pub fn generate_synthetic(spec: &SyntheticCorpusSpec, rng: &RngState) -> Result<SyntheticCorpora> {
    spec.validate(None)?;
    let shared = names('s', spec.shared_vocab_size);
    let general_only = names('g', spec.general_only_size);
    let domain_only = names('d', spec.domain_only_size);

    let shared_pairs = pairs_of(&shared);
    let mut domain_shared = shared_pairs.clone();
    let k = spec.polysemy_pairs;
    let mut polysemy = Vec::with_capacity(k);
    if k >= 2 {
        for i in 0..k {
            domain_shared[i].tail = shared_pairs[(i + 1) % k].tail.clone();
            polysemy.push((
                shared_pairs[i].head.clone(),
                shared_pairs[i].tail.clone(),
                domain_shared[i].tail.clone(),
            ));
        }
    }

    let mut general_pairs: Vec<Pair> = shared_pairs.into_iter().chain(pairs_of(&general_only)).collect();
    let mut domain_pairs: Vec<Pair> = domain_shared.into_iter().chain(pairs_of(&domain_only)).collect();
    rng.fork(2).shuffle(&mut general_pairs);
    rng.fork(3).shuffle(&mut domain_pairs);

    let lexicon = Lexicon {
        general: CorpusLexicon { pairs: general_pairs },
        domain: CorpusLexicon { pairs: domain_pairs },
        shared_tokens: shared,
        general_only_tokens: general_only,
        domain_only_tokens: domain_only,
        polysemy,
    };
    Ok(SyntheticCorpora {
        general: generate_one(spec, &lexicon.general, rng.fork(0)),
        domain: generate_one(spec, &lexicon.domain, rng.fork(1)),
        lexicon,
    })
}

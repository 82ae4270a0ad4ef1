//! Generated corpora plus the vocabulary and lexicon derived from them.

use std::fs;
use std::path::Path;

use super::synth::{generate_synthetic, Lexicon, SyntheticCorpusSpec};
use super::vocab::Vocab;
use super::{encode_all, read_corpus, write_corpus};
use crate::autodiff::RngState;
use crate::error::{Error, Result};

pub const GENERAL_FILE: &str = "general.txt";
pub const DOMAIN_FILE: &str = "domain.txt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LEXICON_FILE: &str = "lexicon.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub lexicon: Lexicon,
    pub general: Vec<String>,
    pub domain: Vec<String>,
}

/// Encoded train / held-out portions of both corpora.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub general_train: Vec<Vec<usize>>,
    pub general_heldout: Vec<Vec<usize>>,
    pub domain_train: Vec<Vec<usize>>,
    pub domain_heldout: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn generate(spec: &SyntheticCorpusSpec, seed: u64) -> Result<Self> {
        let c = generate_synthetic(spec, &RngState::new(seed))?;
        let all: Vec<&String> = c.general.iter().chain(&c.domain).collect();
        let vocab = Vocab::build(&all, 1)?;
        Ok(Self {
            vocab,
            lexicon: c.lexicon,
            general: c.general,
            domain: c.domain,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_corpus(dir.join(GENERAL_FILE), &self.general)?;
        write_corpus(dir.join(DOMAIN_FILE), &self.domain)?;
        fs::write(dir.join(VOCAB_FILE), self.vocab.to_json())?;
        fs::write(dir.join(LEXICON_FILE), serde_json::to_string_pretty(&self.lexicon)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let missing: Vec<String> = [GENERAL_FILE, DOMAIN_FILE, VOCAB_FILE, LEXICON_FILE]
            .iter()
            .filter(|f| !dir.join(f).is_file())
            .map(|f| dir.join(f).display().to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Contract(format!("missing corpus files: {}", missing.join(", "))));
        }
        Ok(Self {
            vocab: Vocab::from_json(&fs::read_to_string(dir.join(VOCAB_FILE))?)?,
            lexicon: serde_json::from_str(&fs::read_to_string(dir.join(LEXICON_FILE))?)?,
            general: read_corpus(dir.join(GENERAL_FILE))?,
            domain: read_corpus(dir.join(DOMAIN_FILE))?,
        })
    }

    /// The last `heldout` lines of each corpus are held out.
    pub fn split(&self, heldout: usize) -> Result<Splits> {
        let cut = |lines: &[String]| -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
            if heldout == 0 || heldout >= lines.len() {
                return Err(Error::Config(format!(
                    "0 < heldout_sequences < corpus size {} (got {heldout})",
                    lines.len()
                )));
            }
            let at = lines.len() - heldout;
            Ok((encode_all(&self.vocab, &lines[..at]), encode_all(&self.vocab, &lines[at..])))
        };
        let (general_train, general_heldout) = cut(&self.general)?;
        let (domain_train, domain_heldout) = cut(&self.domain)?;
        Ok(Splits {
            general_train,
            general_heldout,
            domain_train,
            domain_heldout,
        })
    }
}

//! Synthetic end tasks built from corpus sentences.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::RngState;
use crate::corpus::{CLS, SEP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sequence,
    /// Input is `<cls> aspect </s> sentence`.
    Aspect,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndTask {
    pub name: String,
    pub kind: TaskKind,
    pub num_classes: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl EndTask {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Task(format!("{}: needs at least 2 classes", self.name)));
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::Task(format!("{}: empty split", self.name)));
        }
        for e in self.train.iter().chain(&self.test) {
            if e.label >= self.num_classes {
                return Err(Error::Task(format!(
                    "{}: label {} outside 0..{}",
                    self.name, e.label, self.num_classes
                )));
            }
            if e.ids.is_empty() {
                return Err(Error::Task(format!("{}: empty example", self.name)));
            }
        }
        let train: HashSet<&[usize]> = self.train.iter().map(|e| e.ids.as_slice()).collect();
        if self.test.iter().any(|e| train.contains(e.ids.as_slice())) {
            return Err(Error::Task(format!("{}: train and test splits overlap", self.name)));
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        self.train.iter().chain(&self.test).map(|e| e.ids.len()).max().unwrap_or(0)
    }
}

/// `<cls> aspect </s> sentence`
pub fn aspect_input(aspect: &[usize], sentence: &[usize]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(aspect.len() + sentence.len() + 2);
    ids.push(CLS);
    ids.extend_from_slice(aspect);
    ids.push(SEP);
    ids.extend_from_slice(sentence);
    ids
}

/// Draws examples until `n_train + n_test` distinct inputs exist, then
/// splits them.
fn split_examples(
    name: &str,
    kind: TaskKind,
    n_train: usize,
    n_test: usize,
    mut draw: impl FnMut(usize) -> Example,
) -> Result<EndTask> {
    let want = n_train + n_test;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(want);
    let mut tries = 0;
    while out.len() < want {
        let e = draw(out.len());
        if seen.insert(e.ids.clone()) {
            out.push(e);
        }
        tries += 1;
        if tries > 20 * want + 1000 {
            return Err(Error::Task(format!("{name}: could not draw {want} distinct examples")));
        }
    }
    let test = out.split_off(n_train);
    let task = EndTask {
        name: name.to_string(),
        kind,
        num_classes: 2,
        train: out,
        test,
    };
    task.validate()?;
    Ok(task)
}

/// Label 1 iff `marker` was inserted into the sentence.
pub fn marker_task(
    sentences: &[Vec<usize>],
    marker: usize,
    max_len: usize,
    n_train: usize,
    n_test: usize,
    rng: &RngState,
) -> Result<EndTask> {
    let pool: Vec<&Vec<usize>> = sentences.iter().filter(|s| !s.is_empty() && !s.contains(&marker)).collect();
    if pool.is_empty() || max_len < 2 {
        return Err(Error::Task("marker: no usable sentences".into()));
    }
    let mut rng = rng.clone();
    split_examples("marker", TaskKind::Sequence, n_train, n_test, |i| {
        let s = pool[rng.below(pool.len())];
        let mut ids: Vec<usize> = s[..s.len().min(max_len - 1)].to_vec();
        let label = i % 2;
        if label == 1 {
            let at = rng.below(ids.len() + 1);
            ids.insert(at, marker);
        }
        Example { ids, label }
    })
}

/// Aspect task over `(head, tail)` pairs: the aspect is a head, and the
/// sentence contains that head followed either by its own tail (label 1)
/// or by a distractor tail (label 0).
#[allow(clippy::too_many_arguments)]
pub fn pair_task(
    name: &str,
    sentences: &[Vec<usize>],
    pairs: &[(usize, usize)],
    distractors: &[usize],
    max_len: usize,
    n_train: usize,
    n_test: usize,
    rng: &RngState,
) -> Result<EndTask> {
    if pairs.is_empty() || distractors.len() < 2 || sentences.is_empty() {
        return Err(Error::Task(format!("{name}: needs pairs, distractors and sentences")));
    }
    if max_len < 6 {
        return Err(Error::Task(format!("{name}: max_len {max_len} too short")));
    }
    let mut rng = rng.clone();
    split_examples(name, TaskKind::Aspect, n_train, n_test, |i| {
        let s = &sentences[rng.below(sentences.len())];
        let (head, tail) = pairs[rng.below(pairs.len())];
        let label = i % 2;
        let next = if label == 1 {
            tail
        } else {
            loop {
                let d = distractors[rng.below(distractors.len())];
                if d != tail {
                    break d;
                }
            }
        };
        let mut sent: Vec<usize> = s[..s.len().min(max_len - 5)].to_vec();
        let at = rng.below(sent.len() + 1);
        sent.splice(at..at, [head, next]);
        Example {
            ids: aspect_input(&[head], &sent),
            label,
        }
    })
}

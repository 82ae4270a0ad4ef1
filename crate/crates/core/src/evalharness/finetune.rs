//! End-task fine-tuning of the whole encoder with a mean-pooled linear head.

use serde::{Deserialize, Serialize};

use super::metrics::{classification_metrics, ClassificationMetrics};
use super::tasks::{EndTask, Example};
use crate::autodiff::{Graph, RngState, Stream, Tensor};
use crate::corpus::pad_batch;
use crate::datrain::{Optimizer, OptimizerKind};
use crate::error::{Error, Result};
use crate::model::{pooled_representation, EncoderModel, GateMode, TokenBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 5e-4,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size >= 1".into()));
        }
        Ok(())
    }
}

/// Linear layer on the mean-pooled final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Classifier {
    pub fn init(d_model: usize, num_classes: usize, rng: &RngState) -> Self {
        let mut r = rng.stream(Stream::Init);
        let w = (0..d_model * num_classes).map(|_| r.truncated_normal(0.02)).collect();
        Self {
            weight: Tensor::new(vec![d_model, num_classes], w).expect("shape"),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.numel()
    }
}

fn batch_of(examples: &[&Example], seq_len: usize) -> TokenBatch {
    let seqs: Vec<&[usize]> = examples.iter().map(|e| e.ids.as_slice()).collect();
    pad_batch(&seqs, seq_len)
}

/// Predicted class per example, without dropout.
pub fn predict(model: &EncoderModel, clf: &Classifier, examples: &[Example], batch_size: usize) -> Result<Vec<usize>> {
    let seq_len = examples.iter().map(|e| e.ids.len()).max().unwrap_or(1);
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = batch_of(&refs, seq_len);
        let mut g = Graph::new();
        let p = model.bind(&mut g, false);
        let trace = model.encoder_forward(&mut g, &p, &batch, &GateMode::Off, None)?;
        let pooled = pooled_representation(&mut g, trace.hidden, &batch.padding_mask)?;
        let w = g.constant(clf.weight.clone());
        let b = g.constant(clf.bias.clone());
        let logits = g.linear(pooled, w, b)?;
        for row in g.value(logits).data().chunks(clf.num_classes()) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            preds.push(best.0);
        }
    }
    Ok(preds)
}

pub fn evaluate(model: &EncoderModel, clf: &Classifier, task: &EndTask, batch_size: usize) -> Result<ClassificationMetrics> {
    let preds = predict(model, clf, &task.test, batch_size)?;
    let golds: Vec<usize> = task.test.iter().map(|e| e.label).collect();
    classification_metrics(&preds, &golds, task.num_classes)
}

/// Fine-tunes a copy of `model` together with a fresh classifier and
/// reports test metrics after the last epoch.
pub fn finetune_classifier(
    model: &EncoderModel,
    task: &EndTask,
    cfg: &FinetuneConfig,
    rng: &RngState,
) -> Result<(EncoderModel, Classifier, ClassificationMetrics)> {
    cfg.validate()?;
    task.validate()?;
    if task.max_len() > model.config().max_seq_len {
        return Err(Error::Task(format!(
            "{}: example length {} exceeds max_seq_len {}",
            task.name,
            task.max_len(),
            model.config().max_seq_len
        )));
    }
    if let Some(&id) = task.train.iter().chain(&task.test).flat_map(|e| &e.ids).find(|&&id| id >= model.config().vocab_size) {
        return Err(Error::Vocabulary {
            id,
            vocab_size: model.config().vocab_size,
        });
    }
    let mut model = model.clone();
    let mut clf = Classifier::init(model.config().d_model, task.num_classes, rng);
    let mut opt_model = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let mut opt_head = Optimizer::new(cfg.optimizer, cfg.lr)?;
    let seq_len = task.max_len();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        rng.stream(Stream::DataShuffle).fork(epoch as u64).shuffle(&mut order);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &task.train[i]).collect();
            let batch = batch_of(&examples, seq_len);
            let labels: Vec<Option<usize>> = examples.iter().map(|e| Some(e.label)).collect();
            let mut g = Graph::new();
            let p = model.bind(&mut g, true);
            let w = g.leaf(clf.weight.clone(), true);
            let b = g.leaf(clf.bias.clone(), true);
            let mut drop = rng.stream(Stream::DropoutPass1).fork(epoch as u64).fork(bi as u64);
            let trace = model.encoder_forward(&mut g, &p, &batch, &GateMode::Off, Some(&mut drop))?;
            let pooled = pooled_representation(&mut g, trace.hidden, &batch.padding_mask)?;
            let logits = g.linear(pooled, w, b)?;
            let loss = g.cross_entropy_logits(logits, &labels)?;
            let grads = g.backward(loss)?;
            let model_grads: Vec<Tensor> = p.0.iter().map(|&v| grads.get_or_zeros(v)).collect();
            opt_model.step(model.params_mut(), &model_grads)?;
            let mut head = [clf.weight.clone(), clf.bias.clone()];
            opt_head.step(&mut head, &[grads.get_or_zeros(w), grads.get_or_zeros(b)])?;
            [clf.weight, clf.bias] = head;
        }
    }
    let metrics = evaluate(&model, &clf, task, cfg.batch_size.max(32))?;
    Ok((model, clf, metrics))
}

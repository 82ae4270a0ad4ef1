//! Domain-adaptive training: MLM plus an optional contrastive term, with
//! head-output gradients soft-masked by general-knowledge importance.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::contrast::{contrastive_loss, ContrastBatch};
use super::optim::{Optimizer, OptimizerKind};
use crate::autodiff::{Graph, HookHandle, RngState, Stream, Tensor, Var};
use crate::corpus::{mlm_mask, BatchStream, MaskedBatch};
use crate::error::{Error, Result};
use crate::model::{pooled_representation, EncoderModel, ForwardTrace, GateMode, ParamVars, TokenBatch};

/// Which importance source drives soft-masking and negative construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Dga,
    Random,
    None,
    DomainSpecific,
}

/// A mask choice together with the data it needs.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskVariant {
    /// Normalized general-knowledge importance.
    Dga(Vec<f32>),
    /// Importance drawn uniformly from `[0, 1)` once per run.
    Random(u64),
    None,
    /// Normalized importance whose complement gates the negatives.
    DomainSpecific(Vec<f32>),
}

/// Concrete per-head values for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedMask {
    /// Importance per head; the backward factor is `1 - I`.
    pub soft_mask: Option<Vec<f32>>,
    /// Gates of the forward pass producing negative instances.
    pub negative_gates: Option<Vec<f32>>,
}

fn check_scores(values: &[f32], num_heads: usize) -> Result<()> {
    if values.len() != num_heads {
        return Err(Error::Gating(format!("expected {num_heads} importance values, got {}", values.len())));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Gating(format!("importance {v} outside [0, 1]")));
    }
    Ok(())
}

impl MaskVariant {
    pub fn kind(&self) -> MaskKind {
        match self {
            Self::Dga(_) => MaskKind::Dga,
            Self::Random(_) => MaskKind::Random,
            Self::None => MaskKind::None,
            Self::DomainSpecific(_) => MaskKind::DomainSpecific,
        }
    }

    pub fn resolve(&self, num_heads: usize) -> Result<ResolvedMask> {
        Ok(match self {
            Self::Dga(i) => {
                check_scores(i, num_heads)?;
                ResolvedMask {
                    soft_mask: Some(i.clone()),
                    negative_gates: Some(i.clone()),
                }
            }
            Self::Random(seed) => {
                let mut rng = RngState::new(*seed).stream(Stream::Custom(7));
                let r: Vec<f32> = (0..num_heads).map(|_| rng.next_f32()).collect();
                ResolvedMask {
                    soft_mask: Some(r.clone()),
                    negative_gates: Some(r),
                }
            }
            Self::None => ResolvedMask {
                soft_mask: None,
                negative_gates: None,
            },
            Self::DomainSpecific(i) => {
                check_scores(i, num_heads)?;
                ResolvedMask {
                    soft_mask: Some(i.clone()),
                    negative_gates: Some(i.iter().map(|v| 1.0 - v).collect()),
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaTrainConfig {
    pub lambda_1: f32,
    pub tau: f32,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub steps: usize,
    pub mask_variant: MaskKind,
    pub random_mask_seed: u64,
    pub use_contrast: bool,
    pub mask_ratio: f32,
    pub log_interval: usize,
}

impl Default for DaTrainConfig {
    fn default() -> Self {
        Self {
            lambda_1: 1.0,
            tau: 0.05,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            steps: 500,
            mask_variant: MaskKind::Dga,
            random_mask_seed: 0,
            use_contrast: true,
            mask_ratio: 0.15,
            log_interval: 50,
        }
    }
}

impl DaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail("tau > 0");
        }
        if !(self.lambda_1 >= 0.0 && self.lambda_1.is_finite()) {
            return fail("lambda_1 >= 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate > 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size >= 1");
        }
        if self.log_interval == 0 {
            return fail("log_interval >= 1");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return fail("0 < mask_ratio < 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub mlm_loss: f32,
    /// Zero when the contrastive term is disabled.
    pub contrast_loss: f32,
    pub total: f32,
}

/// Attaches `1 - I_lh` to every head output recorded in `trace`.
pub fn install_soft_masks(g: &mut Graph, trace: &ForwardTrace, importance: &[f32]) -> Result<Vec<HookHandle>> {
    let heads: usize = trace.head_outputs.iter().map(Vec::len).sum();
    if heads != importance.len() {
        return Err(Error::Wiring(format!(
            "forward recorded {heads} head outputs but {} importance values were given",
            importance.len()
        )));
    }
    let mut handles = Vec::with_capacity(heads);
    for (node, &i) in trace.head_outputs.iter().flatten().zip(importance) {
        if !(0.0..=1.0).contains(&i) {
            return Err(Error::Gating(format!("importance {i} outside [0, 1]")));
        }
        handles.push(g.attach_grad_scale(*node, 1.0 - i)?);
    }
    Ok(handles)
}

/// Masked-token cross entropy from an already computed forward pass.
pub fn mlm_loss_from_trace(model: &EncoderModel, g: &mut Graph, p: &ParamVars, trace: &ForwardTrace, labels: &[Option<usize>]) -> Result<Var> {
    let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if rows.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let targets: Vec<Option<usize>> = rows.iter().map(|&i| labels[i]).collect();
    let h = g.gather_rows(trace.hidden, &rows)?;
    let logits = model.mlm_logits(g, p, h)?;
    g.cross_entropy_logits(logits, &targets)
}

/// Ungated forward and masked-token cross entropy.
pub fn mlm_forward_loss(
    model: &EncoderModel,
    g: &mut Graph,
    p: &ParamVars,
    batch: &MaskedBatch,
    rng: Option<&mut RngState>,
) -> Result<(Var, ForwardTrace)> {
    let trace = model.encoder_forward(g, p, &batch.input, &GateMode::Off, rng)?;
    let loss = mlm_loss_from_trace(model, g, p, &trace, &batch.labels)?;
    Ok((loss, trace))
}

/// Pooled representation of the model with every head gated by `gates`,
/// computed without gradient tracking.
pub fn general_representation(model: &EncoderModel, batch: &TokenBatch, gates: &[f32], rng: Option<&mut RngState>) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let trace = model.encoder_forward(&mut g, &p, batch, &GateMode::Fixed(gates.to_vec()), rng)?;
    let pooled = pooled_representation(&mut g, trace.hidden, &batch.padding_mask)?;
    Ok(g.value(pooled).clone())
}

/// Differentiable pooled representation of the ungated model.
pub fn full_representation(
    model: &EncoderModel,
    g: &mut Graph,
    p: &ParamVars,
    batch: &TokenBatch,
    rng: Option<&mut RngState>,
) -> Result<(Var, ForwardTrace)> {
    let trace = model.encoder_forward(g, p, batch, &GateMode::Off, rng)?;
    let pooled = pooled_representation(g, trace.hidden, &batch.padding_mask)?;
    Ok((pooled, trace))
}

/// Dropout stream of the MLM forward pass of a step.
fn mlm_stream(step_rng: &RngState) -> RngState {
    step_rng.stream(Stream::Custom(0))
}

fn collect_grads(g: &Graph, p: &ParamVars, loss: Var) -> Result<Vec<Tensor>> {
    let grads = g.backward(loss)?;
    Ok(p.0.iter().map(|&v| grads.get_or_zeros(v)).collect())
}

/// One plain MLM update.
pub fn mlm_train_step(model: &mut EncoderModel, opt: &mut Optimizer, batch: &MaskedBatch, step_rng: &RngState) -> Result<f32> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let (loss, _) = mlm_forward_loss(model, &mut g, &p, batch, Some(&mut mlm_stream(step_rng)))?;
    let value = g.value(loss).item();
    let grads = collect_grads(&g, &p, loss)?;
    opt.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// One update of `L_MLM + λ₁·L_contrast` with soft-masked head gradients.
///
/// `raw` is the uncorrupted batch used for the contrastive views; `masked`
/// is its MLM corruption. Anchors and positives are two dropout passes of
/// the full model; negatives come from the importance-gated model and are
/// treated as constants.
pub fn da_train_step(
    model: &mut EncoderModel,
    opt: &mut Optimizer,
    raw: &TokenBatch,
    masked: &MaskedBatch,
    cfg: &DaTrainConfig,
    mask: &ResolvedMask,
    step_rng: &RngState,
) -> Result<StepMetrics> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let (mlm, trace) = mlm_forward_loss(model, &mut g, &p, masked, Some(&mut mlm_stream(step_rng)))?;
    if let Some(i) = &mask.soft_mask {
        install_soft_masks(&mut g, &trace, i)?;
    }
    let mut total = mlm;
    let mut contrast_value = 0.0;
    if cfg.use_contrast {
        let mut ra = step_rng.stream(Stream::DropoutPass1);
        let mut rb = step_rng.stream(Stream::DropoutPass2);
        let (anchors, ta) = full_representation(model, &mut g, &p, raw, Some(&mut ra))?;
        let (positives, tb) = full_representation(model, &mut g, &p, raw, Some(&mut rb))?;
        if let Some(i) = &mask.soft_mask {
            install_soft_masks(&mut g, &ta, i)?;
            install_soft_masks(&mut g, &tb, i)?;
        }
        let negatives = match &mask.negative_gates {
            Some(gates) => {
                let mut rn = step_rng.stream(Stream::Custom(1));
                let t = general_representation(model, raw, gates, Some(&mut rn))?;
                Some(g.constant(t))
            }
            None => None,
        };
        let cb = ContrastBatch {
            anchors,
            positives,
            negatives,
        };
        let c = contrastive_loss(&mut g, &cb, cfg.tau)?;
        contrast_value = g.value(c).item();
        let weighted = g.scale(c, cfg.lambda_1);
        total = g.add(mlm, weighted)?;
    }
    let metrics = StepMetrics {
        mlm_loss: g.value(mlm).item(),
        contrast_loss: contrast_value,
        total: g.value(total).item(),
    };
    let grads = collect_grads(&g, &p, total)?;
    opt.step(model.params_mut(), &grads)?;
    Ok(metrics)
}

/// MLM corruption for step `step`, redrawn until at least one token is masked.
pub fn masked_for_step(raw: &TokenBatch, ratio: f32, vocab_size: usize, step_rng: &RngState) -> Result<MaskedBatch> {
    if raw.real_tokens() == 0 {
        return Err(Error::EmptyLoss);
    }
    let base = step_rng.stream(Stream::MlmMask);
    for attempt in 0.. {
        let masked = mlm_mask(raw, ratio, vocab_size, &mut base.fork(attempt))?;
        if masked.num_masked() > 0 {
            return Ok(masked);
        }
        if attempt >= 1000 {
            break;
        }
    }
    Err(Error::EmptyLoss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub mlm_loss: f32,
    pub contrast_loss: f32,
    pub total_loss: f32,
    pub lr: f32,
    pub wall_ms: u64,
}

/// Per-step metrics and the interval means logged every `log_interval` steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepMetrics>,
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "step,mlm_loss,contrast_loss,total_loss,lr,wall_ms";

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:e},{}",
                r.step, r.mlm_loss, r.contrast_loss, r.total_loss, r.lr, r.wall_ms
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Contract("metrics file has an unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Contract(format!("metrics line {} is malformed", n + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            rows.push(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                mlm_loss: f[1].parse().map_err(|_| bad())?,
                contrast_loss: f[2].parse().map_err(|_| bad())?,
                total_loss: f[3].parse().map_err(|_| bad())?,
                lr: f[4].parse().map_err(|_| bad())?,
                wall_ms: f[5].parse().map_err(|_| bad())?,
            });
        }
        Ok(Self { steps: Vec::new(), rows })
    }
}

/// Runs `cfg.steps` updates on batches from `stream`.
///
/// Step `s` derives all of its randomness from `rng.fork(s)`.
pub fn da_train(
    model: &mut EncoderModel,
    stream: &mut BatchStream,
    cfg: &DaTrainConfig,
    variant: &MaskVariant,
    rng: &RngState,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mask = variant.resolve(model.config().num_heads())?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut log = TrainLog::default();
    let start = Instant::now();
    let vocab = model.config().vocab_size;
    for step in 0..cfg.steps {
        let step_rng = rng.fork(step as u64);
        let raw = stream.next_batch();
        let masked = masked_for_step(&raw, cfg.mask_ratio, vocab, &step_rng)?;
        let m = da_train_step(model, &mut opt, &raw, &masked, cfg, &mask, &step_rng)?;
        if !m.total.is_finite() {
            return Err(Error::Contract(format!("loss became non-finite at step {}", step + 1)));
        }
        log.steps.push(m);
        if (step + 1) % cfg.log_interval == 0 {
            let window = &log.steps[step + 1 - cfg.log_interval..];
            let mean = |f: fn(&StepMetrics) -> f32| window.iter().map(|m| f(m) as f64).sum::<f64>() as f32 / window.len() as f32;
            log.rows.push(LogRow {
                step: step + 1,
                mlm_loss: mean(|m| m.mlm_loss),
                contrast_loss: mean(|m| m.contrast_loss),
                total_loss: mean(|m| m.total),
                lr: cfg.learning_rate,
                wall_ms: start.elapsed().as_millis() as u64,
            });
        }
    }
    Ok(log)
}

/// Plain MLM pre-training schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub mask_ratio: f32,
    pub log_interval: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            learning_rate: 1e-3,
            batch_size: 32,
            mask_ratio: 0.15,
            log_interval: 50,
        }
    }
}

impl PretrainConfig {
    /// The equivalent domain-training configuration: no masks, no contrast.
    pub fn as_da_config(&self) -> DaTrainConfig {
        DaTrainConfig {
            lambda_1: 0.0,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            steps: self.steps,
            mask_variant: MaskKind::None,
            use_contrast: false,
            mask_ratio: self.mask_ratio,
            log_interval: self.log_interval,
            ..DaTrainConfig::default()
        }
    }
}

/// MLM training from the current weights.
pub fn pretrain(model: &mut EncoderModel, stream: &mut BatchStream, cfg: &PretrainConfig, rng: &RngState) -> Result<TrainLog> {
    da_train(model, stream, &cfg.as_da_config(), &MaskVariant::None, rng)
}

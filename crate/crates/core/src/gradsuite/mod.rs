//! Finite-difference checks of every parameter gradient of the MLM loss and
//! the proxy KL loss, and of the gate gradients behind head importance.
//!
//! Numeric losses come from an independent double-precision forward pass
//! that replays the same dropout masks, so the central differences are not
//! limited by f32 rounding.

pub mod reference;

use crate::autodiff::{finite_diff_directional, relative_error, Graph, RngState, Stream, Tensor};
use crate::corpus::{mlm_mask, MaskedBatch, NUM_RESERVED};
use crate::datrain::mlm_forward_loss;
use crate::error::Result;
use crate::importance::{importance_streams, proxy_kl_loss};
use crate::model::{EncoderModel, GateMode, ModelConfig, TokenBatch};

pub use reference::{reference_hidden, reference_logits};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f32,
    pub tolerance: f64,
    pub floor: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tolerance: 1e-2,
            floor: 1e-8,
            batch: 2,
            seq_len: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} analytic={:.6e} numeric={:.6e} rel_err={:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.analytic,
            self.numeric,
            self.rel_err
        )
    }
}

fn log_softmax_f64(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Mean cross entropy of `logits` rows against `targets`.
pub fn cross_entropy_f64(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let total: f64 = logits.iter().zip(targets).map(|(row, &t)| -log_softmax_f64(row)[t]).sum();
    total / targets.len() as f64
}

/// Mean over rows of ½[KL(p‖q) + KL(q‖p)].
pub fn symmetric_kl_f64(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (ra, rb) in a.iter().zip(b) {
        let lp = log_softmax_f64(ra);
        let lq = log_softmax_f64(rb);
        total += 0.5 * lp.iter().zip(&lq).map(|(&x, &y)| (x.exp() - y.exp()) * (x - y)).sum::<f64>();
    }
    total / a.len() as f64
}

/// A random full-length batch with at least one masked position.
pub fn check_batch(config: &ModelConfig, cfg: &GradCheckConfig) -> Result<(TokenBatch, MaskedBatch)> {
    let mut rng = RngState::new(cfg.seed).stream(Stream::Custom(90));
    let n = cfg.batch * cfg.seq_len;
    let ids: Vec<usize> = (0..n).map(|_| NUM_RESERVED + rng.below(config.vocab_size - NUM_RESERVED)).collect();
    let batch = TokenBatch::new(ids, cfg.batch, cfg.seq_len, vec![true; n])?;
    let mut mask_rng = RngState::new(cfg.seed).stream(Stream::MlmMask);
    loop {
        let masked = mlm_mask(&batch, 0.3, config.vocab_size, &mut mask_rng)?;
        if masked.num_masked() > 0 {
            return Ok((batch, masked));
        }
    }
}

fn with_param(model: &EncoderModel, index: usize, value: &Tensor) -> EncoderModel {
    let mut m = model.clone();
    m.params_mut()[index] = value.clone();
    m
}

/// MLM loss of `model` in f64, dropout driven by a clone of `rng`.
pub fn mlm_loss_f64(model: &EncoderModel, masked: &MaskedBatch, rng: &RngState) -> Result<f64> {
    let hidden = reference_hidden(model, &masked.input, None, Some(rng.clone()))?;
    let rows: Vec<usize> = (0..masked.labels.len()).filter(|&i| masked.labels[i].is_some()).collect();
    let targets: Vec<usize> = rows.iter().filter_map(|&i| masked.labels[i]).collect();
    Ok(cross_entropy_f64(&reference_logits(model, &hidden, &rows)?, &targets))
}

/// Proxy KL loss in f64 with explicit gate values (which may leave `[0, 1]`).
pub fn proxy_kl_f64(model: &EncoderModel, batch: &TokenBatch, gates: Option<&[f64]>, rng_a: &RngState, rng_b: &RngState) -> Result<f64> {
    let rows: Vec<usize> = (0..batch.ids.len()).filter(|&i| batch.padding_mask[i]).collect();
    let ha = reference_hidden(model, batch, gates, Some(rng_a.clone()))?;
    let hb = reference_hidden(model, batch, gates, Some(rng_b.clone()))?;
    Ok(symmetric_kl_f64(&reference_logits(model, &ha, &rows)?, &reference_logits(model, &hb, &rows)?))
}

fn check(name: String, analytic: f64, numeric: f64, cfg: &GradCheckConfig) -> CheckResult {
    let rel_err = relative_error(analytic, numeric, cfg.floor);
    CheckResult {
        name,
        analytic,
        numeric,
        rel_err,
        pass: rel_err < cfg.tolerance,
    }
}

/// Directional check along the normalized gradient plus a check of the
/// largest-magnitude entry.
fn tensor_checks<F>(label: &str, param: &Tensor, grad: &Tensor, mut f: F, cfg: &GradCheckConfig) -> Result<Vec<CheckResult>>
where
    F: FnMut(&Tensor) -> f64,
{
    let g = grad.data();
    let norm = g.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    let mut out = Vec::with_capacity(2);
    let dir: Vec<f32> = if norm > 0.0 {
        g.iter().map(|&v| (v as f64 / norm) as f32).collect()
    } else {
        vec![1.0 / (g.len() as f32).sqrt(); g.len()]
    };
    let analytic: f64 = g.iter().zip(&dir).map(|(&a, &d)| a as f64 * d as f64).sum();
    let numeric = finite_diff_directional(&mut f, param, &dir, cfg.eps)?;
    out.push(check(format!("{label} direction"), analytic, numeric, cfg));
    let (idx, _) = g
        .iter()
        .enumerate()
        .fold((0, -1.0f32), |best, (i, &v)| if v.abs() > best.1 { (i, v.abs()) } else { best });
    let mut unit = vec![0.0; g.len()];
    unit[idx] = 1.0;
    let numeric = finite_diff_directional(&mut f, param, &unit, cfg.eps)?;
    out.push(check(format!("{label} entry[{idx}]"), g[idx] as f64, numeric, cfg));
    Ok(out)
}

/// Checks every parameter of the MLM loss.
pub fn mlm_checks(model: &EncoderModel, cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let (_, masked) = check_batch(model.config(), cfg)?;
    let rng = RngState::new(cfg.seed).stream(Stream::DropoutPass1);
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let (loss, _) = mlm_forward_loss(model, &mut g, &p, &masked, Some(&mut rng.clone()))?;
    let grads = g.backward(loss)?;
    let mut out = Vec::new();
    for (i, name) in model.names().iter().enumerate() {
        let grad = grads.get_or_zeros(p.get(i));
        let f = |t: &Tensor| mlm_loss_f64(&with_param(model, i, t), &masked, &rng).unwrap_or(f64::NAN);
        out.extend(tensor_checks(&format!("mlm {name}"), &model.params()[i], &grad, f, cfg)?);
    }
    Ok(out)
}

/// Checks every parameter of the proxy KL loss.
pub fn proxy_kl_checks(model: &EncoderModel, cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let (batch, _) = check_batch(model.config(), cfg)?;
    let (ra, rb) = importance_streams(&RngState::new(cfg.seed), 0);
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let (loss, _) = proxy_kl_loss(model, &mut g, &p, &batch, &GateMode::Unit, &ra, &rb)?;
    let grads = g.backward(loss)?;
    let mut out = Vec::new();
    for (i, name) in model.names().iter().enumerate() {
        let grad = grads.get_or_zeros(p.get(i));
        let f = |t: &Tensor| proxy_kl_f64(&with_param(model, i, t), &batch, None, &ra, &rb).unwrap_or(f64::NAN);
        out.extend(tensor_checks(&format!("proxy_kl {name}"), &model.params()[i], &grad, f, cfg)?);
    }
    Ok(out)
}

/// Numeric `∂L_proxy/∂g_lh` for every head at unit gates.
pub fn gate_finite_differences(model: &EncoderModel, batch: &TokenBatch, rng_a: &RngState, rng_b: &RngState, eps: f64) -> Result<Vec<f64>> {
    let n = model.config().num_heads();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut gates = vec![1.0; n];
        gates[k] = 1.0 + eps;
        let hi = proxy_kl_f64(model, batch, Some(&gates), rng_a, rng_b)?;
        gates[k] = 1.0 - eps;
        let lo = proxy_kl_f64(model, batch, Some(&gates), rng_a, rng_b)?;
        out.push((hi - lo) / (2.0 * eps));
    }
    Ok(out)
}

/// Gate gradients of the proxy KL loss against finite differences.
pub fn gate_checks(model: &EncoderModel, cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    let (batch, _) = check_batch(model.config(), cfg)?;
    let (ra, rb) = importance_streams(&RngState::new(cfg.seed), 0);
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let (loss, gate) = proxy_kl_loss(model, &mut g, &p, &batch, &GateMode::Unit, &ra, &rb)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get_or_zeros(gate.expect("unit gates"));
    let numeric = gate_finite_differences(model, &batch, &ra, &rb, cfg.eps as f64)?;
    let h = model.config().heads_per_layer;
    Ok(numeric
        .iter()
        .enumerate()
        .map(|(k, &n)| check(format!("gate layer {} head {}", k / h, k % h), analytic.data()[k] as f64, n, cfg))
        .collect())
}

/// The full suite on a freshly initialized model.
pub fn run_grad_checks(config: &ModelConfig, cfg: &GradCheckConfig) -> Result<Vec<CheckResult>> {
    config.validate()?;
    let model = EncoderModel::init(config.clone(), &RngState::new(cfg.seed))?;
    let mut out = mlm_checks(&model, cfg)?;
    out.extend(proxy_kl_checks(&model, cfg)?);
    out.extend(gate_checks(&model, cfg)?);
    Ok(out)
}

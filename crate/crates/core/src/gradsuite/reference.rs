//! Plain f64 re-implementation of the encoder forward pass.
//!
//! Parameters are looked up by name and dropout masks are redrawn from the
//! given stream in the same order as the graph-based encoder, so for a frozen
//! stream this computes the same function in double precision.

use crate::autodiff::RngState;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, TokenBatch};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

fn param(model: &EncoderModel, name: &str) -> Result<Vec<f64>> {
    model
        .param(name)
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .ok_or_else(|| Error::Contract(format!("model has no parameter {name}")))
}

/// `x[n, k] · w[k, m] + b[m]`
fn affine(x: &Mat, w: &[f64], b: &[f64], m: usize) -> Mat {
    let k = x.cols;
    let mut data = vec![0.0; x.rows * m];
    for r in 0..x.rows {
        for j in 0..m {
            let mut s = b[j];
            for i in 0..k {
                s += x.data[r * k + i] * w[i * m + j];
            }
            data[r * m + j] = s;
        }
    }
    Mat { rows: x.rows, cols: m, data }
}

fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    let d = x.cols;
    let mut data = vec![0.0; x.data.len()];
    for r in 0..x.rows {
        let row = &x.data[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            data[r * d + j] = (row[j] - mean) * inv * gamma[j] + beta[j];
        }
    }
    Mat { rows: x.rows, cols: d, data }
}

fn dropout(values: &mut [f64], p: f32, rng: &mut Option<RngState>) {
    let Some(r) = rng.as_mut() else { return };
    if p == 0.0 {
        return;
    }
    let keep = 1.0 / (1.0 - p as f64);
    for v in values.iter_mut() {
        *v *= if r.next_f32() < p { 0.0 } else { keep };
    }
}

/// Final hidden states `[B·T, d]`. `gates` are row-major per head; `None`
/// leaves heads ungated.
pub fn reference_hidden(model: &EncoderModel, batch: &TokenBatch, gates: Option<&[f64]>, mut rng: Option<RngState>) -> Result<Vec<f64>> {
    let c = model.config();
    let (b, t, d, dk) = (batch.batch, batch.seq_len, c.d_model, c.head_dim());
    let tok = param(model, "embeddings.token")?;
    let pos = param(model, "embeddings.position")?;
    let mut x = Mat {
        rows: b * t,
        cols: d,
        data: vec![0.0; b * t * d],
    };
    for (i, &id) in batch.ids.iter().enumerate() {
        let ti = i % t;
        for j in 0..d {
            x.data[i * d + j] = tok[id * d + j] + pos[ti * d + j];
        }
    }
    let scale = 1.0 / (dk as f64).sqrt();
    for l in 0..c.num_layers {
        let pre = format!("layers.{l}");
        let h1 = layer_norm(&x, &param(model, &format!("{pre}.ln1.gamma"))?, &param(model, &format!("{pre}.ln1.beta"))?);
        let mut mha = vec![0.0; b * t * d];
        for h in 0..c.heads_per_layer {
            let hp = |n: &str| param(model, &format!("{pre}.heads.{h}.{n}"));
            let q = affine(&h1, &hp("wq")?, &hp("bq")?, dk);
            let k = affine(&h1, &hp("wk")?, &vec![0.0; dk], dk);
            let v = affine(&h1, &hp("wv")?, &hp("bv")?, dk);
            let mut probs = vec![0.0; b * t * t];
            for bi in 0..b {
                for i in 0..t {
                    let row = &mut probs[(bi * t + i) * t..(bi * t + i + 1) * t];
                    for j in 0..t {
                        row[j] = if batch.padding_mask[bi * t + j] {
                            let qi = &q.data[(bi * t + i) * dk..(bi * t + i + 1) * dk];
                            let kj = &k.data[(bi * t + j) * dk..(bi * t + j + 1) * dk];
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|s| (s - mx).exp()).sum();
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp() / z;
                    }
                }
            }
            dropout(&mut probs, c.dropout_p, &mut rng);
            let mut ctx = Mat {
                rows: b * t,
                cols: dk,
                data: vec![0.0; b * t * dk],
            };
            for bi in 0..b {
                for i in 0..t {
                    for j in 0..t {
                        let p = probs[(bi * t + i) * t + j];
                        for e in 0..dk {
                            ctx.data[(bi * t + i) * dk + e] += p * v.data[(bi * t + j) * dk + e];
                        }
                    }
                }
            }
            let out = affine(&ctx, &hp("wo")?, &hp("bo")?, d);
            let gate = gates.map_or(1.0, |g| g[l * c.heads_per_layer + h]);
            for (m, o) in mha.iter_mut().zip(&out.data) {
                *m += gate * o;
            }
        }
        dropout(&mut mha, c.dropout_p, &mut rng);
        for (xv, m) in x.data.iter_mut().zip(&mha) {
            *xv += m;
        }
        let h2 = layer_norm(&x, &param(model, &format!("{pre}.ln2.gamma"))?, &param(model, &format!("{pre}.ln2.beta"))?);
        let mut f = affine(&h2, &param(model, &format!("{pre}.ffn.w1"))?, &param(model, &format!("{pre}.ffn.b1"))?, c.d_ff);
        for v in f.data.iter_mut() {
            *v = 0.5 * *v * (1.0 + (GELU_C * (*v + 0.044715 * v.powi(3))).tanh());
        }
        let mut f = affine(&f, &param(model, &format!("{pre}.ffn.w2"))?, &param(model, &format!("{pre}.ffn.b2"))?, d);
        dropout(&mut f.data, c.dropout_p, &mut rng);
        for (xv, fv) in x.data.iter_mut().zip(&f.data) {
            *xv += fv;
        }
    }
    Ok(layer_norm(&x, &param(model, "final_ln.gamma")?, &param(model, "final_ln.beta")?).data)
}

/// MLM logits `[rows.len(), V]` at the selected hidden rows.
pub fn reference_logits(model: &EncoderModel, hidden: &[f64], rows: &[usize]) -> Result<Vec<Vec<f64>>> {
    let c = model.config();
    let (d, v) = (c.d_model, c.vocab_size);
    let bias = param(model, "mlm.bias")?;
    let (w, tied) = match model.param("mlm.weight") {
        Some(_) => (param(model, "mlm.weight")?, false),
        None => (param(model, "embeddings.token")?, true),
    };
    Ok(rows
        .iter()
        .map(|&r| {
            let h = &hidden[r * d..(r + 1) * d];
            (0..v)
                .map(|j| {
                    bias[j]
                        + (0..d)
                            .map(|i| h[i] * if tied { w[j * d + i] } else { w[i * v + j] })
                            .sum::<f64>()
                })
                .collect()
        })
        .collect())
}

//! InfoNCE-style contrastive loss over pooled sequence representations.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// The three views of one contrastive batch, each `[N, d]`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastBatch {
    pub anchors: Var,
    pub positives: Var,
    /// General-knowledge representations; omitted for plain in-batch contrast.
    pub negatives: Option<Var>,
}

/// Contrastive loss over `N` anchors.
///
/// Similarities are cosine. For anchor `m` the positive is `positives[m]`;
/// the other positives in the batch and, when given, every row of
/// `negatives` compete in the denominator:
///
/// `-log( e^{s(a_m,p_m)/τ} / (Σ_j e^{s(a_m,p_j)/τ} + Σ_j e^{s(a_m,n_j)/τ}) )`
///
/// averaged over `m`.
pub fn contrastive_loss(g: &mut Graph, cb: &ContrastBatch, tau: f32) -> Result<Var> {
    let ContrastBatch {
        anchors,
        positives,
        negatives,
    } = *cb;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau > 0 (got {tau})")));
    }
    if g.shape(anchors) != g.shape(positives) || g.shape(anchors).len() != 2 {
        return Err(Error::Shape {
            op: "contrastive_loss",
            left: g.shape(anchors).to_vec(),
            right: g.shape(positives).to_vec(),
        });
    }
    let n = g.shape(anchors)[0];
    let a = g.normalize_rows(anchors)?;
    let p = g.normalize_rows(positives)?;
    let mut sims = g.matmul(a, p, true)?;
    if let Some(neg) = negatives {
        if g.shape(neg) != g.shape(anchors) {
            return Err(Error::Shape {
                op: "contrastive_loss",
                left: g.shape(anchors).to_vec(),
                right: g.shape(neg).to_vec(),
            });
        }
        let nn = g.normalize_rows(neg)?;
        let ns = g.matmul(a, nn, true)?;
        sims = g.concat_cols(sims, ns)?;
    }
    let logits = g.scale(sims, 1.0 / tau);
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    g.cross_entropy_logits(logits, &targets)
}

//! Central finite differences, used as the independent oracle for every
//! backward path.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `(f(θ + eps·u) − f(θ − eps·u)) / (2·eps)` for a single direction `u`.
///
/// `f` must rebuild its forward pass from scratch with the same frozen
/// random state on every call.
pub fn finite_diff_directional<F>(mut f: F, param: &Tensor, direction: &[f32], eps: f32) -> Result<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite difference eps must be > 0, got {eps}")));
    }
    if direction.len() != param.numel() {
        return Err(Error::Shape {
            op: "finite_diff",
            left: param.shape().to_vec(),
            right: vec![direction.len()],
        });
    }
    let mut plus = param.clone();
    let mut minus = param.clone();
    for ((p, m), &u) in plus.data_mut().iter_mut().zip(minus.data_mut()).zip(direction) {
        *p += eps * u;
        *m -= eps * u;
    }
    let hi = f(&plus);
    let lo = f(&minus);
    Ok((hi - lo) / (2.0 * eps as f64))
}

/// Numeric derivative with respect to the single entry `index`.
pub fn finite_diff_entry<F>(f: F, param: &Tensor, index: usize, eps: f32) -> Result<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut dir = vec![0.0; param.numel()];
    *dir.get_mut(index).ok_or(Error::Contract(format!("entry {index} out of range")))? = 1.0;
    finite_diff_directional(f, param, &dir, eps)
}

/// Numeric gradient of `f` at `param`, one entry at a time.
pub fn finite_diff_grad<F>(mut f: F, param: &Tensor, eps: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    let mut out = Vec::with_capacity(param.numel());
    for i in 0..param.numel() {
        out.push(finite_diff_entry(&mut f, param, i, eps)? as f32);
    }
    Tensor::new(param.shape().to_vec(), out)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_derivatives() {
        let x = Tensor::scalar(3.0);
        let d = finite_diff_entry(|t| (t.item() as f64).powi(2), &x, 0, 1e-3).unwrap();
        assert!((d - 6.0).abs() < 1e-3, "{d}");

        let z = Tensor::scalar(0.0);
        let d = finite_diff_entry(|t| (t.item() as f64).sin(), &z, 0, 1e-3).unwrap();
        assert!((d - 1.0).abs() < 1e-3, "{d}");
    }

    #[test]
    fn full_gradient_of_quadratic() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(
            |t| t.data().iter().map(|&v| (v as f64).powi(2)).sum(),
            &x,
            1e-3,
        )
        .unwrap();
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-3);
        }
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_entry(|t| t.item() as f64, &x, 0, 0.0).is_err());
    }
}

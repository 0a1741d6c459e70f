use super::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{ForgeError, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(ForgeError::Shape(format!(
            "matmul inner dimensions differ: {m}×{k} · {k2}×{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Tensor::matrix(m, n, out)
}

/// Accumulates `grad_out·bᵀ` into `a`'s gradient and `aᵀ·grad_out` into `b`'s.
pub fn matmul_backward(a: &mut Tensor, b: &mut Tensor, grad_out: &Tensor) -> Result<()> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 || grad_out.shape() != [m, n] {
        return Err(ForgeError::Shape(format!(
            "matmul backward: {m}×{k} · {k2}×{n} with upstream {:?}",
            grad_out.shape()
        )));
    }
    let b_data = b.data().to_vec();
    gemm_nt(m, n, k, grad_out.data(), &b_data, a.grad_mut());
    let a_data = a.data().to_vec();
    gemm_tn(k, m, n, &a_data, grad_out.data(), b.grad_mut());
    Ok(())
}

pub fn softmax_row(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_row(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f32>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Mean negative log-likelihood over the batch and its gradient with respect
/// to the logits, `(softmax − onehot) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (batch, classes) = logits.dims2()?;
    if labels.len() != batch {
        return Err(ForgeError::Shape(format!(
            "{batch} logit rows but {} labels",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(ForgeError::Input("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(ForgeError::Index(format!(
            "label {bad} with only {classes} classes"
        )));
    }
    let inv_b = 1.0 / batch as f32;
    let mut loss = 0.0f64;
    let mut grad = Tensor::zeros(&[batch, classes]);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let log_p = log_softmax_row(row);
        loss -= log_p[y] as f64;
        let g = grad.row_mut(i);
        for c in 0..classes {
            g[c] = log_p[c].exp() * inv_b;
        }
        g[y] -= inv_b;
    }
    Ok(((loss / batch as f64) as f32, grad))
}

fn check_cosine_inputs(u: &[f32], v: &[f32]) -> Result<(f32, f32)> {
    if u.len() != v.len() {
        return Err(ForgeError::Shape(format!(
            "cosine of {} and {} dims",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if !(nu > 0.0) || !(nv > 0.0) {
        return Err(ForgeError::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((nu, nv))
}

pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f32> {
    let (nu, nv) = check_cosine_inputs(u, v)?;
    let dot: f32 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Partial derivatives of `cos(u, v)` with respect to `u` and `v`.
pub fn cosine_similarity_backward(u: &[f32], v: &[f32]) -> Result<(Vec<f32>, Vec<f32>)> {
    let (nu, nv) = check_cosine_inputs(u, v)?;
    let dot: f32 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let cos = dot / (nu * nv);
    let du = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| b / (nu * nv) - cos * a / (nu * nu))
        .collect();
    let dv = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| a / (nu * nv) - cos * b / (nv * nv))
        .collect();
    Ok((du, dv))
}

/// Central differences of `f` around `x`. The step actually taken is
/// measured after f32 rounding so the quotient is exact in its denominator.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor, eps: f32) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        let hi = orig + eps;
        let lo = orig - eps;
        probe.data_mut()[i] = hi;
        let f_hi = f(&probe);
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
    }
    grad
}

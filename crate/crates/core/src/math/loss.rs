//! Batch losses. Each returns the loss value and its gradient with respect to
//! the first (trainable) argument.

use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Cosine,
    L2,
    L1,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Cosine, LossKind::L2, LossKind::L1];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Cosine => "cosine",
            LossKind::L2 => "l2",
            LossKind::L1 => "l1",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" | "cos" => Ok(LossKind::Cosine),
            "l2" => Ok(LossKind::L2),
            "l1" => Ok(LossKind::L1),
            other => Err(Error::Config(format!("unknown loss kind `{other}`"))),
        }
    }
}

fn same_shape(a: &Matrix, b: &Matrix, context: &'static str) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::dims(context, a.rows(), b.rows()));
    }
    if a.cols() != b.cols() {
        return Err(Error::dims(context, a.cols(), b.cols()));
    }
    if a.rows() == 0 {
        return Err(Error::InvalidArgument(format!("{context}: empty batch")));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Err(Error::InvalidArgument("cosine of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

pub fn loss(kind: LossKind, pred: &Matrix, target: &Matrix) -> Result<f64> {
    loss_and_grad(kind, pred, target).map(|(l, _)| l)
}

pub fn loss_and_grad(kind: LossKind, pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    match kind {
        LossKind::Cosine => cosine_loss(pred, target),
        LossKind::L2 => l2_loss(pred, target),
        LossKind::L1 => l1_loss(pred, target),
    }
}

/// `−mean_i cos(pred_i, target_i)`
pub fn cosine_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    same_shape(pred, target, "cosine loss")?;
    let n = pred.rows() as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut total = 0.0;
    for r in 0..pred.rows() {
        let (p, t) = (pred.row(r), target.row(r));
        let (np, nt) = (norm(p), norm(t));
        if np < ZERO_NORM || nt < ZERO_NORM {
            return Err(Error::InvalidArgument(format!(
                "cosine loss: zero-norm vector in row {r}"
            )));
        }
        let cos = dot(p, t) / (np * nt);
        total += cos;
        let g = grad.row_mut(r);
        for ((gi, &pi), &ti) in g.iter_mut().zip(p).zip(t) {
            *gi = -(ti / (np * nt) - cos * pi / (np * np)) / n;
        }
    }
    Ok((-total / n, grad))
}

/// `mean_i ‖pred_i − target_i‖²`
pub fn l2_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    same_shape(pred, target, "l2 loss")?;
    let n = pred.rows() as f64;
    let mut total = 0.0;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            total += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((total / n, Matrix::from_vec(pred.rows(), pred.cols(), data)?))
}

/// `mean_i Σ_j |pred_ij − target_ij|`; the subgradient at 0 is 0.
pub fn l1_loss(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    same_shape(pred, target, "l1 loss")?;
    let n = pred.rows() as f64;
    let mut total = 0.0;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = p - t;
            total += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((total / n, Matrix::from_vec(pred.rows(), pred.cols(), data)?))
}

/// Rows scaled to unit norm, plus the original norms.
fn normalize_rows(z: &Matrix, context: &str) -> Result<(Matrix, Vec<f64>)> {
    let mut u = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for r in 0..z.rows() {
        let nr = norm(z.row(r));
        if nr < ZERO_NORM {
            return Err(Error::InvalidArgument(format!(
                "{context}: zero-norm vector in row {r}"
            )));
        }
        u.row_mut(r).iter_mut().for_each(|x| *x /= nr);
        norms.push(nr);
    }
    Ok((u, norms))
}

/// Pulls a gradient w.r.t. unit rows back through the normalization.
fn unnormalize_grad(u: &Matrix, norms: &[f64], gu: &Matrix) -> Matrix {
    let mut gz = gu.clone();
    for r in 0..u.rows() {
        let ur = u.row(r);
        let proj = dot(ur, gu.row(r));
        let nr = norms[r];
        for (g, &ui) in gz.row_mut(r).iter_mut().zip(ur) {
            *g = (*g - ui * proj) / nr;
        }
    }
    gz
}

/// Log-sum-exp over `row`, skipping index `skip` if given.
fn logsumexp(row: &[f64], skip: Option<usize>) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != skip)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + s.ln()
}

/// NT-Xent over `2B` views where rows `i` and `i + B` are positives.
///
/// `loss = −mean_i log[ exp(sim(z_i, z_p(i))/τ) / Σ_{k≠i} exp(sim(z_i, z_k)/τ) ]`
pub fn nt_xent(z: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    let n = z.rows();
    if n < 4 || n % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "nt-xent needs an even number of views >= 4, got {n}"
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let b = n / 2;
    let (u, norms) = normalize_rows(z, "nt-xent")?;
    let mut s = u.matmul_t(&u)?;
    s.scale(1.0 / tau);

    let nf = n as f64;
    let mut total = 0.0;
    // dL/dS, before the 1/τ factor
    let mut gs = Matrix::zeros(n, n);
    for i in 0..n {
        let p = (i + b) % n;
        let row = s.row(i);
        let lse = logsumexp(row, Some(i));
        total += lse - row[p];
        let g = gs.row_mut(i);
        for k in 0..n {
            if k == i {
                continue;
            }
            let soft = (row[k] - lse).exp();
            g[k] = (soft - if k == p { 1.0 } else { 0.0 }) / nf;
        }
    }
    // S = UUᵀ/τ → dU = (G + Gᵀ)·U / τ
    let gsum = {
        let gt = gs.transpose();
        let data = gs.data().iter().zip(gt.data()).map(|(a, b)| a + b).collect();
        Matrix::from_vec(n, n, data)?
    };
    let mut gu = gsum.matmul(&u)?;
    gu.scale(1.0 / tau);
    Ok((total / nf, unnormalize_grad(&u, &norms, &gu)))
}

/// InfoNCE aligning each `pred_i` with `target_i` against the other targets in
/// the batch; gradient w.r.t. `pred` only.
pub fn info_nce(pred: &Matrix, target: &Matrix, tau: f64) -> Result<(f64, Matrix)> {
    same_shape(pred, target, "info-nce")?;
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let n = pred.rows();
    let (u, norms) = normalize_rows(pred, "info-nce")?;
    let (v, _) = normalize_rows(target, "info-nce")?;
    let mut logits = u.matmul_t(&v)?;
    logits.scale(1.0 / tau);
    let nf = n as f64;
    let mut total = 0.0;
    let mut gl = Matrix::zeros(n, n);
    for i in 0..n {
        let row = logits.row(i);
        let lse = logsumexp(row, None);
        total += lse - row[i];
        let g = gl.row_mut(i);
        for k in 0..n {
            g[k] = ((row[k] - lse).exp() - if k == i { 1.0 } else { 0.0 }) / nf;
        }
    }
    let mut gu = gl.matmul(&v)?;
    gu.scale(1.0 / tau);
    Ok((total / nf, unnormalize_grad(&u, &norms, &gu)))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Binary cross-entropy on logits (`n × 1`), labels in {0, 1}.
pub fn bce_with_logits(logits: &Matrix, labels: &[f64]) -> Result<(f64, Matrix)> {
    if logits.cols() != 1 {
        return Err(Error::dims("bce logits width", 1, logits.cols()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::dims("bce labels", logits.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("bce: empty batch".into()));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    let data = logits
        .data()
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            // −[y·log σ(z) + (1−y)·log(1−σ(z))] = softplus(z) − y·z
            total += softplus(z) - y * z;
            (sigmoid(z) - y) / n
        })
        .collect();
    Ok((total / n, Matrix::from_vec(labels.len(), 1, data)?))
}

/// Multinomial cross-entropy on logits with integer labels.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::dims("softmax labels", logits.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("softmax: empty batch".into()));
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (r, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {} classes",
                logits.cols()
            )));
        }
        let row = logits.row(r);
        let lse = logsumexp(row, None);
        total += lse - row[y];
        for (k, g) in grad.row_mut(r).iter_mut().enumerate() {
            *g = ((row[k] - lse).exp() - if k == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((total / n, grad))
}

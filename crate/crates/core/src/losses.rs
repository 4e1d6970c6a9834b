//! Contrastive objectives: InfoNCE, negative cosine with a stop-gradient
//! target, and Sinkhorn-Knopp targets with a KL swapped-prediction loss.
//!
//! Gradients are taken with respect to the raw (un-normalized) inputs, so the
//! callers can chain them straight into their projection heads.

use thiserror::Error;

use crate::tensor::{self, Matrix, ZERO_NORM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vector norm is numerically zero")]
    ZeroVector,
    #[error("sinkhorn produced non-finite values (epsilon {0} too small?)")]
    NonFinite(f64),
    #[error("invalid sinkhorn parameters: {0}")]
    InvalidParameter(String),
    #[error("invalid distribution at row {row}: {reason}")]
    InvalidDistribution { row: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, LossError>;

pub const DEFAULT_TAU: f64 = 0.2;
pub const DEFAULT_SINKHORN_EPSILON: f64 = 0.05;
pub const DEFAULT_SINKHORN_ITERATIONS: usize = 3;

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(LossError::DimensionMismatch { expected, found })
    }
}

fn unit(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = tensor::norm(v);
    if n <= ZERO_NORM {
        return Err(LossError::ZeroVector);
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Pulls a gradient w.r.t. `u = x / |x|` back to `x`.
fn unnormalize_grad(g: &[f64], u: &[f64], n: f64) -> Vec<f64> {
    let gu = tensor::dot(g, u);
    g.iter().zip(u).map(|(gi, ui)| (gi - gu * ui) / n).collect()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// InfoNCE loss and its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub d_anchor: Vec<f64>,
    pub d_positive: Vec<f64>,
    pub d_negatives: Vec<Vec<f64>>,
}

/// `-log(exp(s+) / (exp(s+) + sum_k exp(s_k)))` over L2-normalized inputs,
/// with `s = u . v / tau`.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    Ok(info_nce_with_grad(anchor, positive, negatives, tau)?.loss)
}

pub fn info_nce_with_grad(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<InfoNceGrad> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(LossError::InvalidTemperature(tau));
    }
    let dim = anchor.len();
    check_dim(dim, positive.len())?;
    for n in negatives {
        check_dim(dim, n.len())?;
    }
    let (u, nu) = unit(anchor)?;
    let (v, nv) = unit(positive)?;
    let units: Vec<(Vec<f64>, f64)> = negatives.iter().map(|n| unit(n)).collect::<Result<_>>()?;

    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(tensor::dot(&u, &v) / tau);
    logits.extend(units.iter().map(|(k, _)| tensor::dot(&u, k) / tau));
    let lse = log_sum_exp(&logits);
    let loss = lse - logits[0];
    let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();

    // dL/ds0 = p0 - 1, dL/dsk = pk.
    let g0 = (probs[0] - 1.0) / tau;
    let mut du: Vec<f64> = v.iter().map(|x| g0 * x).collect();
    for ((k, _), p) in units.iter().zip(&probs[1..]) {
        tensor::axpy(p / tau, k, &mut du);
    }
    let dv: Vec<f64> = u.iter().map(|x| g0 * x).collect();
    let d_negatives = units
        .iter()
        .zip(&probs[1..])
        .map(|((k, nk), p)| {
            let g: Vec<f64> = u.iter().map(|x| p / tau * x).collect();
            unnormalize_grad(&g, k, *nk)
        })
        .collect();

    Ok(InfoNceGrad {
        loss,
        d_anchor: unnormalize_grad(&du, &u, nu),
        d_positive: unnormalize_grad(&dv, &v, nv),
        d_negatives,
    })
}

/// `-(p / |p|) . (z / |z|)`.
pub fn neg_cosine(p: &[f64], z: &[f64]) -> Result<f64> {
    Ok(neg_cosine_with_grad(p, z)?.0)
}

/// Loss, gradient w.r.t. `p`, and gradient w.r.t. `z`. The target `z` is
/// under stop-gradient, so its gradient is always exactly zero.
pub fn neg_cosine_with_grad(p: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_dim(p.len(), z.len())?;
    let (u, np) = unit(p)?;
    let (v, _) = unit(z)?;
    let loss = -tensor::dot(&u, &v);
    let g: Vec<f64> = v.iter().map(|x| -x).collect();
    Ok((loss, unnormalize_grad(&g, &u, np), vec![0.0; z.len()]))
}

/// Transport-plan style soft assignment of `n` rows to `P` prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix(Matrix);

impl AssignmentMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.0.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.0.cols()];
        for r in self.0.row_iter() {
            tensor::axpy(1.0, r, &mut out);
        }
        out
    }

    /// Each row rescaled to sum to one.
    pub fn row_distributions(&self) -> Matrix {
        let mut m = self.0.clone();
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        m
    }
}

fn normalize_rows(q: &mut Matrix, target: f64) {
    for i in 0..q.rows() {
        let row = q.row_mut(i);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v *= target / s);
    }
}

fn normalize_cols(q: &mut Matrix, target: f64) {
    let mut sums = vec![0.0; q.cols()];
    for r in q.row_iter() {
        tensor::axpy(1.0, r, &mut sums);
    }
    for i in 0..q.rows() {
        for (v, s) in q.row_mut(i).iter_mut().zip(&sums) {
            *v *= target / s;
        }
    }
}

/// Sinkhorn-Knopp equipartition of `exp(scores / epsilon)`.
///
/// Each iteration normalizes rows to `1/n` then columns to `1/P`; a final
/// row step makes the row marginals exact.
pub fn sinkhorn_knopp(scores: &Matrix, epsilon: f64, iterations: usize) -> Result<AssignmentMatrix> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(LossError::InvalidParameter(format!("epsilon = {epsilon}")));
    }
    if iterations == 0 {
        return Err(LossError::InvalidParameter("iterations must be >= 1".into()));
    }
    let (n, p) = (scores.rows(), scores.cols());
    if n == 0 || p == 0 {
        return Err(LossError::InvalidParameter(format!("empty score matrix {n}x{p}")));
    }
    if scores.data().iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFinite(epsilon));
    }
    let mut q = scores.clone();
    for i in 0..n {
        let row = q.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = ((*v - max) / epsilon).exp());
    }
    let (row_target, col_target) = (1.0 / n as f64, 1.0 / p as f64);
    for _ in 0..iterations {
        normalize_rows(&mut q, row_target);
        normalize_cols(&mut q, col_target);
    }
    normalize_rows(&mut q, row_target);
    if q.data().iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(LossError::NonFinite(epsilon));
    }
    Ok(AssignmentMatrix(q))
}

/// Row-wise softmax of `scores / temperature`.
pub fn softmax_rows(scores: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(LossError::InvalidTemperature(temperature));
    }
    let mut out = scores.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let scaled: Vec<f64> = row.iter().map(|v| v / temperature).collect();
        let lse = log_sum_exp(&scaled);
        for (o, s) in row.iter_mut().zip(scaled) {
            *o = (s - lse).exp();
        }
    }
    Ok(out)
}

fn validate_distribution(row: &[f64], index: usize) -> Result<()> {
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(LossError::InvalidDistribution {
            row: index,
            reason: "negative or non-finite entry".into(),
        });
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(LossError::InvalidDistribution {
            row: index,
            reason: format!("sums to {s}"),
        });
    }
    Ok(())
}

/// `sum_p t_p log(t_p / q_p)` with `0 log 0 = 0`.
pub fn kl_divergence(target: &[f64], predicted: &[f64]) -> f64 {
    target
        .iter()
        .zip(predicted)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, q)| t * (t / q).ln())
        .sum()
}

/// Per-row `KL(target_i || predicted_i)`; targets are row-renormalized first.
pub fn swav_kl_rows(predicted: &Matrix, targets: &AssignmentMatrix) -> Result<Vec<f64>> {
    let t = targets.row_distributions();
    if (predicted.rows(), predicted.cols()) != (t.rows(), t.cols()) {
        return Err(LossError::DimensionMismatch {
            expected: t.rows() * t.cols(),
            found: predicted.rows() * predicted.cols(),
        });
    }
    let mut out = Vec::with_capacity(t.rows());
    for (i, (q, t)) in predicted.row_iter().zip(t.row_iter()).enumerate() {
        validate_distribution(q, i)?;
        validate_distribution(t, i)?;
        out.push(kl_divergence(t, q));
    }
    Ok(out)
}

/// Mean over rows of `KL(SK target || predicted)`.
pub fn swav_kl(predicted: &Matrix, targets: &AssignmentMatrix) -> Result<f64> {
    let rows = swav_kl_rows(predicted, targets)?;
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

/// Wraps a matrix as an assignment after validating it is strictly positive.
/// Intended for targets produced elsewhere, e.g. one-hot labels smoothed by
/// the caller.
pub fn assignment_from_matrix(m: Matrix) -> Result<AssignmentMatrix> {
    for (i, r) in m.row_iter().enumerate() {
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) || r.iter().sum::<f64>() <= 0.0 {
            return Err(LossError::InvalidDistribution {
                row: i,
                reason: "row is not a non-negative measure".into(),
            });
        }
    }
    Ok(AssignmentMatrix(m))
}

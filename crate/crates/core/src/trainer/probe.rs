//! Multinomial logistic regression on frozen features.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Result, TrainerError};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Fraction of samples used for training; the rest is held out.
    pub train_fraction: f64,
    /// Step size as a multiple of `1 / L`, where `L` bounds the curvature of
    /// the training loss.
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop once the training loss changes by less than this between epochs.
    pub tolerance: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.5,
            learning_rate: 1.0,
            max_epochs: 500,
            tolerance: 1e-6,
            l2: 1e-3,
        }
    }
}

/// Held-out accuracy of a softmax classifier trained by full-batch gradient
/// descent on standardized features. The split is stratified by class.
pub fn linear_probe<R: Rng + ?Sized>(
    features: &[Vec<f64>],
    labels: &[usize],
    config: &ProbeConfig,
    rng: &mut R,
) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(TrainerError::ShapeMismatch(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(config.train_fraction > 0.0 && config.train_fraction < 1.0) {
        return Err(TrainerError::InvalidConfig(format!(
            "train_fraction = {}",
            config.train_fraction
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(TrainerError::ShapeMismatch("ragged feature rows".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);

    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let k = ((idx.len() as f64) * config.train_fraction).round() as usize;
        let k = k.min(idx.len().saturating_sub(1)).max(usize::from(!idx.is_empty()));
        train.extend_from_slice(&idx[..k]);
        test.extend_from_slice(&idx[k..]);
    }
    let mut present = vec![false; classes];
    train.iter().for_each(|&i| present[labels[i]] = true);
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(TrainerError::SingleClass);
    }
    if test.is_empty() {
        return Err(TrainerError::InvalidConfig("empty held-out split".into()));
    }

    let mut mean = vec![0.0; dim];
    for &i in &train {
        mean.iter_mut().zip(&features[i]).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut sd = vec![0.0; dim];
    for &i in &train {
        sd.iter_mut()
            .zip(features[i].iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m));
    }
    sd.iter_mut().for_each(|s| {
        let v = (*s / train.len() as f64).sqrt();
        *s = if v > 1e-12 { v } else { 1.0 };
    });
    let standardize = |i: usize| -> Vec<f64> {
        let mut x: Vec<f64> = features[i]
            .iter()
            .zip(mean.iter().zip(&sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        x.push(1.0);
        x
    };
    let xs_train: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();
    let xs_test: Vec<Vec<f64>> = test.iter().map(|&i| standardize(i)).collect();

    let d = dim + 1;
    let mut w = vec![vec![0.0; d]; classes];
    let logits = |w: &[Vec<f64>], x: &[f64]| -> Vec<f64> {
        w.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    let n = xs_train.len() as f64;
    let step = config.learning_rate / (0.5 * gram_top_eigenvalue(&xs_train) + config.l2);
    let mut prev = f64::INFINITY;
    for _ in 0..config.max_epochs {
        let mut grad = vec![vec![0.0; d]; classes];
        let mut loss = 0.0;
        for (x, &i) in xs_train.iter().zip(&train) {
            let z = logits(&w, x);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[labels[i]];
            for (c, g) in grad.iter_mut().enumerate() {
                let p = (z[c] - lse).exp() - if c == labels[i] { 1.0 } else { 0.0 };
                g.iter_mut().zip(x).for_each(|(g, xv)| *g += p * xv);
            }
        }
        loss /= n;
        let reg: f64 = w.iter().flat_map(|r| &r[..dim]).map(|v| v * v).sum();
        loss += 0.5 * config.l2 * reg;
        if !loss.is_finite() {
            return Err(TrainerError::DivergedLoss {
                epoch: 0,
                batch: 0,
                loss,
            });
        }
        for (wr, gr) in w.iter_mut().zip(&grad) {
            for (j, (wv, gv)) in wr.iter_mut().zip(gr).enumerate() {
                let reg = if j < dim { config.l2 * *wv } else { 0.0 };
                *wv -= step * (gv / n + reg);
            }
        }
        if (prev - loss).abs() < config.tolerance {
            break;
        }
        prev = loss;
    }

    let correct = xs_test
        .iter()
        .zip(&test)
        .filter(|(x, &i)| {
            let z = logits(&w, x);
            let best = z
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (c, v)| if *v > acc.1 { (c, *v) } else { acc },
                )
                .0;
            best == labels[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Largest eigenvalue of `X^T X / n` by power iteration.
fn gram_top_eigenvalue(xs: &[Vec<f64>]) -> f64 {
    let d = xs[0].len();
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let mut next = vec![0.0; d];
        for x in xs {
            let s: f64 = x.iter().zip(&v).map(|(a, b)| a * b).sum();
            next.iter_mut().zip(x).for_each(|(o, xv)| *o += s * xv);
        }
        next.iter_mut().for_each(|o| *o /= xs.len() as f64);
        let norm = next.iter().map(|o| o * o).sum::<f64>().sqrt();
        if norm <= 1e-300 {
            return 1.0;
        }
        let converged = (norm - lambda).abs() <= 1e-9 * norm;
        lambda = norm;
        v = next.into_iter().map(|o| o / norm).collect();
        if converged {
            break;
        }
    }
    lambda.max(1e-12)
}

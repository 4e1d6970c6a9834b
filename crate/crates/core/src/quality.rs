//! Pair-quality scoring and quality-driven loss reweighting.
//!
//! A positive pair scores high when the two views agree on their foreground
//! and differ in their background: `q = cos(fg_a, fg_b) - cos(bg_a, bg_b)`,
//! where each region descriptor is the attention-weighted sum of the view's
//! feature tokens. A batch softmax over `q` gives the per-pair loss weights.

use thiserror::Error;

use crate::tensor::{self, AttentionMap, FeatureMap, PcaProjector, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QualityError {
    #[error("length mismatch: {weights} weights for {losses} losses")]
    LengthMismatch { weights: usize, losses: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite quality score at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, QualityError>;

/// Quality assigned to a pair whose region descriptor vanished.
pub const MIN_QUALITY: f64 = -2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairQuality {
    /// Foreground-foreground cosine.
    pub s_f: f64,
    /// Background-background cosine.
    pub s_b: f64,
    pub q: f64,
}

impl PairQuality {
    pub fn new(s_f: f64, s_b: f64) -> Self {
        Self { s_f, s_b, q: s_f - s_b }
    }

    /// The minimum-quality score used for unusable pairs.
    pub fn minimum() -> Self {
        Self::new(-1.0, 1.0)
    }
}

/// Foreground map (normalized first-component projection) and its complement.
pub fn foreground_background_maps(map: &FeatureMap, projector: &PcaProjector) -> Result<(AttentionMap, AttentionMap)> {
    let fg = tensor::attention_map(projector, map)?;
    let bg = fg.complement();
    Ok((fg, bg))
}

fn region_descriptors(map: &FeatureMap, projector: &PcaProjector) -> Result<(Vec<f64>, Vec<f64>)> {
    let (fg, bg) = foreground_background_maps(map, projector)?;
    Ok((
        tensor::spatial_aggregate(&fg, map)?,
        tensor::spatial_aggregate(&bg, map)?,
    ))
}

pub fn pair_quality(map_a: &FeatureMap, map_b: &FeatureMap, projector: &PcaProjector) -> Result<PairQuality> {
    if (map_a.height(), map_a.width(), map_a.channels()) != (map_b.height(), map_b.width(), map_b.channels()) {
        return Err(TensorError::DimensionMismatch {
            expected: format!("{}x{}x{}", map_a.height(), map_a.width(), map_a.channels()),
            found: format!("{}x{}x{}", map_b.height(), map_b.width(), map_b.channels()),
        }
        .into());
    }
    let (fa, ba) = region_descriptors(map_a, projector)?;
    let (fb, bb) = region_descriptors(map_b, projector)?;
    let s_f = tensor::cosine_similarity(&fa, &fb)?;
    let s_b = tensor::cosine_similarity(&ba, &bb)?;
    Ok(PairQuality::new(s_f, s_b))
}

/// A pair score plus whether it fell back to [`PairQuality::minimum`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub quality: PairQuality,
    pub zero_region: bool,
}

/// [`pair_quality`], mapping a vanished region to minimum quality.
pub fn score_pair(map_a: &FeatureMap, map_b: &FeatureMap, projector: &PcaProjector) -> Result<ScoredPair> {
    match pair_quality(map_a, map_b, projector) {
        Ok(quality) => Ok(ScoredPair {
            quality,
            zero_region: false,
        }),
        Err(QualityError::Tensor(TensorError::ZeroVector)) => Ok(ScoredPair {
            quality: PairQuality::minimum(),
            zero_region: true,
        }),
        Err(e) => Err(e),
    }
}

/// Where the attention projector for a batch comes from.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ProjectorSource {
    /// Refit on all tokens of both views of every pair in the batch.
    #[default]
    Batch,
    Global(PcaProjector),
}

/// Fits the batch-local projector. Fully degenerate batches (every token
/// identical) get an arbitrary axis, which yields constant attention maps.
pub fn fit_batch_projector(pairs: &[(&FeatureMap, &FeatureMap)]) -> Result<PcaProjector> {
    let maps: Vec<&FeatureMap> = pairs.iter().flat_map(|(a, b)| [*a, *b]).collect();
    match tensor::fit_pca_on_maps(&maps) {
        Ok(p) => Ok(p),
        Err(TensorError::DegenerateCovariance) => {
            let k = maps[0].channels();
            let mut axis = vec![0.0; k];
            axis[0] = 1.0;
            let mean = maps[0].token(0, 0).to_vec();
            Ok(PcaProjector::from_parts(mean, axis, maps.len() * maps[0].num_tokens())?)
        }
        Err(e) => Err(e.into()),
    }
}

/// Scores every pair of a batch under one projector.
pub fn score_batch(pairs: &[(&FeatureMap, &FeatureMap)], source: &ProjectorSource) -> Result<Vec<ScoredPair>> {
    if pairs.is_empty() {
        return Err(QualityError::EmptyBatch);
    }
    let fitted;
    let projector = match source {
        ProjectorSource::Batch => {
            fitted = fit_batch_projector(pairs)?;
            &fitted
        }
        ProjectorSource::Global(p) => p,
    };
    pairs.iter().map(|(a, b)| score_pair(a, b, projector)).collect()
}

/// Softmax weights over a batch; they sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights(Vec<f64>);

impl BatchWeights {
    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// `w_i = exp(q_i) / sum_j exp(q_j)`, computed with max subtraction.
pub fn batch_weights(qualities: &[f64]) -> Result<BatchWeights> {
    if qualities.is_empty() {
        return Err(QualityError::EmptyBatch);
    }
    if let Some(i) = qualities.iter().position(|q| !q.is_finite()) {
        return Err(QualityError::NonFinite(i));
    }
    let max = qualities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = qualities.iter().map(|q| (q - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(BatchWeights(exps.into_iter().map(|e| e / total).collect()))
}

/// `n * sum_i w_i * L_i`; uniform weights reproduce the plain sum of losses.
pub fn reweight_batch_loss(weights: &BatchWeights, losses: &[f64]) -> Result<f64> {
    if weights.len() != losses.len() {
        return Err(QualityError::LengthMismatch {
            weights: weights.len(),
            losses: losses.len(),
        });
    }
    let n = losses.len() as f64;
    Ok(n * weights.0.iter().zip(losses).map(|(w, l)| w * l).sum::<f64>())
}

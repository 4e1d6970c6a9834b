//! Foreground analysis and noise-level control for generated views.
//!
//! The offline pipeline is: project a feature map onto the global first
//! principal component, min-max normalize it into an attention map, count the
//! tokens above a calibrated threshold, map that proportion to a noise level,
//! and forward-noise the conditional embedding by that many DDPM steps. The
//! result is packaged as a [`GeneratorRequest`] for an external sampler.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::tensor::{self, AttentionMap, Embedding, FeatureMap, PcaProjector, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdaptiveError {
    #[error("empty input")]
    EmptyInput,
    #[error("value {value} outside {range}")]
    OutOfRange { value: f64, range: &'static str },
    #[error("invalid constant noise level {0}; expected one of 0, 100, 200, 300, 400")]
    InvalidConstant(u32),
    #[error("invalid schedule: {0}")]
    InvalidRange(String),
    #[error("noise level {level} exceeds schedule length {num_steps}")]
    LevelOutOfRange { level: u32, num_steps: usize },
    #[error("unknown noise strategy {0:?}")]
    UnknownStrategy(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AdaptiveError>;

/// Discrete noise levels reachable by adaptive and random selection.
pub const NOISE_LEVELS: [u32; 5] = [0, 100, 200, 300, 400];
pub const MAX_ADAPTIVE_LEVEL: u32 = 400;

pub const DEFAULT_NUM_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
pub const DEFAULT_TARGET_FRACTION: f64 = 0.4;
pub const DEFAULT_DENOISING_STEPS: u32 = 20;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 10.0;

/// Linear-beta DDPM forward schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[l]` for `l = 0..=num_steps`, with `alpha_bars[0] = 1`.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(AdaptiveError::InvalidRange("num_steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(AdaptiveError::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = if num_steps == 1 {
            vec![beta_start]
        } else {
            let step = (beta_end - beta_start) / (num_steps - 1) as f64;
            (0..num_steps).map(|i| beta_start + i as f64 * step).collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(num_steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// `betas[i - 1]` is the variance added at step `i`.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, level: u32) -> Result<f64> {
        self.alpha_bars
            .get(level as usize)
            .copied()
            .ok_or(AdaptiveError::LevelOutOfRange {
                level,
                num_steps: self.num_steps(),
            })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_NUM_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

/// Result of [`calibrate_threshold`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdCalibration {
    pub threshold: f64,
    /// Fraction of pooled values strictly above `threshold`.
    pub realized_fraction: f64,
    /// Set when fewer than half the target fraction lies above the
    /// threshold; the projector orientation is likely reversed.
    pub orientation_flip: bool,
}

/// Picks the threshold whose strict exceedance fraction over all pooled
/// attention values is closest to `target_fraction` (smallest on ties).
pub fn calibrate_threshold(maps: &[AttentionMap], target_fraction: f64) -> Result<ThresholdCalibration> {
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(AdaptiveError::OutOfRange {
            value: target_fraction,
            range: "(0, 1)",
        });
    }
    let mut values: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    if values.is_empty() {
        return Err(AdaptiveError::EmptyInput);
    }
    values.sort_by(f64::total_cmp);
    let total = values.len();

    let mut best: Option<(f64, f64, usize)> = None; // (distance, threshold, above)
    let mut i = 0;
    while i < total {
        let v = values[i];
        let mut j = i;
        while j < total && values[j] == v {
            j += 1;
        }
        let above = total - j;
        let distance = (above as f64 / total as f64 - target_fraction).abs();
        if best.is_none_or(|(d, _, _)| distance < d) {
            best = Some((distance, v, above));
        }
        i = j;
    }
    let (_, threshold, above) = best.expect("non-empty");
    let realized_fraction = above as f64 / total as f64;
    Ok(ThresholdCalibration {
        threshold,
        realized_fraction,
        orientation_flip: realized_fraction < 0.5 * target_fraction,
    })
}

/// Number of entries strictly above `threshold`.
pub fn count_foreground(attention: &AttentionMap, threshold: f64) -> usize {
    attention.data().iter().filter(|&&v| v > threshold).count()
}

/// Fraction of entries strictly above `threshold`.
pub fn foreground_proportion(attention: &AttentionMap, threshold: f64) -> f64 {
    count_foreground(attention, threshold) as f64 / attention.len() as f64
}

/// `min(100 * floor(p / 0.2), 400)`.
///
/// Proportions are ratios of token counts, so a value within 1e-9 below an
/// interval boundary is a rounding artifact of the boundary itself and is
/// snapped up. Use [`adaptive_noise_level_from_counts`] when counts are known.
pub fn adaptive_noise_level(p: f64) -> Result<u32> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AdaptiveError::OutOfRange {
            value: p,
            range: "[0, 1]",
        });
    }
    let bucket = (p * 5.0 + 1e-9).floor() as u32;
    Ok((100 * bucket).min(MAX_ADAPTIVE_LEVEL))
}

/// Exact integer form of [`adaptive_noise_level`] for `p = foreground / total`.
pub fn adaptive_noise_level_from_counts(foreground: usize, total: usize) -> Result<u32> {
    if total == 0 || foreground > total {
        return Err(AdaptiveError::OutOfRange {
            value: foreground as f64 / total as f64,
            range: "[0, 1]",
        });
    }
    let bucket = (5 * foreground as u64) / total as u64;
    Ok((100 * bucket as u32).min(MAX_ADAPTIVE_LEVEL))
}

/// Noise-level selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseStrategy {
    Constant(u32),
    Random,
    Adaptive,
}

impl NoiseStrategy {
    pub fn validate(self) -> Result<Self> {
        match self {
            NoiseStrategy::Constant(c) if !NOISE_LEVELS.contains(&c) => Err(AdaptiveError::InvalidConstant(c)),
            s => Ok(s),
        }
    }
}

impl fmt::Display for NoiseStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseStrategy::Constant(c) => write!(f, "CS({c})"),
            NoiseStrategy::Random => f.write_str("RS"),
            NoiseStrategy::Adaptive => f.write_str("AS"),
        }
    }
}

impl FromStr for NoiseStrategy {
    type Err = AdaptiveError;

    /// Accepts `adaptive`/`AS`, `random`/`RS`, and `constant:N`/`CS(N)`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let parse_level = |t: &str| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| AdaptiveError::UnknownStrategy(s.to_string()))
        };
        let strategy = match lower.as_str() {
            "adaptive" | "as" => NoiseStrategy::Adaptive,
            "random" | "rs" => NoiseStrategy::Random,
            other => {
                if let Some(rest) = other.strip_prefix("constant:") {
                    NoiseStrategy::Constant(parse_level(rest)?)
                } else if let Some(rest) = other.strip_prefix("cs(").and_then(|r| r.strip_suffix(')')) {
                    NoiseStrategy::Constant(parse_level(rest)?)
                } else {
                    return Err(AdaptiveError::UnknownStrategy(s.to_string()));
                }
            }
        };
        strategy.validate()
    }
}

pub fn select_noise_level<R: Rng + ?Sized>(strategy: NoiseStrategy, p: f64, rng: &mut R) -> Result<u32> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AdaptiveError::OutOfRange {
            value: p,
            range: "[0, 1]",
        });
    }
    match strategy.validate()? {
        NoiseStrategy::Constant(c) => Ok(c),
        NoiseStrategy::Random => Ok(NOISE_LEVELS[rng.random_range(0..NOISE_LEVELS.len())]),
        NoiseStrategy::Adaptive => adaptive_noise_level(p),
    }
}

/// `sqrt(abar_l) * c + sqrt(1 - abar_l) * eps` with `eps ~ N(0, I)`.
///
/// Level 0 returns `c` unchanged and draws nothing from `rng`.
pub fn noisy_embedding<R: Rng + ?Sized>(
    c: &Embedding,
    level: u32,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Embedding> {
    let alpha_bar = schedule.alpha_bar(level)?;
    if level == 0 {
        return Ok(c.clone());
    }
    let signal = alpha_bar.sqrt();
    let noise = (1.0 - alpha_bar).sqrt();
    let data = c
        .as_slice()
        .iter()
        .map(|&x| {
            let eps: f64 = rng.sample(StandardNormal);
            signal * x + noise * eps
        })
        .collect();
    Ok(Embedding::new(data)?)
}

/// Per-sample outcome of the foreground analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundAnalysis {
    pub proportion: f64,
    pub foreground_tokens: usize,
    pub threshold: f64,
    pub noise_level: u32,
    pub attention: AttentionMap,
}

/// Attention map and foreground count of `map`; the noise level is the
/// adaptive one.
pub fn analyze_foreground(map: &FeatureMap, projector: &PcaProjector, threshold: f64) -> Result<ForegroundAnalysis> {
    if !threshold.is_finite() {
        return Err(AdaptiveError::OutOfRange {
            value: threshold,
            range: "finite",
        });
    }
    let attention = tensor::attention_map(projector, map)?;
    let foreground_tokens = count_foreground(&attention, threshold);
    let total = attention.len();
    Ok(ForegroundAnalysis {
        proportion: foreground_tokens as f64 / total as f64,
        foreground_tokens,
        threshold,
        noise_level: adaptive_noise_level_from_counts(foreground_tokens, total)?,
        attention,
    })
}

/// Everything an external image-conditioned diffusion sampler needs to
/// produce one generated view.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorRequest {
    pub sample_id: String,
    pub noised_embedding: Embedding,
    pub noise_level: u32,
    pub denoising_steps: u32,
    pub guidance_scale: f64,
    /// Seed for the sampler's initial latent.
    pub latent_seed: u64,
    /// Opaque label naming the generator weights.
    pub generator_tag: String,
}

/// Sampler settings copied into every request.
#[derive(Debug, Clone, PartialEq)]
pub struct RequestParams {
    pub denoising_steps: u32,
    pub guidance_scale: f64,
    pub generator_tag: String,
}

impl Default for RequestParams {
    fn default() -> Self {
        Self {
            denoising_steps: DEFAULT_DENOISING_STEPS,
            guidance_scale: DEFAULT_GUIDANCE_SCALE,
            generator_tag: "stable-unclip-v2-1".to_string(),
        }
    }
}

/// Builds a request for an already chosen noise level.
pub fn build_request<R: Rng + ?Sized>(
    sample_id: &str,
    c: &Embedding,
    level: u32,
    schedule: &NoiseSchedule,
    params: &RequestParams,
    rng: &mut R,
) -> Result<GeneratorRequest> {
    if params.denoising_steps == 0 {
        return Err(AdaptiveError::InvalidRange("denoising_steps must be >= 1".into()));
    }
    let noised_embedding = noisy_embedding(c, level, schedule, rng)?;
    Ok(GeneratorRequest {
        sample_id: sample_id.to_string(),
        noised_embedding,
        noise_level: level,
        denoising_steps: params.denoising_steps,
        guidance_scale: params.guidance_scale,
        latent_seed: rng.random(),
        generator_tag: params.generator_tag.clone(),
    })
}

/// Full offline step for one sample: attention, proportion, level, noising.
#[allow(clippy::too_many_arguments)]
pub fn analyze_and_request<R: Rng + ?Sized>(
    sample_id: &str,
    c: &Embedding,
    feature_map: &FeatureMap,
    projector: &PcaProjector,
    threshold: f64,
    strategy: NoiseStrategy,
    schedule: &NoiseSchedule,
    params: &RequestParams,
    rng: &mut R,
) -> Result<(ForegroundAnalysis, GeneratorRequest)> {
    let mut analysis = analyze_foreground(feature_map, projector, threshold)?;
    analysis.noise_level = match strategy.validate()? {
        NoiseStrategy::Adaptive => analysis.noise_level,
        other => select_noise_level(other, analysis.proportion, rng)?,
    };
    let request = build_request(sample_id, c, analysis.noise_level, schedule, params, rng)?;
    Ok((analysis, request))
}

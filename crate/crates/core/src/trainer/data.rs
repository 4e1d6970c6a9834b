//! Synthetic token-grid images with a class-carrying foreground blob on an
//! environment-specific background.
//!
//! Foreground tokens are `fg_shared * u + fg_specific * v_c` plus noise, where
//! `u` is a common objectness axis (channel 0) and the `v_c` are orthonormal
//! class directions orthogonal to `u`. Background tokens come from one of a
//! few fixed Gaussian textures ("environments") plus noise and carry no class
//! information.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Result, TrainerError};
use crate::tensor::{self, AttentionMap, FeatureMap};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub environments: usize,
    /// Weight of the common objectness axis in every class mean.
    pub fg_shared: f64,
    /// Weight of the class-specific direction in each class mean.
    pub fg_specific: f64,
    pub bg_sigma: f64,
    pub noise_sigma: f64,
    /// Blob side lengths are drawn uniformly from `blob_min..=blob_max`.
    pub blob_min: usize,
    pub blob_max: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            samples_per_class: 128,
            height: 8,
            width: 8,
            channels: 16,
            environments: 8,
            fg_shared: 3.0,
            fg_specific: 4.0,
            bg_sigma: 1.0,
            noise_sigma: 0.3,
            blob_min: 2,
            blob_max: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainerError::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.samples_per_class < 8 {
            return bad(format!(
                "need at least 8 samples per class, got {}",
                self.samples_per_class
            ));
        }
        if self.height == 0 || self.width == 0 {
            return bad("empty spatial grid".into());
        }
        if self.classes + 1 > self.channels {
            return bad(format!(
                "{} classes need at least {} channels",
                self.classes,
                self.classes + 1
            ));
        }
        if self.environments == 0 {
            return bad("need at least one environment".into());
        }
        if self.blob_min == 0 || self.blob_min > self.blob_max || self.blob_max > self.height.min(self.width) {
            return bad(format!(
                "blob sides {}..={} do not fit a {}x{} grid",
                self.blob_min, self.blob_max, self.height, self.width
            ));
        }
        for (name, v) in [
            ("fg_shared", self.fg_shared),
            ("fg_specific", self.fg_specific),
            ("bg_sigma", self.bg_sigma),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn input_dim(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Axis-aligned foreground rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blob {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Blob {
    pub fn contains(&self, h: usize, w: usize) -> bool {
        h >= self.top && h < self.top + self.height && w >= self.left && w < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub image: FeatureMap,
    /// Class whose mean the foreground carries.
    pub class_id: usize,
    /// Ground-truth binary foreground mask.
    pub foreground_mask: AttentionMap,
    pub environment_id: usize,
}

impl SyntheticSample {
    /// Ground-truth foreground proportion.
    pub fn true_proportion(&self) -> f64 {
        self.foreground_mask.data().iter().sum::<f64>() / self.foreground_mask.len() as f64
    }
}

/// Fixed generative structure shared by a dataset and its generated views.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: SyntheticConfig,
    pub class_means: Vec<Vec<f64>>,
    pub backgrounds: Vec<FeatureMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub world: SyntheticWorld,
    pub samples: Vec<SyntheticSample>,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Orthonormal class directions in channels `1..K` (Gram-Schmidt).
fn class_directions<R: Rng + ?Sized>(classes: usize, channels: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while dirs.len() < classes {
        let mut v: Vec<f64> = (0..channels)
            .map(|k| if k == 0 { 0.0 } else { gaussian(rng) })
            .collect();
        for d in &dirs {
            let proj = tensor::dot(&v, d);
            tensor::axpy(-proj, d, &mut v);
        }
        let n = tensor::norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            dirs.push(v);
        }
    }
    dirs
}

impl SyntheticWorld {
    pub fn new<R: Rng + ?Sized>(config: SyntheticConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let k = config.channels;
        let class_means = class_directions(config.classes, k, rng)
            .into_iter()
            .map(|v| {
                let mut m: Vec<f64> = v.iter().map(|x| config.fg_specific * x).collect();
                m[0] += config.fg_shared;
                m
            })
            .collect();
        let backgrounds = (0..config.environments)
            .map(|_| {
                FeatureMap::from_tokens(config.height, config.width, k, |_, _| {
                    (0..k)
                        .map(|c| if c == 0 { 0.0 } else { config.bg_sigma * gaussian(rng) })
                        .collect()
                })
            })
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            config,
            class_means,
            backgrounds,
        })
    }

    fn random_blob<R: Rng + ?Sized>(&self, rng: &mut R) -> Blob {
        let c = &self.config;
        let height = rng.random_range(c.blob_min..=c.blob_max);
        let width = rng.random_range(c.blob_min..=c.blob_max);
        self.place_blob(height, width, rng)
    }

    fn place_blob<R: Rng + ?Sized>(&self, height: usize, width: usize, rng: &mut R) -> Blob {
        let c = &self.config;
        Blob {
            top: rng.random_range(0..=c.height - height),
            left: rng.random_range(0..=c.width - width),
            height,
            width,
        }
    }

    /// Renders one image; noise is drawn in token order.
    pub fn render<R: Rng + ?Sized>(
        &self,
        class_id: usize,
        environment_id: usize,
        blob: Blob,
        rng: &mut R,
    ) -> Result<SyntheticSample> {
        let c = &self.config;
        let mean = &self.class_means[class_id];
        let background = &self.backgrounds[environment_id];
        let image = FeatureMap::from_tokens(c.height, c.width, c.channels, |h, w| {
            let base = if blob.contains(h, w) {
                mean.as_slice()
            } else {
                background.token(h, w)
            };
            base.iter()
                .map(|v| {
                    if c.noise_sigma > 0.0 {
                        v + c.noise_sigma * gaussian(rng)
                    } else {
                        *v
                    }
                })
                .collect()
        })?;
        let mask = (0..c.height)
            .flat_map(|h| (0..c.width).map(move |w| if blob.contains(h, w) { 1.0 } else { 0.0 }))
            .collect();
        Ok(SyntheticSample {
            image,
            class_id,
            foreground_mask: AttentionMap::new(c.height, c.width, mask)?,
            environment_id,
        })
    }
}

/// Draws `samples_per_class` samples for every class, in class order.
pub fn generate_dataset<R: Rng + ?Sized>(config: &SyntheticConfig, rng: &mut R) -> Result<SyntheticDataset> {
    let world = SyntheticWorld::new(config.clone(), rng)?;
    let mut samples = Vec::with_capacity(config.classes * config.samples_per_class);
    for class_id in 0..config.classes {
        for _ in 0..config.samples_per_class {
            let env = rng.random_range(0..config.environments);
            let blob = world.random_blob(rng);
            samples.push(world.render(class_id, env, blob, rng)?);
        }
    }
    Ok(SyntheticDataset { world, samples })
}

/// Largest level accepted by the drift model.
pub const MAX_DRIFT_LEVEL: u32 = 1000;

/// Probability that a view generated at `level` loses its subject:
/// `min(1, kappa * (level / 1000) * (1 - p_true))`.
pub fn flip_probability(level: u32, drift_kappa: f64, true_proportion: f64) -> f64 {
    (drift_kappa * (f64::from(level) / f64::from(MAX_DRIFT_LEVEL)) * (1.0 - true_proportion)).clamp(0.0, 1.0)
}

fn blob_of(sample: &SyntheticSample) -> Blob {
    let m = &sample.foreground_mask;
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    for h in 0..m.height() {
        for w in 0..m.width() {
            if m.data()[h * m.width() + w] > 0.5 {
                top = top.min(h);
                left = left.min(w);
                bottom = bottom.max(h + 1);
                right = right.max(w + 1);
            }
        }
    }
    if top == usize::MAX {
        return Blob {
            top: 0,
            left: 0,
            height: 0,
            width: 0,
        };
    }
    Blob {
        top,
        left,
        height: bottom - top,
        width: right - left,
    }
}

/// Stand-in for an image generated from a noised embedding of `sample`.
///
/// Background environment and blob position are always resampled. With the
/// drift probability the foreground switches to a uniformly chosen different
/// class, which makes the pair a false positive.
pub fn simulate_generative_view<R: Rng + ?Sized>(
    world: &SyntheticWorld,
    sample: &SyntheticSample,
    level: u32,
    drift_kappa: f64,
    rng: &mut R,
) -> Result<SyntheticSample> {
    if level > MAX_DRIFT_LEVEL {
        return Err(TrainerError::LevelOutOfRange(level));
    }
    if !(drift_kappa >= 0.0 && drift_kappa.is_finite()) {
        return Err(TrainerError::InvalidConfig(format!("drift_kappa = {drift_kappa}")));
    }
    let classes = world.config.classes;
    let env = rng.random_range(0..world.config.environments);
    let size = blob_of(sample);
    let blob = if size.area() == 0 {
        Blob {
            top: 0,
            left: 0,
            height: 0,
            width: 0,
        }
    } else {
        world.place_blob(size.height, size.width, rng)
    };
    let flip_p = flip_probability(level, drift_kappa, sample.true_proportion());
    let class_id = if flip_p > 0.0 && rng.random_bool(flip_p) {
        let offset = rng.random_range(1..classes);
        (sample.class_id + offset) % classes
    } else {
        sample.class_id
    };
    world.render(class_id, env, blob, rng)
}

/// Hand-designed augmentation analogue plus the generated-view probability.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    /// Side fraction of the random crop, drawn uniformly from this range.
    pub crop_min: f64,
    pub crop_max: f64,
    pub additive_noise_sigma: f64,
    pub drift_kappa: f64,
    /// Probability of pairing with the generated view instead of a second
    /// standard augmentation.
    pub alpha: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_min: 0.75,
            crop_max: 1.0,
            additive_noise_sigma: 0.2,
            drift_kappa: 2.0,
            alpha: 1.0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = self.crop_min > 0.0
            && self.crop_min <= self.crop_max
            && self.crop_max <= 1.0
            && self.additive_noise_sigma >= 0.0
            && self.drift_kappa >= 0.0
            && (0.0..=1.0).contains(&self.alpha);
        if ok {
            Ok(())
        } else {
            Err(TrainerError::InvalidConfig(format!("augmentation policy {self:?}")))
        }
    }
}

/// Random resized crop (nearest neighbour on the token grid) followed by
/// additive Gaussian noise. The mask follows the crop.
pub fn augment<R: Rng + ?Sized>(
    sample: &SyntheticSample,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<SyntheticSample> {
    let img = &sample.image;
    let (hh, ww, k) = (img.height(), img.width(), img.channels());
    let frac = if policy.crop_max > policy.crop_min {
        rng.random_range(policy.crop_min..=policy.crop_max)
    } else {
        policy.crop_min
    };
    let ch = ((frac * hh as f64).round() as usize).clamp(1, hh);
    let cw = ((frac * ww as f64).round() as usize).clamp(1, ww);
    let top = rng.random_range(0..=hh - ch);
    let left = rng.random_range(0..=ww - cw);
    let src = |h: usize, w: usize| (top + h * ch / hh, left + w * cw / ww);

    let sigma = policy.additive_noise_sigma;
    let image = FeatureMap::from_tokens(hh, ww, k, |h, w| {
        let (sh, sw) = src(h, w);
        img.token(sh, sw)
            .iter()
            .map(|v| if sigma > 0.0 { v + sigma * gaussian(rng) } else { *v })
            .collect()
    })?;
    let m = &sample.foreground_mask;
    let mask = (0..hh)
        .flat_map(|h| (0..ww).map(move |w| (h, w)))
        .map(|(h, w)| {
            let (sh, sw) = src(h, w);
            m.data()[sh * ww + sw]
        })
        .collect();
    Ok(SyntheticSample {
        image,
        class_id: sample.class_id,
        foreground_mask: AttentionMap::new(hh, ww, mask)?,
        environment_id: sample.environment_id,
    })
}

/// Bernoulli(alpha) decision to use the generated view.
pub fn apply_genview_probability<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> bool {
    if alpha <= 0.0 {
        false
    } else if alpha >= 1.0 {
        true
    } else {
        rng.random_bool(alpha)
    }
}

/// Shuffled index order for one epoch.
pub fn epoch_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fg_tokens(s: &SyntheticSample) -> Vec<&[f64]> {
        s.image
            .tokens()
            .zip(s.foreground_mask.data())
            .filter(|(_, m)| **m > 0.5)
            .map(|(t, _)| t)
            .collect()
    }

    #[test]
    fn noiseless_class_foregrounds_identical() {
        let config = SyntheticConfig {
            environments: 1,
            noise_sigma: 0.0,
            samples_per_class: 8,
            ..Default::default()
        };
        let ds = generate_dataset(&config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for s in &ds.samples {
            for t in fg_tokens(s) {
                assert_eq!(t, ds.world.class_means[s.class_id].as_slice());
            }
        }
    }

    #[test]
    fn orthogonal_class_means_separate() {
        let config = SyntheticConfig {
            classes: 2,
            fg_shared: 0.0,
            noise_sigma: 0.01,
            samples_per_class: 8,
            ..Default::default()
        };
        let ds = generate_dataset(&config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mean_fg = |s: &SyntheticSample| {
            let toks = fg_tokens(s);
            let mut acc = vec![0.0; config.channels];
            for t in &toks {
                tensor::axpy(1.0 / toks.len() as f64, t, &mut acc);
            }
            acc
        };
        let a = mean_fg(&ds.samples[0]);
        let b = mean_fg(&ds.samples[1]);
        let c = mean_fg(&ds.samples[8]);
        assert!((tensor::cosine_similarity(&a, &b).unwrap() - 1.0).abs() < 0.05);
        assert!(tensor::cosine_similarity(&a, &c).unwrap().abs() < 0.05);
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        let config = SyntheticConfig::default();
        let a = generate_dataset(&config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_dataset(&config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for config in [
            SyntheticConfig {
                classes: 1,
                ..Default::default()
            },
            SyntheticConfig {
                samples_per_class: 7,
                ..Default::default()
            },
            SyntheticConfig {
                classes: 16,
                ..Default::default()
            },
            SyntheticConfig {
                blob_max: 9,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                generate_dataset(&config, &mut rng),
                Err(TrainerError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn level_zero_never_flips_and_keeps_size() {
        let config = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = generate_dataset(&config, &mut rng).unwrap();
        for s in ds.samples.iter().take(50) {
            let g = simulate_generative_view(&ds.world, s, 0, 5.0, &mut rng).unwrap();
            assert_eq!(g.class_id, s.class_id);
            assert_eq!(g.true_proportion(), s.true_proportion());
            let g = simulate_generative_view(&ds.world, s, 400, 0.0, &mut rng).unwrap();
            assert_eq!(g.class_id, s.class_id);
        }
        assert!(matches!(
            simulate_generative_view(&ds.world, &ds.samples[0], 1001, 1.0, &mut rng),
            Err(TrainerError::LevelOutOfRange(1001))
        ));
    }

    #[test]
    fn flip_frequency_matches_drift_model() {
        let config = SyntheticConfig {
            height: 10,
            width: 10,
            blob_min: 1,
            blob_max: 10,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let world = SyntheticWorld::new(config, &mut rng).unwrap();
        // 10 of 100 tokens in the foreground: p_true = 0.1.
        let sample = world
            .render(
                1,
                0,
                Blob {
                    top: 0,
                    left: 0,
                    height: 2,
                    width: 5,
                },
                &mut rng,
            )
            .unwrap();
        assert!((sample.true_proportion() - 0.1).abs() < 1e-15);
        assert!((flip_probability(400, 2.0, 0.1) - 0.72).abs() < 1e-12);
        let trials = 20_000;
        let flips = (0..trials)
            .filter(|_| {
                simulate_generative_view(&world, &sample, 400, 2.0, &mut rng)
                    .unwrap()
                    .class_id
                    != 1
            })
            .count();
        let f = flips as f64 / trials as f64;
        assert!((0.70..=0.74).contains(&f), "{f}");
    }

    #[test]
    fn genview_probability_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert!((0..1000).all(|_| !apply_genview_probability(0.0, &mut rng)));
        assert!((0..1000).all(|_| apply_genview_probability(1.0, &mut rng)));
        let hits = (0..100_000)
            .filter(|_| apply_genview_probability(0.5, &mut rng))
            .count();
        let f = hits as f64 / 100_000.0;
        assert!((0.49..=0.51).contains(&f), "{f}");
    }

    #[test]
    fn full_crop_without_noise_is_identity() {
        let config = SyntheticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ds = generate_dataset(&config, &mut rng).unwrap();
        let policy = AugmentationPolicy {
            crop_min: 1.0,
            crop_max: 1.0,
            additive_noise_sigma: 0.0,
            ..Default::default()
        };
        let a = augment(&ds.samples[3], &policy, &mut rng).unwrap();
        assert_eq!(a, ds.samples[3]);
    }
}

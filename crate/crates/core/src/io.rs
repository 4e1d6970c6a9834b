//! Tensor container files, run configuration and TSV tables.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "GVTF" | version: u32 = 1 | count: u32
//! per record: id_len: u16 | id: UTF-8 | dtype: u8 (1 = f32) | rank: u8 | dims: rank x u32 | payload
//! ```

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::adaptive::{self, NoiseSchedule, NoiseStrategy, RequestParams};
use crate::trainer::{LossFamily, Nonlinearity, ProjectorMode, TrainConfig, WeightingMode};

pub const MAGIC: &[u8; 4] = b"GVTF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {0:?}, expected \"GVTF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated at byte {offset}: {needed} more bytes needed")]
    TruncatedFile { offset: usize, needed: usize },
    #[error("duplicate tensor id '{0}'")]
    DuplicateId(String),
    #[error("record '{id}' declares {bytes} payload bytes but only {remaining} remain")]
    OversizeHeader { id: String, bytes: u128, remaining: usize },
    #[error("record '{id}': unsupported dtype code {code}")]
    UnsupportedDtype { id: String, code: u8 },
    #[error("record id is not valid UTF-8")]
    InvalidUtf8,
    #[error("tensor '{id}': {message}")]
    InvalidTensor { id: String, message: String },
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("config line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("config key '{key}': {message}")]
    ConfigValue { key: String, message: String },
    #[error("config line {line}: expected 'key = value'")]
    ConfigSyntax { line: usize },
    #[error("table line {line}: {message}")]
    Table { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, IoError>;

/// One named tensor of a container. Values are stored as f32 on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub id: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(id: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let id = id.into();
        let expected = dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d));
        if expected != Some(data.len()) {
            return Err(IoError::InvalidTensor {
                message: format!("dims {dims:?} do not match {} values", data.len()),
                id,
            });
        }
        Ok(Self { id, dims, data })
    }

    /// Narrows `f64` values to `f32`.
    pub fn from_f64(id: impl Into<String>, dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(id, dims, data.iter().map(|v| *v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| f64::from(*v)).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serializes tensors in container format.
pub fn encode_container(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(tensors.len()).map_err(|_| IoError::InvalidTensor {
        id: String::new(),
        message: "too many records".into(),
    })?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in tensors {
        if !seen.insert(t.id.as_str()) {
            return Err(IoError::DuplicateId(t.id.clone()));
        }
        let invalid = |message: &str| IoError::InvalidTensor {
            id: t.id.clone(),
            message: message.into(),
        };
        let id_len = u16::try_from(t.id.len()).map_err(|_| invalid("id longer than 65535 bytes"))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| invalid("rank above 255"))?;
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(invalid("dims do not match payload length"));
        }
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(t.id.as_bytes());
        out.push(DTYPE_F32);
        out.push(rank);
        for d in &t.dims {
            let d = u32::try_from(*d).map_err(|_| invalid("dimension above u32::MAX"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(IoError::TruncatedFile {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a container. Every declared payload is checked against the bytes
/// that remain before anything is allocated for it.
pub fn decode_container(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(IoError::BadMagic(magic));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let count = c.u32()?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for _ in 0..count {
        let id_len = usize::from(c.u16()?);
        let id = std::str::from_utf8(c.take(id_len)?)
            .map_err(|_| IoError::InvalidUtf8)?
            .to_string();
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(IoError::UnsupportedDtype { id, code: dtype });
        }
        let rank = usize::from(c.u8()?);
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32()? as usize);
        }
        let bytes_needed: u128 = dims.iter().map(|d| *d as u128).product::<u128>() * 4;
        if bytes_needed > c.remaining() as u128 {
            return Err(IoError::OversizeHeader {
                id,
                bytes: bytes_needed,
                remaining: c.remaining(),
            });
        }
        let payload = c.take(bytes_needed as usize)?;
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if !seen.insert(id.clone()) {
            return Err(IoError::DuplicateId(id));
        }
        out.push(NamedTensor { id, dims, data });
    }
    if c.remaining() > 0 {
        return Err(IoError::TrailingBytes(c.remaining()));
    }
    Ok(out)
}

pub fn write_container(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let bytes = encode_container(tensors)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

pub fn read_container(path: &Path) -> Result<Vec<NamedTensor>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_container(&bytes)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

/// A UTF-8 tab-separated table with a header row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn require_column(&self, name: &str) -> Result<usize> {
        self.column(name).ok_or_else(|| IoError::Table {
            line: 1,
            message: format!("missing column '{name}'"),
        })
    }

    /// Parses column `col` of every row as `T`.
    pub fn parse_column<T: std::str::FromStr>(&self, col: usize) -> Result<Vec<T>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r[col].parse().map_err(|_| IoError::Table {
                    line: i + 2,
                    message: format!("cannot parse '{}' in column '{}'", r[col], self.header[col]),
                })
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, head) = lines.next().ok_or(IoError::Table {
            line: 1,
            message: "empty table".into(),
        })?;
        let header: Vec<String> = head.split('\t').map(|s| s.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let row: Vec<String> = line.split('\t').map(|s| s.trim().to_string()).collect();
            if row.len() != header.len() {
                return Err(IoError::Table {
                    line: i + 1,
                    message: format!("{} fields, header has {}", row.len(), header.len()),
                });
            }
            rows.push(row);
        }
        Ok(Self { header, rows })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.header.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join("\t"));
            out.push('\n');
        }
        out
    }
}

/// Every setting of a run. Parsed from flat `key = value` text; `#` starts
/// a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub schedule_num_steps: usize,
    pub schedule_beta_start: f64,
    pub schedule_beta_end: f64,
    pub target_fraction: f64,
    pub strategy: NoiseStrategy,
    pub pca_sample: usize,
    pub quality_enabled: bool,
    pub projector: ProjectorMode,
    /// Pairs per scoring batch in `score`; 0 scores all pairs as one batch.
    pub quality_batch_size: usize,
    pub request: RequestParams,
    /// Trainer settings; weighting, projector, strategy, target fraction,
    /// PCA sample and loss settings are mirrored from the keys above.
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            schedule_num_steps: adaptive::DEFAULT_NUM_STEPS,
            schedule_beta_start: adaptive::DEFAULT_BETA_START,
            schedule_beta_end: adaptive::DEFAULT_BETA_END,
            target_fraction: train.target_fraction,
            strategy: train.strategy,
            pca_sample: train.pca_sample,
            quality_enabled: train.weighting == WeightingMode::Quality,
            projector: train.projector,
            quality_batch_size: 0,
            request: RequestParams::default(),
            train,
        }
    }
}

/// Accepted keys with their descriptions, in documentation order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for every random stream"),
    ("schedule.num_steps", "diffusion steps T of the linear schedule"),
    ("schedule.beta_start", "first beta of the linear schedule"),
    ("schedule.beta_end", "last beta of the linear schedule"),
    (
        "adaptive.target_fraction",
        "foreground fraction the threshold is calibrated to",
    ),
    (
        "adaptive.strategy",
        "noise level strategy: adaptive|AS, random|RS, constant:N|CS(N)",
    ),
    ("adaptive.pca_sample", "maximum number of maps in the global PCA fit"),
    ("quality.enabled", "weight pair losses by the softmax of quality scores"),
    ("quality.projector", "attention projector for scoring: batch or global"),
    (
        "quality.batch_size",
        "pairs per scoring batch in `score` (0 = one batch)",
    ),
    ("loss.family", "info_nce, neg_cosine or swav"),
    ("loss.tau", "InfoNCE temperature"),
    ("loss.sinkhorn_epsilon", "Sinkhorn-Knopp entropic regularization"),
    ("loss.sinkhorn_iterations", "Sinkhorn-Knopp iterations"),
    ("loss.swav_temperature", "softmax temperature of swav predictions"),
    ("request.T", "denoising steps requested from the generator"),
    ("request.guidance", "classifier-free guidance scale"),
    ("request.generator_tag", "generator identifier written to requests"),
    ("trainer.epochs", "training epochs"),
    ("trainer.batch_size", "pairs per training batch"),
    ("trainer.learning_rate", "SGD step size"),
    ("trainer.hidden_dim", "encoder feature width"),
    ("trainer.embed_dim", "projector output width"),
    ("trainer.predictor", "add a linear predictor head"),
    ("trainer.prototypes", "number of swav prototypes (0 = none)"),
    ("trainer.nonlinearity", "relu, tanh or identity"),
    ("trainer.init_gain", "initial weight scale relative to 1/sqrt(fan_in)"),
    ("trainer.alpha", "probability of using the generated view"),
    ("trainer.drift_kappa", "semantic drift severity of generated views"),
    ("trainer.crop_min", "smallest crop side fraction"),
    ("trainer.crop_max", "largest crop side fraction"),
    ("trainer.augment_noise", "additive noise of standard augmentations"),
    ("trainer.classes", "synthetic classes"),
    ("trainer.samples_per_class", "synthetic samples per class"),
    ("trainer.height", "token grid height"),
    ("trainer.width", "token grid width"),
    ("trainer.channels", "token channels"),
    ("trainer.environments", "distinct background textures"),
    (
        "trainer.fg_shared",
        "weight of the shared objectness axis in class means",
    ),
    ("trainer.fg_specific", "weight of the class direction in class means"),
    ("trainer.bg_sigma", "background texture scale"),
    ("trainer.noise_sigma", "per-token rendering noise"),
    ("trainer.blob_min", "smallest foreground side"),
    ("trainer.blob_max", "largest foreground side"),
    ("trainer.probe_train_fraction", "probe training split fraction"),
    ("trainer.probe_max_epochs", "probe gradient descent epochs"),
    ("trainer.probe_tolerance", "probe convergence tolerance"),
    ("trainer.probe_l2", "probe L2 penalty"),
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| IoError::ConfigValue {
        key: key.into(),
        message: format!("cannot parse '{value}': {e}"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(IoError::ConfigValue {
            key: key.into(),
            message: format!("expected a boolean, got '{value}'"),
        }),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(IoError::ConfigSyntax { line: i + 1 })?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
                return Err(IoError::UnknownKey {
                    line: i + 1,
                    key: key.into(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(IoError::ConfigValue {
                    key: key.into(),
                    message: format!("set twice (line {})", i + 1),
                });
            }
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// [`RunConfig::parse`], then `key=value` overrides that take precedence
    /// over the text.
    pub fn parse_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let mut config = Self::parse(text)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o.split_once('=').ok_or_else(|| IoError::ConfigValue {
                key: o.into(),
                message: "override must be 'key=value'".into(),
            })?;
            let key = key.trim();
            if !CONFIG_KEYS.iter().any(|(k, _)| *k == key) {
                return Err(IoError::ConfigValue {
                    key: key.into(),
                    message: "unknown key".into(),
                });
            }
            config.set(key, value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "schedule.num_steps" => self.schedule_num_steps = parse_value(key, v)?,
            "schedule.beta_start" => self.schedule_beta_start = parse_value(key, v)?,
            "schedule.beta_end" => self.schedule_beta_end = parse_value(key, v)?,
            "adaptive.target_fraction" => self.target_fraction = parse_value(key, v)?,
            "adaptive.strategy" => self.strategy = parse_value::<NoiseStrategy>(key, v)?,
            "adaptive.pca_sample" => self.pca_sample = parse_value(key, v)?,
            "quality.enabled" => self.quality_enabled = parse_bool(key, v)?,
            "quality.projector" => self.projector = parse_value::<ProjectorMode>(key, v)?,
            "quality.batch_size" => self.quality_batch_size = parse_value(key, v)?,
            "loss.family" => t.loss.family = parse_value::<LossFamily>(key, v)?,
            "loss.tau" => t.loss.tau = parse_value(key, v)?,
            "loss.sinkhorn_epsilon" => t.loss.sinkhorn_epsilon = parse_value(key, v)?,
            "loss.sinkhorn_iterations" => t.loss.sinkhorn_iterations = parse_value(key, v)?,
            "loss.swav_temperature" => t.loss.swav_temperature = parse_value(key, v)?,
            "request.T" => self.request.denoising_steps = parse_value(key, v)?,
            "request.guidance" => self.request.guidance_scale = parse_value(key, v)?,
            "request.generator_tag" => self.request.generator_tag = v.to_string(),
            "trainer.epochs" => t.epochs = parse_value(key, v)?,
            "trainer.batch_size" => t.batch_size = parse_value(key, v)?,
            "trainer.learning_rate" => t.learning_rate = parse_value(key, v)?,
            "trainer.hidden_dim" => t.encoder.hidden_dim = parse_value(key, v)?,
            "trainer.embed_dim" => t.encoder.embed_dim = parse_value(key, v)?,
            "trainer.predictor" => t.encoder.predictor = parse_bool(key, v)?,
            "trainer.prototypes" => t.encoder.prototypes = parse_value(key, v)?,
            "trainer.nonlinearity" => t.encoder.nonlinearity = parse_value::<Nonlinearity>(key, v)?,
            "trainer.init_gain" => t.encoder.init_gain = parse_value(key, v)?,
            "trainer.alpha" => t.augmentation.alpha = parse_value(key, v)?,
            "trainer.drift_kappa" => t.augmentation.drift_kappa = parse_value(key, v)?,
            "trainer.crop_min" => t.augmentation.crop_min = parse_value(key, v)?,
            "trainer.crop_max" => t.augmentation.crop_max = parse_value(key, v)?,
            "trainer.augment_noise" => t.augmentation.additive_noise_sigma = parse_value(key, v)?,
            "trainer.classes" => t.data.classes = parse_value(key, v)?,
            "trainer.samples_per_class" => t.data.samples_per_class = parse_value(key, v)?,
            "trainer.height" => t.data.height = parse_value(key, v)?,
            "trainer.width" => t.data.width = parse_value(key, v)?,
            "trainer.channels" => t.data.channels = parse_value(key, v)?,
            "trainer.environments" => t.data.environments = parse_value(key, v)?,
            "trainer.fg_shared" => t.data.fg_shared = parse_value(key, v)?,
            "trainer.fg_specific" => t.data.fg_specific = parse_value(key, v)?,
            "trainer.bg_sigma" => t.data.bg_sigma = parse_value(key, v)?,
            "trainer.noise_sigma" => t.data.noise_sigma = parse_value(key, v)?,
            "trainer.blob_min" => t.data.blob_min = parse_value(key, v)?,
            "trainer.blob_max" => t.data.blob_max = parse_value(key, v)?,
            "trainer.probe_train_fraction" => t.probe.train_fraction = parse_value(key, v)?,
            "trainer.probe_max_epochs" => t.probe.max_epochs = parse_value(key, v)?,
            "trainer.probe_tolerance" => t.probe.tolerance = parse_value(key, v)?,
            "trainer.probe_l2" => t.probe.l2 = parse_value(key, v)?,
            _ => unreachable!("key list and setter are in sync"),
        }
        Ok(())
    }

    /// Mirrors the shared keys into the trainer settings and checks ranges.
    fn validate(&mut self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(IoError::ConfigValue {
                key: key.into(),
                message,
            })
        };
        self.train.target_fraction = self.target_fraction;
        self.train.strategy = self.strategy;
        self.train.pca_sample = self.pca_sample;
        self.train.projector = self.projector;
        self.train.weighting = if self.quality_enabled {
            WeightingMode::Quality
        } else {
            WeightingMode::Uniform
        };
        if let Err(e) = self.schedule() {
            return bad("schedule.num_steps", e.to_string());
        }
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            return bad(
                "adaptive.target_fraction",
                format!("{} is outside (0, 1)", self.target_fraction),
            );
        }
        if self.pca_sample == 0 {
            return bad("adaptive.pca_sample", "must be at least 1".into());
        }
        if self.request.denoising_steps == 0 {
            return bad("request.T", "must be at least 1".into());
        }
        if !(self.request.guidance_scale.is_finite() && self.request.guidance_scale >= 0.0) {
            return bad("request.guidance", format!("{}", self.request.guidance_scale));
        }
        if let Err(e) = self.train.validate() {
            return bad("trainer", e.to_string());
        }
        Ok(())
    }

    pub fn schedule(&self) -> std::result::Result<NoiseSchedule, adaptive::AdaptiveError> {
        NoiseSchedule::linear(
            self.schedule_num_steps,
            self.schedule_beta_start,
            self.schedule_beta_end,
        )
    }

    /// The current values as config text, one documented key per line.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        for (key, doc) in CONFIG_KEYS {
            let value = match *key {
                "seed" => self.seed.to_string(),
                "schedule.num_steps" => self.schedule_num_steps.to_string(),
                "schedule.beta_start" => self.schedule_beta_start.to_string(),
                "schedule.beta_end" => self.schedule_beta_end.to_string(),
                "adaptive.target_fraction" => self.target_fraction.to_string(),
                "adaptive.strategy" => self.strategy.to_string(),
                "adaptive.pca_sample" => self.pca_sample.to_string(),
                "quality.enabled" => self.quality_enabled.to_string(),
                "quality.projector" => self.projector.to_string(),
                "quality.batch_size" => self.quality_batch_size.to_string(),
                "loss.family" => t.loss.family.to_string(),
                "loss.tau" => t.loss.tau.to_string(),
                "loss.sinkhorn_epsilon" => t.loss.sinkhorn_epsilon.to_string(),
                "loss.sinkhorn_iterations" => t.loss.sinkhorn_iterations.to_string(),
                "loss.swav_temperature" => t.loss.swav_temperature.to_string(),
                "request.T" => self.request.denoising_steps.to_string(),
                "request.guidance" => self.request.guidance_scale.to_string(),
                "request.generator_tag" => self.request.generator_tag.clone(),
                "trainer.epochs" => t.epochs.to_string(),
                "trainer.batch_size" => t.batch_size.to_string(),
                "trainer.learning_rate" => t.learning_rate.to_string(),
                "trainer.hidden_dim" => t.encoder.hidden_dim.to_string(),
                "trainer.embed_dim" => t.encoder.embed_dim.to_string(),
                "trainer.predictor" => t.encoder.predictor.to_string(),
                "trainer.prototypes" => t.encoder.prototypes.to_string(),
                "trainer.nonlinearity" => t.encoder.nonlinearity.to_string(),
                "trainer.init_gain" => t.encoder.init_gain.to_string(),
                "trainer.alpha" => t.augmentation.alpha.to_string(),
                "trainer.drift_kappa" => t.augmentation.drift_kappa.to_string(),
                "trainer.crop_min" => t.augmentation.crop_min.to_string(),
                "trainer.crop_max" => t.augmentation.crop_max.to_string(),
                "trainer.augment_noise" => t.augmentation.additive_noise_sigma.to_string(),
                "trainer.classes" => t.data.classes.to_string(),
                "trainer.samples_per_class" => t.data.samples_per_class.to_string(),
                "trainer.height" => t.data.height.to_string(),
                "trainer.width" => t.data.width.to_string(),
                "trainer.channels" => t.data.channels.to_string(),
                "trainer.environments" => t.data.environments.to_string(),
                "trainer.fg_shared" => t.data.fg_shared.to_string(),
                "trainer.fg_specific" => t.data.fg_specific.to_string(),
                "trainer.bg_sigma" => t.data.bg_sigma.to_string(),
                "trainer.noise_sigma" => t.data.noise_sigma.to_string(),
                "trainer.blob_min" => t.data.blob_min.to_string(),
                "trainer.blob_max" => t.data.blob_max.to_string(),
                "trainer.probe_train_fraction" => t.probe.train_fraction.to_string(),
                "trainer.probe_max_epochs" => t.probe.max_epochs.to_string(),
                "trainer.probe_tolerance" => t.probe.tolerance.to_string(),
                "trainer.probe_l2" => t.probe.l2.to_string(),
                _ => unreachable!("key list and printer are in sync"),
            };
            let _ = writeln!(out, "# {doc}\n{key} = {value}");
        }
        out
    }
}

//! Command implementations behind the `genview` binary.
//!
//! Feature files are containers of rank-3 `[H, W, K]` maps (rank-2 `[T, K]`
//! is read as a `T x 1` grid); embedding files hold rank-1 tensors.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::adaptive::{self, AdaptiveError, NoiseStrategy};
use crate::io::{self, IoError, NamedTensor, RunConfig, Table};
use crate::quality::{self, ProjectorSource, QualityError};
use crate::seed;
use crate::tensor::{self, Embedding, FeatureMap, PcaProjector, TensorError};
use crate::trainer::{self, ExperimentReport, ProjectorMode, TrainerError};

/// A module error raised by the pipeline.
#[derive(Debug, Error)]
pub enum ModuleError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adaptive(#[from] AdaptiveError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error at '{key}': {message}")]
    Config { key: String, message: String },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("sample '{id}': {source}")]
    Sample {
        id: String,
        #[source]
        source: ModuleError,
    },
    #[error(transparent)]
    Module(#[from] ModuleError),
    #[error("report '{path}': {message}")]
    Report { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl From<TensorError> for PipelineError {
    fn from(e: TensorError) -> Self {
        Self::Module(e.into())
    }
}

impl From<AdaptiveError> for PipelineError {
    fn from(e: AdaptiveError) -> Self {
        Self::Module(e.into())
    }
}

impl From<QualityError> for PipelineError {
    fn from(e: QualityError) -> Self {
        Self::Module(e.into())
    }
}

impl From<TrainerError> for PipelineError {
    fn from(e: TrainerError) -> Self {
        Self::Module(e.into())
    }
}

fn with_id<E: Into<ModuleError>>(id: &str) -> impl FnOnce(E) -> PipelineError + '_ {
    move |e| PipelineError::Sample {
        id: id.to_string(),
        source: e.into(),
    }
}

fn tensor_code(e: &TensorError) -> i32 {
    match e {
        TensorError::DimensionMismatch { .. }
        | TensorError::InvalidShape(_)
        | TensorError::InsufficientSamples { .. } => 3,
        _ => 4,
    }
}

fn module_code(e: &ModuleError) -> i32 {
    match e {
        ModuleError::Tensor(t)
        | ModuleError::Quality(QualityError::Tensor(t))
        | ModuleError::Adaptive(AdaptiveError::Tensor(t)) => tensor_code(t),
        ModuleError::Quality(QualityError::LengthMismatch { .. } | QualityError::EmptyBatch) => 3,
        ModuleError::Adaptive(
            AdaptiveError::InvalidConstant(_) | AdaptiveError::UnknownStrategy(_) | AdaptiveError::InvalidRange(_),
        ) => 2,
        ModuleError::Trainer(TrainerError::InvalidConfig(_)) => 2,
        ModuleError::Trainer(TrainerError::ShapeMismatch(_)) => 3,
        _ => 4,
    }
}

/// Process exit code: 2 configuration, 3 input format, 4 numerical failure.
pub fn exit_code(error: &PipelineError) -> i32 {
    match error {
        PipelineError::Config { .. } => 2,
        PipelineError::Io(IoError::UnknownKey { .. } | IoError::ConfigValue { .. } | IoError::ConfigSyntax { .. }) => 2,
        PipelineError::Io(_) | PipelineError::MissingInput(_) | PipelineError::Report { .. } => 3,
        PipelineError::Sample { source, .. } => module_code(source),
        PipelineError::Module(m) => module_code(m),
    }
}

/// Reads a container, reporting a missing file as [`PipelineError::MissingInput`].
pub fn load_container(path: &Path) -> Result<Vec<NamedTensor>> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(path.display().to_string()));
    }
    Ok(io::read_container(path)?)
}

fn load_table(path: &Path) -> Result<Table> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(path.display().to_string()));
    }
    Ok(Table::parse(&io::read_text(path)?)?)
}

/// Interprets a record as a feature map.
pub fn tensor_to_map(t: &NamedTensor) -> Result<FeatureMap> {
    let (h, w, k) = match t.dims.as_slice() {
        [h, w, k] => (*h, *w, *k),
        [n, k] => (*n, 1, *k),
        dims => {
            return Err(PipelineError::Io(IoError::InvalidTensor {
                id: t.id.clone(),
                message: format!("expected [H, W, K] or [T, K], found {dims:?}"),
            }))
        }
    };
    FeatureMap::new(h, w, k, t.to_f64()).map_err(with_id(&t.id))
}

pub fn map_to_tensor(id: &str, map: &FeatureMap) -> Result<NamedTensor> {
    Ok(NamedTensor::from_f64(
        id,
        vec![map.height(), map.width(), map.channels()],
        map.data(),
    )?)
}

fn load_maps(path: &Path) -> Result<Vec<(String, FeatureMap)>> {
    load_container(path)?
        .iter()
        .map(|t| Ok((t.id.clone(), tensor_to_map(t)?)))
        .collect()
}

/// Projector and threshold written by `calibrate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub projector: PcaProjector,
    pub threshold: f64,
    pub realized_fraction: f64,
    /// Whether the fitted orientation was replaced by its flip.
    pub flipped: bool,
}

impl Calibration {
    pub fn to_tensors(&self) -> Result<Vec<NamedTensor>> {
        let k = self.projector.dim();
        Ok(vec![
            NamedTensor::from_f64("mean", vec![k], self.projector.mean())?,
            NamedTensor::from_f64("component", vec![k], self.projector.component())?,
            NamedTensor::from_f64("threshold", vec![1], &[self.threshold])?,
            NamedTensor::from_f64("realized_fraction", vec![1], &[self.realized_fraction])?,
            NamedTensor::from_f64("fitted_on", vec![1], &[self.projector.fitted_on() as f64])?,
            NamedTensor::from_f64("flipped", vec![1], &[if self.flipped { 1.0 } else { 0.0 }])?,
        ])
    }

    pub fn from_tensors(tensors: &[NamedTensor]) -> Result<Self> {
        let get = |id: &str| {
            tensors
                .iter()
                .find(|t| t.id == id)
                .map(|t| t.to_f64())
                .ok_or_else(|| PipelineError::MissingInput(format!("calibration record '{id}'")))
        };
        let scalar = |id: &str| -> Result<f64> {
            get(id)?.first().copied().ok_or_else(|| {
                PipelineError::Io(IoError::InvalidTensor {
                    id: id.into(),
                    message: "empty scalar".into(),
                })
            })
        };
        let projector = PcaProjector::from_parts(get("mean")?, get("component")?, scalar("fitted_on")? as usize)?;
        Ok(Self {
            projector,
            threshold: scalar("threshold")?,
            realized_fraction: scalar("realized_fraction")?,
            flipped: scalar("flipped")? != 0.0,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(&load_container(path)?)
    }
}

/// Evenly strided subset of at most `limit` items.
fn stride_sample<T>(items: &[T], limit: usize) -> Vec<&T> {
    let stride = items.len().div_ceil(limit.max(1)).max(1);
    items.iter().step_by(stride).collect()
}

/// Global PCA on pooled tokens plus the foreground threshold. When the
/// calibration flags a reversed orientation and the flipped projector does
/// not, the flipped one is kept.
pub fn calibrate_maps(maps: &[FeatureMap], config: &RunConfig) -> Result<Calibration> {
    if maps.is_empty() {
        return Err(PipelineError::MissingInput("no feature maps to calibrate on".into()));
    }
    let fit: Vec<&FeatureMap> = stride_sample(maps, config.pca_sample);
    let projector = tensor::fit_pca_on_maps(&fit)?;
    let attention =
        |p: &PcaProjector| -> Result<Vec<_>> { maps.par_iter().map(|m| Ok(tensor::attention_map(p, m)?)).collect() };
    let calibration = adaptive::calibrate_threshold(&attention(&projector)?, config.target_fraction)?;
    if calibration.orientation_flip {
        let flipped = projector.flipped();
        let alt = adaptive::calibrate_threshold(&attention(&flipped)?, config.target_fraction)?;
        if !alt.orientation_flip {
            return Ok(Calibration {
                projector: flipped,
                threshold: alt.threshold,
                realized_fraction: alt.realized_fraction,
                flipped: true,
            });
        }
    }
    Ok(Calibration {
        projector,
        threshold: calibration.threshold,
        realized_fraction: calibration.realized_fraction,
        flipped: false,
    })
}

pub fn cmd_calibrate(features: &Path, config: &RunConfig) -> Result<Vec<NamedTensor>> {
    let maps: Vec<FeatureMap> = load_maps(features)?.into_iter().map(|(_, m)| m).collect();
    calibrate_maps(&maps, config)?.to_tensors()
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Per-sample foreground proportion and noise level, in input order.
pub fn cmd_analyze(features: &Path, calibration: &Path, config: &RunConfig) -> Result<Table> {
    let maps = load_maps(features)?;
    let cal = Calibration::load(calibration)?;
    let rows: Vec<Vec<String>> = maps
        .par_iter()
        .map(|(id, map)| {
            let analysis = adaptive::analyze_foreground(map, &cal.projector, cal.threshold).map_err(with_id(id))?;
            let mut rng = seed::stream(config.seed, &format!("analyze/{id}"));
            let level = match config.strategy {
                NoiseStrategy::Adaptive => analysis.noise_level,
                s => adaptive::select_noise_level(s, analysis.proportion, &mut rng).map_err(with_id(id))?,
            };
            Ok(vec![
                id.clone(),
                fmt_f64(analysis.proportion),
                analysis.foreground_tokens.to_string(),
                level.to_string(),
                config.strategy.to_string(),
                config.seed.to_string(),
            ])
        })
        .collect::<Result<_>>()?;
    let mut table = Table::new(["id", "p", "fg_tokens", "l", "strategy", "seed"]);
    rows.into_iter().for_each(|r| table.push(r));
    Ok(table)
}

/// Noised embeddings plus a metadata sidecar for the external generator.
pub fn cmd_perturb(embeddings: &Path, analysis: &Path, config: &RunConfig) -> Result<(Vec<NamedTensor>, Table)> {
    let records = load_container(embeddings)?;
    let table = load_table(analysis)?;
    let id_col = table.require_column("id")?;
    let l_col = table.require_column("l")?;
    let levels: Vec<u32> = table.parse_column(l_col)?;
    let by_id: HashMap<&str, u32> = table.rows.iter().map(|r| r[id_col].as_str()).zip(levels).collect();
    let schedule = config.schedule().map_err(|e| PipelineError::Config {
        key: "schedule.num_steps".into(),
        message: e.to_string(),
    })?;

    let results: Vec<(NamedTensor, Vec<String>)> = records
        .par_iter()
        .map(|rec| {
            if rec.dims.len() != 1 {
                return Err(PipelineError::Io(IoError::InvalidTensor {
                    id: rec.id.clone(),
                    message: format!("embedding must be rank 1, found dims {:?}", rec.dims),
                }));
            }
            let level = *by_id
                .get(rec.id.as_str())
                .ok_or_else(|| PipelineError::MissingInput(format!("analysis row for '{}'", rec.id)))?;
            let c = Embedding::new(rec.to_f64()).map_err(with_id(&rec.id))?;
            let mut rng = seed::stream(config.seed, &format!("perturb/{}", rec.id));
            let req = adaptive::build_request(&rec.id, &c, level, &schedule, &config.request, &mut rng)
                .map_err(with_id(&rec.id))?;
            let tensor = NamedTensor::from_f64(
                rec.id.clone(),
                vec![req.noised_embedding.dim()],
                req.noised_embedding.as_slice(),
            )?;
            let row = vec![
                req.sample_id,
                req.noise_level.to_string(),
                req.denoising_steps.to_string(),
                fmt_f64(req.guidance_scale),
                req.latent_seed.to_string(),
                req.generator_tag,
                config.seed.to_string(),
            ];
            Ok((tensor, row))
        })
        .collect::<Result<_>>()?;
    let mut sidecar = Table::new([
        "sample_id",
        "noise_level",
        "denoising_steps",
        "guidance_scale",
        "latent_seed",
        "generator_tag",
        "seed",
    ]);
    let mut tensors = Vec::with_capacity(results.len());
    for (t, row) in results {
        tensors.push(t);
        sidecar.push(row);
    }
    Ok((tensors, sidecar))
}

/// Sidecar path written next to a perturb output.
pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".tsv");
    PathBuf::from(s)
}

/// Pair quality of matching ids in two feature containers. Pairs are scored
/// in batches of `quality.batch_size` consecutive pairs (0 = one batch).
pub fn cmd_score(view_a: &Path, view_b: &Path, calibration: Option<&Path>, config: &RunConfig) -> Result<Table> {
    let a = load_maps(view_a)?;
    let b: HashMap<String, FeatureMap> = load_maps(view_b)?.into_iter().collect();
    let source = match (config.projector, calibration) {
        (ProjectorMode::Global, Some(p)) => ProjectorSource::Global(Calibration::load(p)?.projector),
        (ProjectorMode::Global, None) => {
            return Err(PipelineError::Config {
                key: "quality.projector".into(),
                message: "global scoring needs --calibration".into(),
            })
        }
        (ProjectorMode::Batch, _) => ProjectorSource::Batch,
    };
    let pairs: Vec<(&str, &FeatureMap, &FeatureMap)> = a
        .iter()
        .map(|(id, m)| {
            b.get(id)
                .map(|mb| (id.as_str(), m, mb))
                .ok_or_else(|| PipelineError::MissingInput(format!("second view for '{id}'")))
        })
        .collect::<Result<_>>()?;
    if pairs.is_empty() {
        return Err(PipelineError::MissingInput("no pairs to score".into()));
    }
    let size = if config.quality_batch_size == 0 {
        pairs.len()
    } else {
        config.quality_batch_size
    };
    let mut table = Table::new(["id", "batch", "s_f", "s_b", "q", "zero_region"]);
    for (batch, chunk) in pairs.chunks(size).enumerate() {
        let refs: Vec<(&FeatureMap, &FeatureMap)> = chunk.iter().map(|(_, x, y)| (*x, *y)).collect();
        let scored = match quality::score_batch(&refs, &source) {
            Ok(s) => s,
            Err(e) if chunk.len() == 1 => return Err(with_id(chunk[0].0)(e)),
            Err(e) => return Err(e.into()),
        };
        for ((id, _, _), s) in chunk.iter().zip(scored) {
            table.push(vec![
                id.to_string(),
                batch.to_string(),
                fmt_f64(s.quality.s_f),
                fmt_f64(s.quality.s_b),
                fmt_f64(s.quality.q),
                s.zero_region.to_string(),
            ]);
        }
    }
    Ok(table)
}

/// Softmax weights of a `q` table, per `batch` group when that column exists.
pub fn cmd_weights(scores: &Path) -> Result<Table> {
    weights_table(&load_table(scores)?)
}

pub fn weights_table(table: &Table) -> Result<Table> {
    let id_col = table.require_column("id")?;
    let q_col = table.require_column("q")?;
    let qs: Vec<f64> = table.parse_column(q_col)?;
    let batch_col = table.column("batch");
    let batch_of = |i: usize| batch_col.map_or_else(|| "0".to_string(), |c| table.rows[i][c].clone());

    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for i in 0..table.rows.len() {
        let b = batch_of(i);
        let g = *index.entry(b.clone()).or_insert_with(|| {
            groups.push((b, Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
    }
    let mut weights = vec![0.0; qs.len()];
    for (_, rows) in &groups {
        let q: Vec<f64> = rows.iter().map(|&i| qs[i]).collect();
        let w = quality::batch_weights(&q).map_err(|e| match e {
            QualityError::NonFinite(k) => with_id(&table.rows[rows[k]][id_col])(e),
            e => e.into(),
        })?;
        for (&i, wi) in rows.iter().zip(w.as_slice()) {
            weights[i] = *wi;
        }
    }
    let mut out = Table::new(["id", "batch", "q", "w"]);
    for (i, w) in weights.iter().enumerate() {
        out.push(vec![
            table.rows[i][id_col].clone(),
            batch_of(i),
            fmt_f64(qs[i]),
            fmt_f64(*w),
        ]);
    }
    Ok(out)
}

/// Runs the trainer with the configured seed.
pub fn cmd_train(config: &RunConfig) -> Result<ExperimentReport> {
    Ok(trainer::train_run(&config.train, config.seed)?)
}

pub fn report_json(report: &ExperimentReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// One-row TSV summary of a report.
pub fn report_summary(report: &ExperimentReport) -> Table {
    let mut t = Table::new([
        "seed",
        "loss_family",
        "weighting",
        "strategy",
        "alpha",
        "final_loss",
        "probe_accuracy",
        "flip_rate",
    ]);
    t.push(vec![
        report.seed.to_string(),
        report.loss_family.clone(),
        report.weighting.clone(),
        report.strategy.clone(),
        fmt_f64(report.alpha),
        report.loss_history.last().map_or_else(|| "-".into(), |l| fmt_f64(*l)),
        fmt_f64(report.probe_accuracy),
        fmt_f64(report.generation.flip_rate),
    ]);
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Markdown,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            other => Err(PipelineError::Config {
                key: "--format".into(),
                message: format!("unknown report format '{other}'"),
            }),
        }
    }
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    if !path.exists() {
        return Err(PipelineError::MissingInput(path.display().to_string()));
    }
    serde_json::from_str(&io::read_text(path)?).map_err(|e| PipelineError::Report {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Comparison table of several reports: one row per run configuration with
/// seed count, median and mean probe accuracy, and pair statistics.
pub fn cmd_report(paths: &[PathBuf], format: ReportFormat) -> Result<String> {
    if paths.is_empty() {
        return Err(PipelineError::MissingInput("no report files".into()));
    }
    let reports: Vec<ExperimentReport> = paths.iter().map(|p| load_report(p)).collect::<Result<_>>()?;
    let mut arms: BTreeMap<(String, String, String, String, String), Vec<&ExperimentReport>> = BTreeMap::new();
    for r in &reports {
        let key = (
            r.loss_family.clone(),
            r.weighting.clone(),
            r.strategy.clone(),
            format!("{}", r.alpha),
            format!("{}", r.drift_kappa),
        );
        arms.entry(key).or_default().push(r);
    }
    let header = [
        "loss",
        "weighting",
        "strategy",
        "alpha",
        "kappa",
        "seeds",
        "median_acc",
        "mean_acc",
        "flip_rate",
        "q_clean",
        "q_corrupted",
        "w_clean",
        "w_corrupted",
    ];
    let mut rows = Vec::new();
    for ((family, weighting, strategy, alpha, kappa), runs) in &arms {
        let mut accs: Vec<f64> = runs.iter().map(|r| r.probe_accuracy).collect();
        let n = runs.len() as f64;
        let mean_acc = accs.iter().sum::<f64>() / n;
        let mean_of = |f: &dyn Fn(&ExperimentReport) -> Option<f64>| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| f(r)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        rows.push(vec![
            family.clone(),
            weighting.clone(),
            strategy.clone(),
            alpha.clone(),
            kappa.clone(),
            runs.len().to_string(),
            format!("{:.4}", median(&mut accs)),
            format!("{mean_acc:.4}"),
            opt(mean_of(&|r| Some(r.generation.flip_rate))),
            opt(mean_of(&|r| r.pairs.mean_quality_clean)),
            opt(mean_of(&|r| r.pairs.mean_quality_corrupted)),
            opt(mean_of(&|r| r.pairs.mean_weight_clean)),
            opt(mean_of(&|r| r.pairs.mean_weight_corrupted)),
        ]);
    }
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| {} |", header.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            for r in rows {
                let _ = writeln!(out, "| {} |", r.join(" | "));
            }
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "{}", header.join(","));
            for r in rows {
                let _ = writeln!(out, "{}", r.join(","));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_maps(dir: &Path, name: &str, maps: &[(&str, FeatureMap)]) -> PathBuf {
        let path = dir.join(name);
        let tensors: Vec<NamedTensor> = maps.iter().map(|(id, m)| map_to_tensor(id, m).unwrap()).collect();
        io::write_container(&path, &tensors).unwrap();
        path
    }

    fn blob_map(k: usize, on: &[(usize, usize)]) -> FeatureMap {
        FeatureMap::from_tokens(4, 4, k, |h, w| {
            let mut t = vec![0.1 * (h as f64) - 0.05 * (w as f64); k];
            if on.contains(&(h, w)) {
                t[0] += 3.0;
            }
            t
        })
        .unwrap()
    }

    #[test]
    fn constant_maps_analyze_to_zero() {
        let dir = tempfile::tempdir().unwrap();
        let cal = Calibration {
            projector: PcaProjector::from_parts(vec![0.0; 3], vec![1.0, 0.0, 0.0], 10).unwrap(),
            threshold: 0.5,
            realized_fraction: 0.375,
            flipped: false,
        };
        let cal_path = dir.path().join("cal.gvtf");
        io::write_container(&cal_path, &cal.to_tensors().unwrap()).unwrap();
        assert_eq!(Calibration::load(&cal_path).unwrap(), cal);

        let constant = FeatureMap::from_tokens(4, 4, 3, |_, _| vec![1.0, 2.0, 3.0]).unwrap();
        let flat = write_maps(dir.path(), "c.gvtf", &[("x", constant.clone()), ("y", constant)]);
        for strategy in ["AS", "RS"] {
            let config = RunConfig {
                strategy: strategy.parse().unwrap(),
                ..Default::default()
            };
            let t = cmd_analyze(&flat, &cal_path, &config).unwrap();
            assert_eq!(t.rows.len(), 2);
            for r in &t.rows {
                assert_eq!(r[1], "0");
                if strategy == "AS" {
                    assert_eq!(r[3], "0");
                }
            }
        }
    }

    #[test]
    fn calibrated_blobs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let maps: Vec<(String, FeatureMap)> = (0..6)
            .map(|i| (format!("s{i}"), blob_map(3, &[(i % 4, 0), (i % 4, 1), (0, i % 4)])))
            .collect();
        let refs: Vec<(&str, FeatureMap)> = maps.iter().map(|(id, m)| (id.as_str(), m.clone())).collect();
        let features = write_maps(dir.path(), "f.gvtf", &refs);
        let config = RunConfig::default();
        let cal = Calibration::from_tensors(&cmd_calibrate(&features, &config).unwrap()).unwrap();
        assert!(cal.threshold > 0.0 && cal.threshold < 1.0);
        let cal_path = dir.path().join("cal.gvtf");
        io::write_container(&cal_path, &cal.to_tensors().unwrap()).unwrap();
        let t = cmd_analyze(&features, &cal_path, &config).unwrap();
        let ids: Vec<&str> = t.rows.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(ids, ["s0", "s1", "s2", "s3", "s4", "s5"]);
    }

    #[test]
    fn weights_of_equal_q_are_uniform() {
        let t = Table::parse("id\tq\na\t0\nb\t0\nc\t0\n").unwrap();
        let w = weights_table(&t).unwrap();
        let ws: Vec<f64> = w.parse_column(3).unwrap();
        for x in ws {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_sum_to_one_per_batch() {
        let t = Table::parse("id\tbatch\tq\na\t0\t0.3\nb\t1\t-1\nc\t0\t1.2\nd\t1\t0.5\ne\t1\t2\n").unwrap();
        let w = weights_table(&t).unwrap();
        let ws: Vec<f64> = w.parse_column(3).unwrap();
        assert!((ws[0] + ws[2] - 1.0).abs() < 1e-9);
        assert!((ws[1] + ws[3] + ws[4] - 1.0).abs() < 1e-9);
        assert!(ws[2] > ws[0]);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&PipelineError::MissingInput("x".into())), 3);
        assert_eq!(exit_code(&IoError::BadMagic(*b"XXXX").into()), 3);
        assert_eq!(
            exit_code(
                &IoError::UnknownKey {
                    line: 1,
                    key: "k".into()
                }
                .into()
            ),
            2
        );
        assert_eq!(exit_code(&TensorError::DegenerateCovariance.into()), 4);
        assert_eq!(exit_code(&TensorError::InvalidShape("x".into()).into()), 3);
    }

    #[test]
    fn sidecar_path_appends_tsv() {
        assert_eq!(
            sidecar_path(Path::new("out/req.gvtf")),
            PathBuf::from("out/req.gvtf.tsv")
        );
    }
}

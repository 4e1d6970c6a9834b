//! Dense tensor primitives shared by the rest of the crate.
//!
//! Everything here works in `f64`. Feature maps are stored row-major as
//! `H x W x K`, so the `K` channel values of a spatial token are contiguous.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("non-finite or out-of-range value: {0}")]
    InvalidValue(String),
    #[error("covariance is degenerate (all samples identical or no spread)")]
    DegenerateCovariance,
    #[error("vector norm is numerically zero")]
    ZeroVector,
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(expected: impl ToString, found: impl ToString) -> TensorError {
    TensorError::DimensionMismatch {
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(TensorError::InvalidValue(format!("{what}[{i}] = {}", data[i]))),
        None => Ok(()),
    }
}

/// `H x W x K` spatial feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(TensorError::InvalidShape(format!(
                "feature map {height}x{width}x{channels} has an empty axis"
            )));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(mismatch(expected, data.len()));
        }
        check_finite(&data, "feature map")?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(height, width, channels, vec![0.0; height * width * channels])
    }

    /// Builds a map token by token; `f(h, w)` must return `channels` values.
    pub fn from_tokens<F>(height: usize, width: usize, channels: usize, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut data = Vec::with_capacity(height * width * channels);
        for h in 0..height {
            for w in 0..width {
                let token = f(h, w);
                if token.len() != channels {
                    return Err(mismatch(channels, token.len()));
                }
                data.extend_from_slice(&token);
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn token(&self, h: usize, w: usize) -> &[f64] {
        let start = (h * self.width + w) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn token_mut(&mut self, h: usize, w: usize) -> &mut [f64] {
        let start = (h * self.width + w) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Tokens in row-major spatial order.
    pub fn tokens(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.channels)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: self.data.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Conditional embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(TensorError::InvalidShape("empty embedding".into()));
        }
        check_finite(&data, "embedding")?;
        Ok(Self(data))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Un-normalized `H x W` map, e.g. a principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(TensorError::InvalidShape(format!("scalar map {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(mismatch(height * width, data.len()));
        }
        check_finite(&data, "scalar map")?;
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// `H x W` map with every value in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl AttentionMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(TensorError::InvalidShape(format!("attention map {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(mismatch(height * width, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(TensorError::InvalidValue(format!(
                "attention[{i}] = {} outside [0, 1]",
                data[i]
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `1 - self`, elementwise.
    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1.0 - v).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Vec<f64> {
        self.data.iter().map(|v| v * factor).collect()
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(mismatch(rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(mismatch(cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.row_iter().map(|r| dot(r, x)).collect()
    }

    /// `self^T * y`.
    pub fn matvec_transposed(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yi) in self.row_iter().zip(y) {
            if yi != 0.0 {
                axpy(yi, r, &mut out);
            }
        }
        out
    }

    /// `self += scale * a b^T`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        let cols = self.cols;
        for (i, &ai) in a.iter().enumerate() {
            let s = scale * ai;
            if s != 0.0 {
                axpy(s, b, &mut self.data[i * cols..(i + 1) * cols]);
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Norms at or below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(mismatch(a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= ZERO_NORM || nb <= ZERO_NORM {
        return Err(TensorError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Mean and leading principal axis of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaProjector {
    mean: Vec<f64>,
    component: Vec<f64>,
    fitted_on: usize,
}

impl PcaProjector {
    /// Rebuilds a projector from stored parts, re-normalizing the component.
    pub fn from_parts(mean: Vec<f64>, component: Vec<f64>, fitted_on: usize) -> Result<Self> {
        if mean.len() != component.len() {
            return Err(mismatch(mean.len(), component.len()));
        }
        if mean.is_empty() {
            return Err(TensorError::InvalidShape("zero-dimensional projector".into()));
        }
        if fitted_on < 2 {
            return Err(TensorError::InsufficientSamples {
                needed: 2,
                got: fitted_on,
            });
        }
        check_finite(&mean, "projector mean")?;
        check_finite(&component, "projector component")?;
        let n = norm(&component);
        if n <= ZERO_NORM {
            return Err(TensorError::ZeroVector);
        }
        let component = component.iter().map(|v| v / n).collect();
        Ok(Self {
            mean,
            component,
            fitted_on,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn component(&self) -> &[f64] {
        &self.component
    }

    pub fn fitted_on(&self) -> usize {
        self.fitted_on
    }

    /// Same projector with the component negated.
    pub fn flipped(&self) -> Self {
        Self {
            component: self.component.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }

    pub fn project_token(&self, token: &[f64]) -> f64 {
        token
            .iter()
            .zip(&self.mean)
            .zip(&self.component)
            .map(|((x, m), c)| (x - m) * c)
            .sum()
    }
}

/// Dimension up to which the dense Jacobi solver is used instead of power iteration.
pub const DENSE_EIGEN_MAX_DIM: usize = 64;
const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERATIONS: usize = 10_000;

/// Fits the leading principal component of `samples`.
///
/// The returned component is the unit eigenvector of the sample covariance
/// with the largest eigenvalue, oriented so that its largest-magnitude entry
/// is non-negative.
pub fn fit_pca<S: AsRef<[f64]>>(samples: &[S]) -> Result<PcaProjector> {
    if samples.len() < 2 {
        return Err(TensorError::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let dim = samples[0].as_ref().len();
    if dim == 0 {
        return Err(TensorError::InvalidShape("zero-dimensional samples".into()));
    }
    for s in samples {
        let s = s.as_ref();
        if s.len() != dim {
            return Err(mismatch(dim, s.len()));
        }
        check_finite(s, "pca sample")?;
    }

    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        axpy(1.0, s.as_ref(), &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= n);

    let mut cov = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for s in samples {
        for ((c, x), m) in centered.iter_mut().zip(s.as_ref()).zip(&mean) {
            *c = x - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut cov[i * dim..(i + 1) * dim];
            for j in i..dim {
                row[j] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / (n - 1.0);
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }

    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    let scale = 1.0 + dot(&mean, &mean);
    // Also rejects a NaN trace.
    if trace.is_nan() || trace <= 1e-24 * scale {
        return Err(TensorError::DegenerateCovariance);
    }

    let (eigenvalue, mut component) = if dim <= DENSE_EIGEN_MAX_DIM {
        jacobi_top_eigen(&cov, dim)
    } else {
        power_iteration(&cov, dim)
    };
    if eigenvalue < 1e-12 * trace {
        return Err(TensorError::DegenerateCovariance);
    }
    orient(&mut component);
    PcaProjector::from_parts(mean, component, samples.len())
}

/// Fits a projector on every token of every map.
pub fn fit_pca_on_maps(maps: &[&FeatureMap]) -> Result<PcaProjector> {
    let Some(first) = maps.first() else {
        return Err(TensorError::InsufficientSamples { needed: 2, got: 0 });
    };
    let k = first.channels();
    if let Some(bad) = maps.iter().find(|m| m.channels() != k) {
        return Err(mismatch(k, bad.channels()));
    }
    let tokens: Vec<&[f64]> = maps.iter().flat_map(|m| m.tokens()).collect();
    fit_pca(&tokens)
}

fn orient(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Cyclic Jacobi rotations on a symmetric matrix; returns the largest
/// eigenpair.
fn jacobi_top_eigen(cov: &[f64], n: usize) -> (f64, Vec<f64>) {
    let mut a = cov.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * frob {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut top = 0;
    for i in 1..n {
        if a[i * n + i] > a[top * n + top] {
            top = i;
        }
    }
    let vec: Vec<f64> = (0..n).map(|k| v[k * n + top]).collect();
    (a[top * n + top], vec)
}

fn power_iteration(cov: &[f64], n: usize) -> (f64, Vec<f64>) {
    // Start from the covariance column with the largest norm: it has a
    // non-zero projection on the top eigenvector unless the matrix is zero.
    let mut start = 0;
    let mut best = -1.0;
    for j in 0..n {
        let col_norm: f64 = (0..n).map(|i| cov[i * n + j].powi(2)).sum();
        if col_norm > best {
            best = col_norm;
            start = j;
        }
    }
    let mut v: Vec<f64> = (0..n).map(|i| cov[i * n + start]).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut next = vec![0.0; n];
    let mut eigenvalue = 0.0;
    for _ in 0..POWER_MAX_ITERATIONS {
        for (i, out) in next.iter_mut().enumerate() {
            *out = dot(&cov[i * n..(i + 1) * n], &v);
        }
        eigenvalue = dot(&next, &v);
        let nn = norm(&next);
        if nn <= f64::MIN_POSITIVE {
            break;
        }
        next.iter_mut().for_each(|x| *x /= nn);
        let delta: f64 = next.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        std::mem::swap(&mut v, &mut next);
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    (eigenvalue, v)
}

/// Per-token projection `dot(token - mean, component)`.
pub fn project_first_component(projector: &PcaProjector, map: &FeatureMap) -> Result<ScalarMap> {
    if map.channels() != projector.dim() {
        return Err(mismatch(projector.dim(), map.channels()));
    }
    let data = map.tokens().map(|t| projector.project_token(t)).collect();
    ScalarMap::new(map.height(), map.width(), data)
}

/// Below this spread a map is treated as constant.
pub const CONSTANT_SPREAD: f64 = 1e-12;

/// Min-max rescale into `[0, 1]`; constant maps become 0.5 everywhere.
pub fn min_max_normalize(map: &ScalarMap) -> Result<AttentionMap> {
    check_finite(map.data(), "scalar map")?;
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let spread = hi - lo;
    let data = if spread < CONSTANT_SPREAD {
        vec![0.5; map.data().len()]
    } else {
        map.data().iter().map(|v| ((v - lo) / spread).clamp(0.0, 1.0)).collect()
    };
    AttentionMap::new(map.height(), map.width(), data)
}

/// Attention map of `map` under `projector`: projection then min-max.
pub fn attention_map(projector: &PcaProjector, map: &FeatureMap) -> Result<AttentionMap> {
    min_max_normalize(&project_first_component(projector, map)?)
}

/// `z[k] = sum_{h,w} weights[h,w] * map[h,w,k]`.
pub fn spatial_aggregate(weights: &AttentionMap, map: &FeatureMap) -> Result<Vec<f64>> {
    aggregate_weighted(weights.data(), weights.height(), weights.width(), map)
}

/// [`spatial_aggregate`] for arbitrary (unbounded) weights.
pub fn aggregate_weighted(weights: &[f64], height: usize, width: usize, map: &FeatureMap) -> Result<Vec<f64>> {
    if height != map.height() || width != map.width() || weights.len() != height * width {
        return Err(mismatch(
            format!("{}x{}", map.height(), map.width()),
            format!("{height}x{width}"),
        ));
    }
    let mut out = vec![0.0; map.channels()];
    for (&w, token) in weights.iter().zip(map.tokens()) {
        axpy(w, token, &mut out);
    }
    Ok(out)
}

//! Flatten, linear feature layer, elementwise nonlinearity, linear projector
//! and an optional linear predictor, with hand-written backward passes.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Result, TrainerError};
use crate::tensor::{FeatureMap, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Nonlinearity {
    #[default]
    Relu,
    Tanh,
    Identity,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Tanh => x.tanh(),
            Self::Identity => x,
        }
    }

    /// Derivative given the pre-activation and the activation.
    fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Self::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Tanh => 1.0 - post * post,
            Self::Identity => 1.0,
        }
    }
}

impl std::fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
            Self::Identity => "identity",
        })
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = TrainerError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "identity" | "none" | "linear" => Ok(Self::Identity),
            other => Err(TrainerError::InvalidConfig(format!("unknown nonlinearity '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub predictor: bool,
    /// Number of swav prototypes; 0 disables the prototype layer.
    pub prototypes: usize,
    pub nonlinearity: Nonlinearity,
    /// Standard deviation of initial weights is `init_gain / sqrt(fan_in)`.
    pub init_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 8 * 8 * 16,
            hidden_dim: 32,
            embed_dim: 32,
            predictor: false,
            prototypes: 0,
            nonlinearity: Nonlinearity::Relu,
            init_gain: 1.0,
        }
    }
}

/// Encoder `f`, projector `g`, predictor `q` and optional prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Option<Matrix>,
    pub prototypes: Option<Matrix>,
    pub nonlinearity: Nonlinearity,
}

fn random_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Matrix {
    let sd = gain / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).expect("shape matches data length")
}

/// Forward activations of one view, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewActivations {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub p: Option<Vec<f64>>,
}

impl ViewActivations {
    /// The predictor output when present, otherwise `z`.
    pub fn prediction(&self) -> &[f64] {
        self.p.as_deref().unwrap_or(&self.z)
    }
}

/// Parameter gradients, shaped like [`ToyEncoder`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub w1: Matrix,
    pub w2: Matrix,
    pub w3: Option<Matrix>,
    pub prototypes: Option<Matrix>,
}

impl EncoderGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(self.w2.data());
        if let Some(m) = &self.w3 {
            out.extend_from_slice(m.data());
        }
        if let Some(m) = &self.prototypes {
            out.extend_from_slice(m.data());
        }
        out
    }
}

impl ToyEncoder {
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        if config.input_dim == 0 || config.hidden_dim == 0 || config.embed_dim == 0 {
            return Err(TrainerError::InvalidConfig(format!("zero layer width in {config:?}")));
        }
        if !(config.init_gain >= 0.0 && config.init_gain.is_finite()) {
            return Err(TrainerError::InvalidConfig(format!("init_gain = {}", config.init_gain)));
        }
        let g = config.init_gain;
        let w1 = random_matrix(config.hidden_dim, config.input_dim, g, rng);
        let w2 = random_matrix(config.embed_dim, config.hidden_dim, g, rng);
        let w3 = config
            .predictor
            .then(|| random_matrix(config.embed_dim, config.embed_dim, g, rng));
        let prototypes = (config.prototypes > 0).then(|| random_matrix(config.prototypes, config.embed_dim, 1.0, rng));
        Ok(Self {
            w1,
            w2,
            w3,
            prototypes,
            nonlinearity: config.nonlinearity,
        })
    }

    /// Builds an encoder from explicit weights after checking the shapes chain.
    pub fn from_weights(
        w1: Matrix,
        w2: Matrix,
        w3: Option<Matrix>,
        prototypes: Option<Matrix>,
        nonlinearity: Nonlinearity,
    ) -> Result<Self> {
        let mismatch = |what: &str, expected: usize, found: usize| {
            Err(TrainerError::ShapeMismatch(format!(
                "{what}: expected {expected}, found {found}"
            )))
        };
        if w2.cols() != w1.rows() {
            return mismatch("projector input", w1.rows(), w2.cols());
        }
        if let Some(m) = &w3 {
            if m.rows() != w2.rows() || m.cols() != w2.rows() {
                return mismatch("predictor size", w2.rows(), m.cols());
            }
        }
        if let Some(m) = &prototypes {
            if m.cols() != w2.rows() {
                return mismatch("prototype dim", w2.rows(), m.cols());
            }
        }
        Ok(Self {
            w1,
            w2,
            w3,
            prototypes,
            nonlinearity,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            w1: Matrix::zeros(self.w1.rows(), self.w1.cols()),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            w3: self.w3.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
            prototypes: self.prototypes.as_ref().map(|m| Matrix::zeros(m.rows(), m.cols())),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.parameter_slices().iter().map(|s| s.len()).sum()
    }

    fn parameter_slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.w1.data(), self.w2.data()];
        out.extend(self.w3.as_ref().map(|m| m.data()));
        out.extend(self.prototypes.as_ref().map(|m| m.data()));
        out
    }

    /// All parameters in [`EncoderGrads::flatten`] order.
    pub fn flatten(&self) -> Vec<f64> {
        self.parameter_slices().concat()
    }

    /// Mutable access to the `index`-th flattened parameter.
    pub fn parameter_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        let mut mats: Vec<&mut Matrix> = vec![&mut self.w1, &mut self.w2];
        mats.extend(self.w3.as_mut());
        mats.extend(self.prototypes.as_mut());
        for m in mats {
            let len = m.data().len();
            if index < len {
                return m.data_mut().get_mut(index);
            }
            index -= len;
        }
        None
    }

    pub fn all_finite(&self) -> bool {
        self.parameter_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &EncoderGrads, learning_rate: f64) {
        fn step(m: &mut Matrix, g: &Matrix, lr: f64) {
            for (w, d) in m.data_mut().iter_mut().zip(g.data()) {
                *w -= lr * d;
            }
        }
        step(&mut self.w1, &grads.w1, learning_rate);
        step(&mut self.w2, &grads.w2, learning_rate);
        if let (Some(m), Some(g)) = (self.w3.as_mut(), grads.w3.as_ref()) {
            step(m, g, learning_rate);
        }
        if let (Some(m), Some(g)) = (self.prototypes.as_mut(), grads.prototypes.as_ref()) {
            step(m, g, learning_rate);
        }
    }

    /// Encoder features `h` only.
    pub fn features(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.h)
    }

    pub fn forward(&self, input: &[f64]) -> Result<ViewActivations> {
        if input.len() != self.input_dim() {
            return Err(TrainerError::ShapeMismatch(format!(
                "input length: expected {}, found {}",
                self.input_dim(),
                input.len()
            )));
        }
        let pre = self.w1.matvec(input);
        let h: Vec<f64> = pre.iter().map(|v| self.nonlinearity.apply(*v)).collect();
        let z = self.w2.matvec(&h);
        let p = self.w3.as_ref().map(|m| m.matvec(&z));
        Ok(ViewActivations {
            input: input.to_vec(),
            pre,
            h,
            z,
            p,
        })
    }

    pub fn forward_map(&self, map: &FeatureMap) -> Result<ViewActivations> {
        self.forward(map.data())
    }

    pub fn forward_pair(&self, a: &FeatureMap, b: &FeatureMap) -> Result<(ViewActivations, ViewActivations)> {
        Ok((self.forward_map(a)?, self.forward_map(b)?))
    }

    /// Accumulates parameter gradients for one view given `dL/dz` and, when
    /// a predictor exists, `dL/dp`.
    pub fn backward(
        &self,
        act: &ViewActivations,
        dz: &[f64],
        dp: Option<&[f64]>,
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        let mut dz = dz.to_vec();
        if let (Some(w3), Some(dp), Some(g3)) = (&self.w3, dp, grads.w3.as_mut()) {
            g3.add_outer(1.0, dp, &act.z);
            let back = w3.matvec_transposed(dp);
            dz.iter_mut().zip(back).for_each(|(a, b)| *a += b);
        }
        grads.w2.add_outer(1.0, &dz, &act.h);
        let dh = self.w2.matvec_transposed(&dz);
        let dpre: Vec<f64> = dh
            .iter()
            .zip(act.pre.iter().zip(&act.h))
            .map(|(g, (pre, post))| g * self.nonlinearity.derivative(*pre, *post))
            .collect();
        grads.w1.add_outer(1.0, &dpre, &act.input);
        Ok(())
    }
}

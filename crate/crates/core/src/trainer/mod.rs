//! Synthetic end-to-end check of the view-construction and reweighting
//! mechanisms on a small contrastive learner.

pub mod data;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod probe;
pub mod run;

use thiserror::Error;

use crate::adaptive::AdaptiveError;
use crate::losses::LossError;
use crate::quality::QualityError;
use crate::tensor::TensorError;

pub use data::{
    apply_genview_probability, augment, generate_dataset, simulate_generative_view, AugmentationPolicy,
    SyntheticConfig, SyntheticDataset, SyntheticSample, SyntheticWorld,
};
pub use gradcheck::gradient_check;
pub use model::{EncoderConfig, Nonlinearity, ToyEncoder};
pub use objective::{LossFamily, LossSettings};
pub use probe::{linear_probe, ProbeConfig};
pub use run::{train_on_dataset, train_run, ExperimentReport, ProjectorMode, TrainConfig, WeightingMode};

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("noise level {0} outside [0, 1000]")]
    LevelOutOfRange(u32),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    DivergedLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("linear probe needs at least two classes in the training split")]
    SingleClass,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Adaptive(#[from] AdaptiveError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

pub type Result<T> = std::result::Result<T, TrainerError>;

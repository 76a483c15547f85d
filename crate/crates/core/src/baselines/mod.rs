//! Comparison models: an order-blind linear classifier over bag-of-concepts
//! features, and an LSTM language model.

mod boc;
mod lstm;

pub use boc::{boc_dataset, boc_featurize, train_boc, BocConfig, BocFeature, BocForecaster, BocModel};
pub use lstm::{Lstm, LstmConfig};

use crate::numerics::NumericsError;
use crate::training::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("no training examples")]
    EmptyTrainSet,
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("label {label} outside {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("feature width {found}, expected {expected}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

//! Trajectory prediction with a discrete latent motion pattern: a small
//! reverse-mode autodiff engine, data loading, the recurrent model, the
//! training objective, evaluation metrics and experiment orchestration.

pub mod autodiff;
pub mod dataio;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objective;

pub use autodiff::Array2;
pub use dataio::{Point, TrajectorySample};
pub use harness::{Checkpoint, ExperimentConfig, HarnessError, TrainState};
pub use metrics::{MetricReport, PcmdCurve};
pub use model::{CategoricalDistribution, ModelHyper, ModelParams};
pub use objective::{LossConfig, LossReport, Variant};

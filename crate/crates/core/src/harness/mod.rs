//! Experiment orchestration: configuration, training, evaluation,
//! ablations and run directories.

mod config;
mod data;
mod optim;
mod train;

pub use config::{AblationConfig, DataConfig, EvalConfig, ExperimentConfig, SceneSource, SynthData, TrainConfig};
pub use data::{load_dataset, Dataset};
pub use optim::Adam;
pub use train::{batches, epoch_order, train, train_from, Checkpoint, EpochRecord, TrainState, CHECKPOINT_VERSION};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataio::{DataError, TrajectorySample};
use crate::metrics::{self, MetricReport, MetricsError};
use crate::model::{ModelError, ModelParams};
use crate::objective::{ObjectiveError, Variant};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (total = {total})")]
    Divergence { epoch: usize, step: u64, total: f64 },
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl HarnessError {
    /// Process exit status: 2 config, 3 data, 4 divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Checkpoint(_) => 2,
            HarnessError::Objective(ObjectiveError::Config(_) | ObjectiveError::UnknownVariant(_)) => 2,
            HarnessError::Data(_) => 3,
            HarnessError::Divergence { .. } => 4,
            _ => 1,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "config",
            3 => "data",
            4 => "divergence",
            _ => "runtime",
        }
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })
}

pub fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_path_buf(), source })
}

/// Exact-enumeration evaluation of normalized samples.
pub fn evaluate(params: &ModelParams, samples: &[TrajectorySample], config: &ExperimentConfig) -> Result<MetricReport, HarnessError> {
    if params.k() != config.model.k {
        return Err(HarnessError::Config(format!("checkpoint has K = {}, config has K = {}", params.k(), config.model.k)));
    }
    if samples.is_empty() {
        return Err(HarnessError::Data("no evaluation samples".into()));
    }
    Ok(metrics::evaluate(params, samples, config.eval_m(), config.eval.n)?)
}

/// Writes `metrics.txt`, `pcmd.csv` and `latents.csv` into `dir`.
pub fn write_eval_outputs(
    dir: &Path,
    params: &ModelParams,
    samples: &[TrajectorySample],
    report: &MetricReport,
) -> Result<(), HarnessError> {
    ensure_dir(dir)?;
    metrics::write_report(report, dir.join("metrics.txt"))?;
    metrics::write_pcmd_csv(&report.pcmd, dir.join("pcmd.csv"))?;
    metrics::dump_latents(params, samples, dir.join("latents.csv"))?;
    Ok(())
}

/// Files of a finished training run.
pub struct RunOutputs {
    pub state: TrainState,
    pub report: MetricReport,
}

/// Trains, evaluates, and writes `checkpoint.json`, `loss_history.csv`
/// and the evaluation files into `dir`.
pub fn run_training(config: &ExperimentConfig, dir: &Path, on_epoch: impl FnMut(usize, &EpochRecord)) -> Result<RunOutputs, HarnessError> {
    config.validate()?;
    let data = load_dataset(&config.data)?;
    let state = train_from(TrainState::init(config)?, config, &data.train, on_epoch)?;
    ensure_dir(dir)?;
    let checkpoint = Checkpoint { config: config.clone(), state };
    checkpoint.save(dir.join("checkpoint.json"))?;
    write_file(&dir.join("loss_history.csv"), &checkpoint.state.history_csv())?;
    let report = evaluate(&checkpoint.state.params, &data.eval, config)?;
    write_eval_outputs(dir, &checkpoint.state.params, &data.eval, &report)?;
    Ok(RunOutputs { state: checkpoint.state, report })
}

/// One arm of the loss ablation, averaged over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub arm: &'static str,
    pub variant: Variant,
    pub seeds: usize,
    pub most_likely_ade: f64,
    pub most_likely_fde: f64,
    pub purity: Option<f64>,
}

pub const ABLATION_ARMS: [(&str, Variant); 3] =
    [("disdis", Variant::Disdis), ("without_l3", Variant::Cvae), ("without_l2", Variant::DisdisNoRecon)];

/// Most probable prior latent against pattern labels, when all labels exist.
pub fn purity(params: &ModelParams, samples: &[TrajectorySample]) -> Option<f64> {
    let labels: Vec<Option<u32>> = samples.iter().map(|s| s.pattern_label).collect();
    metrics::pattern_purity(&metrics::prior_argmax(params, samples), &labels).ok()
}

/// Trains `variant` once per seed on shared data; returns seed-mean
/// most-likely ADE, FDE and purity.
pub fn run_arm(
    config: &ExperimentConfig,
    data: &Dataset,
    variant: Variant,
    seeds: &[u64],
) -> Result<(f64, f64, Option<f64>), HarnessError> {
    let (mut ade, mut fde, mut pur, mut have_purity) = (0.0, 0.0, 0.0, true);
    for &seed in seeds {
        let mut arm = config.clone();
        arm.loss.variant = variant;
        arm.train.seed = seed;
        let state = train(&arm, &data.train)?;
        let report = evaluate(&state.params, &data.eval, &arm)?;
        ade += report.most_likely_ade;
        fde += report.most_likely_fde;
        match purity(&state.params, &data.eval) {
            Some(p) => pur += p,
            None => have_purity = false,
        }
    }
    let n = seeds.len() as f64;
    Ok((ade / n, fde / n, have_purity.then_some(pur / n)))
}

/// Full model, without the contrastive term, and without reconstruction.
pub fn run_ablation(config: &ExperimentConfig) -> Result<Vec<AblationRow>, HarnessError> {
    config.validate()?;
    let data = load_dataset(&config.data)?;
    let seeds = config.ablation_seeds();
    ABLATION_ARMS
        .iter()
        .map(|&(arm, variant)| {
            let (ade, fde, purity) = run_arm(config, &data, variant, &seeds)?;
            Ok(AblationRow { arm, variant, seeds: seeds.len(), most_likely_ade: ade, most_likely_fde: fde, purity })
        })
        .collect()
}

/// CSV with header `arm,variant,seeds,most_likely_ade,most_likely_fde,purity`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("arm,variant,seeds,most_likely_ade,most_likely_fde,purity\n");
    for r in rows {
        let purity = r.purity.map(|p| p.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{}", r.arm, r.variant, r.seeds, r.most_likely_ade, r.most_likely_fde, purity);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{default_personas, SynthSpec};
    use crate::model::ModelHyper;

    fn tiny_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::synthetic(SynthSpec::new(default_personas(), 4), 2, 2);
        config.model = ModelHyper { k: 4, d_f: 6, d_g: 4, d_c: 4, history_hidden: 6, future_hidden: 4, decoder_hidden: 6 };
        config.train.epochs = 2;
        config.train.batch_size = 8;
        config
    }

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::Data("x".into()).exit_code(), 3);
        assert_eq!(HarnessError::Divergence { epoch: 0, step: 0, total: f64::NAN }.exit_code(), 4);
        assert_eq!(HarnessError::Divergence { epoch: 0, step: 0, total: f64::NAN }.kind(), "divergence");
    }

    #[test]
    fn evaluation_rejects_k_mismatch_and_is_idempotent() {
        let config = tiny_config();
        let data = load_dataset(&config.data).unwrap();
        let params = ModelParams::init(&config.model, 0).unwrap();
        let a = evaluate(&params, &data.eval, &config).unwrap();
        assert_eq!(a, evaluate(&params, &data.eval, &config).unwrap());
        assert_eq!(a.most_likely_ade, a.pcmd.ade[0]);
        let mut other = config.clone();
        other.model.k = 5;
        assert!(matches!(evaluate(&params, &data.eval, &other), Err(HarnessError::Config(_))));
    }

    #[test]
    fn ablation_has_three_rows() {
        let rows = run_ablation(&tiny_config()).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.purity.is_some() && r.most_likely_ade.is_finite()));
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(3).unwrap().starts_with("without_l2,disdis_no_recon,1,"));
    }

    #[test]
    fn run_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&tiny_config(), dir.path(), |_, _| {}).unwrap();
        for name in ["checkpoint.json", "loss_history.csv", "metrics.txt", "pcmd.csv", "latents.csv"] {
            assert!(dir.path().join(name).exists(), "{name}");
        }
        let history = std::fs::read_to_string(dir.path().join("loss_history.csv")).unwrap();
        assert_eq!(history.lines().next(), Some("step,l1,l2,l3,total"));
        assert_eq!(history.lines().count(), 3);
        let latents = std::fs::read_to_string(dir.path().join("latents.csv")).unwrap();
        assert_eq!(latents.lines().count(), 1 + out.report.n_samples);
        let saved = Checkpoint::load(dir.path().join("checkpoint.json")).unwrap();
        assert_eq!(saved.state, out.state);
    }
}

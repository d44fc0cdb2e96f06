//! Deterministic mini-batch training and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Array2;
use crate::dataio::TrajectorySample;
use crate::model::{ModelHyper, ModelParams};
use crate::objective::{total_loss, LossReport};

use super::config::ExperimentConfig;
use super::optim::Adam;
use super::HarnessError;

/// Epoch-mean loss terms, recorded after each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Optimizer steps taken so far.
    pub step: u64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: Adam,
    pub step: u64,
    pub epoch: usize,
    /// Drives loss-internal sampling (score-function draws, view rotations).
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochRecord>,
}

/// Stream ids separating the seed's uses.
const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

impl TrainState {
    pub fn init(config: &ExperimentConfig) -> Result<Self, HarnessError> {
        let mut params = ModelParams::init(&config.model, config.train.seed)?;
        if config.loss.variant.fixed_prior() {
            params.prior_w = Array2::zeros(params.prior_w.rows(), params.prior_w.cols());
            params.prior_b = Array2::zeros(1, params.prior_b.cols());
        }
        let shapes: Vec<(usize, usize)> = params.tensors().iter().map(|a| a.shape()).collect();
        let t = &config.train;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(INIT_STREAM);
        Ok(TrainState { params, optimizer: Adam::new(&shapes, t.lr, t.beta1, t.beta2, t.eps), step: 0, epoch: 0, rng, history: Vec::new() })
    }

    /// Loss history as CSV with header `step,l1,l2,l3,total`.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("step,l1,l2,l3,total\n");
        for r in &self.history {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.l1, r.l2, r.l3, r.total);
        }
        s
    }
}

/// The sample order for `epoch`, a pure function of seed and epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM_BASE + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Consecutive batches of `size`; a trailing singleton joins the
/// previous batch, since the contrastive term needs two samples.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

fn frozen_mask(config: &ExperimentConfig) -> Vec<bool> {
    ModelParams::NAMES.iter().map(|n| config.loss.variant.fixed_prior() && matches!(*n, "prior_w" | "prior_b")).collect()
}

/// Trains from `state` until `config.train.epochs` epochs are done.
/// `on_epoch` sees each finished epoch's record.
pub fn train_from(
    mut state: TrainState,
    config: &ExperimentConfig,
    train: &[TrajectorySample],
    mut on_epoch: impl FnMut(usize, &EpochRecord),
) -> Result<TrainState, HarnessError> {
    if train.len() < 2 {
        return Err(HarnessError::Data(format!("need at least 2 training samples, got {}", train.len())));
    }
    let frozen = frozen_mask(config);
    while state.epoch < config.train.epochs {
        let order = epoch_order(config.train.seed, state.epoch, train.len());
        let mut sums = LossReport::default();
        for batch in batches(&order, config.train.batch_size) {
            let refs: Vec<&TrajectorySample> = batch.iter().map(|&i| &train[i]).collect();
            let (report, grads) = total_loss(&refs, &state.params, &config.loss, &mut state.rng)?;
            if !report.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(HarnessError::Divergence { epoch: state.epoch, step: state.step, total: report.total });
            }
            let mut tensors = state.params.tensors_mut();
            state.optimizer.step(&mut tensors, &grads, &frozen);
            state.step += 1;
            let w = refs.len() as f64;
            sums.l1_kl += w * report.l1_kl;
            sums.l2_recon += w * report.l2_recon;
            sums.l3_contrastive += w * report.l3_contrastive;
            sums.total += w * report.total;
        }
        let n = train.len() as f64;
        let record =
            EpochRecord { step: state.step, l1: sums.l1_kl / n, l2: sums.l2_recon / n, l3: sums.l3_contrastive / n, total: sums.total / n };
        on_epoch(state.epoch, &record);
        state.history.push(record);
        state.epoch += 1;
    }
    Ok(state)
}

pub fn train(config: &ExperimentConfig, train: &[TrajectorySample]) -> Result<TrainState, HarnessError> {
    train_from(TrainState::init(config)?, config, train, |_, _| {})
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u32,
    config: ExperimentConfig,
    hyper: ModelHyper,
    params: Vec<NamedArray>,
    optimizer: Adam,
    step: u64,
    epoch: usize,
    rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
}

/// A training state together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let s = &self.state;
        let params = ModelParams::NAMES
            .iter()
            .zip(s.params.tensors())
            .map(|(name, a)| NamedArray { name: name.to_string(), rows: a.rows(), cols: a.cols(), data: a.data().to_vec() })
            .collect();
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            hyper: s.params.hyper.clone(),
            params,
            optimizer: s.optimizer.clone(),
            step: s.step,
            epoch: s.epoch,
            rng: s.rng.clone(),
            history: s.history.clone(),
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let bad = |m: String| HarnessError::Checkpoint(m);
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if file.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported format version {}", file.format_version)));
        }
        if file.params.len() != ModelParams::NAMES.len() {
            return Err(bad(format!("expected {} arrays, found {}", ModelParams::NAMES.len(), file.params.len())));
        }
        let mut arrays = Vec::with_capacity(file.params.len());
        for (named, expected) in file.params.into_iter().zip(ModelParams::NAMES) {
            if named.name != *expected {
                return Err(bad(format!("expected array {expected}, found {}", named.name)));
            }
            arrays.push(Array2::from_vec(named.rows, named.cols, named.data).map_err(|e| bad(e.to_string()))?);
        }
        let params = ModelParams::from_arrays(file.hyper, arrays).map_err(|e| bad(e.to_string()))?;
        let state =
            TrainState { params, optimizer: file.optimizer, step: file.step, epoch: file.epoch, rng: file.rng, history: file.history };
        Ok(Checkpoint { config: file.config, state })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        super::write_file(path.as_ref(), &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{default_personas, SynthSpec};
    use crate::harness::data::load_dataset;
    use crate::objective::Variant;

    fn small_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::synthetic(SynthSpec::new(default_personas(), 6), 1, 2);
        config.model = ModelHyper { k: 4, d_f: 8, d_g: 4, d_c: 4, history_hidden: 8, future_hidden: 4, decoder_hidden: 8 };
        config.train.batch_size = 7;
        config.train.epochs = 3;
        config
    }

    #[test]
    fn batches_never_leave_a_singleton() {
        let order: Vec<usize> = (0..15).collect();
        let b = batches(&order, 7);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![7, 8]);
        assert_eq!(batches(&order[..14], 7).len(), 2);
        assert_eq!(batches(&order[..3], 7).len(), 1);
    }

    #[test]
    fn epoch_orders_are_permutations_and_differ() {
        let a = epoch_order(5, 0, 50);
        let b = epoch_order(5, 1, 50);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(a, b);
        assert_eq!(a, epoch_order(5, 0, 50));
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let mut config = small_config();
        config.train.epochs = 0;
        let data = load_dataset(&config.data).unwrap();
        let state = train(&config, &data.train).unwrap();
        assert_eq!(state.params, ModelParams::init(&config.model, config.train.seed).unwrap());
        assert!(state.history.is_empty());
    }

    #[test]
    fn resuming_from_a_checkpoint_is_bit_exact() {
        let config = small_config();
        let data = load_dataset(&config.data).unwrap();
        let straight = train(&config, &data.train).unwrap();

        let mut first = config.clone();
        first.train.epochs = 1;
        let partial = train(&first, &data.train).unwrap();
        let text = Checkpoint { config: first, state: partial }.to_json();
        let restored = Checkpoint::from_json(&text).unwrap();
        assert_eq!(restored.to_json(), text);
        let resumed = train_from(restored.state, &config, &data.train, |_, _| {}).unwrap();
        assert_eq!(resumed, straight);
    }

    #[test]
    fn fixed_prior_variant_keeps_prior_head_at_zero() {
        let mut config = small_config();
        config.loss.variant = Variant::Vae;
        let data = load_dataset(&config.data).unwrap();
        let state = train(&config, &data.train).unwrap();
        assert!(state.params.prior_w.data().iter().chain(state.params.prior_b.data()).all(|v| *v == 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let mut config = small_config();
        config.train.lr = 1e300;
        let data = load_dataset(&config.data).unwrap();
        assert!(matches!(train(&config, &data.train), Err(HarnessError::Divergence { .. })));
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let config = small_config();
        let state = TrainState::init(&config).unwrap();
        let text = Checkpoint { config, state }.to_json();
        assert!(Checkpoint::from_json(&text.replace("\"format_version\":1", "\"format_version\":9")).is_err());
        assert!(Checkpoint::from_json(&text.replace("enc_wx", "enc_wy")).is_err());
        assert!(Checkpoint::from_json("{}").is_err());
    }
}

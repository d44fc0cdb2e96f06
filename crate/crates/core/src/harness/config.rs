//! Experiment configuration, read from strict JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SynthSpec;
use crate::model::ModelHyper;
use crate::objective::LossConfig;

use super::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelHyper,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

/// Exactly one of `synth` and `scenes` must be given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synth: Option<SynthData>,
    pub scenes: Vec<SceneSource>,
    /// Leave-one-scene-out: evaluate on this scene id, train on the
    /// others. Without it, scene data is evaluated on its training set.
    pub holdout_scene: Option<String>,
    /// Add the 23 rotated copies (15° steps) of every training sample.
    pub augment: bool,
    /// Keep an evenly strided subset of at most this many training samples.
    pub max_train_samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthData {
    pub generator: SynthSpec,
    pub seed: u64,
    /// Size of the held-out evaluation set, per persona, drawn with the
    /// next seed.
    pub eval_per_persona: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSource {
    pub path: PathBuf,
    /// Scene id; defaults to the file stem.
    #[serde(default)]
    pub id: Option<String>,
    /// Optional `ped_id pattern_id` sidecar.
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

impl SceneSource {
    pub fn scene_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 30, batch_size: 64, lr: 1e-3, seed: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// PCMD length; defaults to `K`.
    pub m: Option<usize>,
    /// Best-of-N size, taken in exact-rank mode and clipped to `K`.
    pub n: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { m: None, n: 20, out_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Training seeds averaged per arm; empty means `train.seed` only.
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Minimal configuration on synthetic data.
    pub fn synthetic(spec: SynthSpec, data_seed: u64, eval_per_persona: usize) -> Self {
        ExperimentConfig {
            data: DataConfig { synth: Some(SynthData { generator: spec, seed: data_seed, eval_per_persona }), ..DataConfig::default() },
            model: ModelHyper::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for scene in &mut config.data.scenes {
            scene.path = base.join(&scene.path);
            if let Some(labels) = &mut scene.labels {
                *labels = base.join(&*labels);
            }
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: &str| Err(HarnessError::Config(m.to_string()));
        match (&self.data.synth, self.data.scenes.is_empty()) {
            (Some(_), false) => return cfg("data: give either synth or scenes, not both"),
            (None, true) => return cfg("data: one of synth or scenes is required"),
            (Some(_), true) if self.data.holdout_scene.is_some() => return cfg("data: holdout_scene needs scene files"),
            _ => {}
        }
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.loss.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let t = &self.train;
        if t.batch_size < 2 {
            return cfg("train.batch_size must be at least 2");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.eps.is_nan() || t.eps <= 0.0 {
            return cfg("train.lr and train.eps must be positive");
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return cfg("train.beta1 and train.beta2 must be in [0, 1)");
        }
        if let Some(m) = self.eval.m {
            if m == 0 || m > self.model.k {
                return cfg("eval.m must be in 1..=K");
            }
        }
        if self.eval.n == 0 {
            return cfg("eval.n must be at least 1");
        }
        Ok(())
    }

    pub fn eval_m(&self) -> usize {
        self.eval.m.unwrap_or(self.model.k)
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        if self.ablation.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.ablation.seeds.clone()
        }
    }
}

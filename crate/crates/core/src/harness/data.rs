//! Resolves a data configuration into normalized train and eval sets.

use crate::dataio::{load_labels, load_scene, normalize, rotate_augment, sort_samples, synth_generate, window_scene, TrajectorySample};

use super::config::DataConfig;
use super::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<TrajectorySample>,
    pub eval: Vec<TrajectorySample>,
}

const ROTATION_STEP_DEGREES: f64 = 15.0;

/// Evenly strided subset of at most `n` elements, order preserved.
fn strided<T: Clone>(items: &[T], n: usize) -> Vec<T> {
    if n >= items.len() {
        return items.to_vec();
    }
    (0..n).map(|i| items[i * items.len() / n].clone()).collect()
}

fn load_scenes(config: &DataConfig) -> Result<Vec<TrajectorySample>, HarnessError> {
    let mut all = Vec::new();
    for source in &config.scenes {
        let records = load_scene(&source.path)?;
        let mut samples = window_scene(&records, &source.scene_id()).samples;
        if let Some(path) = &source.labels {
            let labels = load_labels(path)?;
            for s in &mut samples {
                s.pattern_label = labels.get(&s.ped_id).copied();
            }
        }
        all.extend(samples);
    }
    sort_samples(&mut all);
    Ok(all)
}

pub fn load_dataset(config: &DataConfig) -> Result<Dataset, HarnessError> {
    let (train, eval) = if let Some(synth) = &config.synth {
        let train = synth_generate(&synth.generator, synth.seed)?;
        let eval_spec = crate::dataio::SynthSpec { n_per_persona: synth.eval_per_persona, ..synth.generator.clone() };
        let mut eval = synth_generate(&eval_spec, synth.seed.wrapping_add(1))?;
        eval.iter_mut().for_each(|s| s.scene_id = "synth-eval".to_string());
        (train, eval)
    } else {
        let all = load_scenes(config)?;
        match &config.holdout_scene {
            Some(holdout) => {
                let (eval, train): (Vec<_>, Vec<_>) = all.into_iter().partition(|s| &s.scene_id == holdout);
                if eval.is_empty() {
                    return Err(HarnessError::Data(format!("holdout scene {holdout:?} has no windows")));
                }
                (train, eval)
            }
            None => (all.clone(), all),
        }
    };
    let mut train = match config.max_train_samples {
        Some(n) => strided(&train, n),
        None => train,
    };
    if train.is_empty() {
        return Err(HarnessError::Data("no training windows".into()));
    }
    if eval.is_empty() {
        return Err(HarnessError::Data("no evaluation windows".into()));
    }
    train = train.iter().map(normalize).collect();
    if config.augment {
        train = train.iter().flat_map(|s| rotate_augment(s, ROTATION_STEP_DEGREES)).collect();
    }
    Ok(Dataset { train, eval: eval.iter().map(normalize).collect() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{default_personas, write_scene, SynthSpec};
    use crate::harness::config::{SceneSource, SynthData};
    use std::collections::HashSet;

    #[test]
    fn strided_subset() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(strided(&v, 4), vec![0, 2, 5, 7]);
        assert_eq!(strided(&v, 20), v);
    }

    #[test]
    fn synthetic_sets_are_disjoint_draws() {
        let config = DataConfig {
            synth: Some(SynthData { generator: SynthSpec::new(default_personas(), 5), seed: 4, eval_per_persona: 3 }),
            augment: true,
            ..DataConfig::default()
        };
        let d = load_dataset(&config).unwrap();
        assert_eq!(d.train.len(), 20 * 24);
        assert_eq!(d.eval.len(), 12);
        assert!(d.eval.iter().all(|s| s.obs[7] == [0.0, 0.0] && s.scene_id == "synth-eval"));
    }

    #[test]
    fn leave_one_scene_out_keeps_folds_apart() {
        let dir = tempfile::tempdir().unwrap();
        let mut scenes = Vec::new();
        for (i, name) in ["alpha", "beta", "gamma"].iter().enumerate() {
            let samples = synth_generate(&SynthSpec::new(default_personas(), 2), i as u64).unwrap();
            let path = dir.path().join(format!("{name}.txt"));
            write_scene(&path, &samples).unwrap();
            scenes.push(SceneSource { path, id: None, labels: None });
        }
        let config = DataConfig { scenes, holdout_scene: Some("beta".into()), ..DataConfig::default() };
        let d = load_dataset(&config).unwrap();
        let key = |s: &TrajectorySample| (s.scene_id.clone(), s.ped_id, s.first_frame);
        let train: HashSet<_> = d.train.iter().map(key).collect();
        assert!(d.eval.iter().all(|s| s.scene_id == "beta" && !train.contains(&key(s))));
        assert_eq!(d.train.len(), 16);
        assert_eq!(d.eval.len(), 8);

        let missing = DataConfig { holdout_scene: Some("delta".into()), ..config };
        assert!(matches!(load_dataset(&missing), Err(HarnessError::Data(_))));
    }
}

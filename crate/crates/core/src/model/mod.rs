//! The predictor: history encoder producing `f`, prior head `p(z|x)`,
//! posterior head `q(z|x,y)` and a deterministic decoder `g(y|x,z)` over a
//! discrete latent with `K` values.

pub mod graph;
mod params;

pub use params::{expected_shapes, ModelHyper, ModelParams, ParamVars};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array2, AutodiffError, Tape};
use crate::dataio::{Point, OBS_LEN, PRED_LEN};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("latent index {index} out of range for K = {k}")]
    LatentOutOfRange { index: usize, k: usize },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("expected {expected} parameter arrays, found {found}")]
    ParamCount { expected: usize, found: usize },
    #[error("parameter {0} has non-finite entries")]
    NonFinite(String),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("embedding has length {found}, model expects {expected}")]
    EmbeddingSize { expected: usize, found: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// A `K`-way categorical distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDistribution {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let probs = exps.into_iter().map(|e| e / total).collect();
        CategoricalDistribution { logits, probs }
    }

    pub fn uniform(k: usize) -> Self {
        Self::from_logits(vec![0.0; k])
    }

    /// Builds from probabilities; logits are their logarithms.
    pub fn from_probs(probs: &[f64]) -> Self {
        Self::from_logits(probs.iter().map(|p| p.ln()).collect())
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Log-probabilities computed from the logits.
    pub fn log_probs(&self) -> Vec<f64> {
        let max = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        self.logits.iter().map(|l| l - lse).collect()
    }

    /// Most probable index; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Indices by descending probability, ties by ascending index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        order
    }
}

/// First index of the maximum value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `dist`.
pub fn sample_z(dist: &CategoricalDistribution, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in dist.probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left the cumulative sum just below 1.
    last_positive
}

fn row_of(a: &Array2, r: usize) -> Vec<f64> {
    a.row(r).to_vec()
}

/// History embedding `f` of one normalized observation.
pub fn embed_history(params: &ModelParams, obs: &[Point; OBS_LEN]) -> Vec<f64> {
    let mut t = Tape::new();
    let p = params.bind_frozen(&mut t);
    let f = graph::encode_history(&mut t, &p, &[obs]).expect("shapes validated at construction");
    row_of(t.value(f), 0)
}

fn embedding_var(params: &ModelParams, t: &mut Tape, f: &[f64]) -> Result<crate::autodiff::Var, ModelError> {
    if f.len() != params.hyper.d_f {
        return Err(ModelError::EmbeddingSize { expected: params.hyper.d_f, found: f.len() });
    }
    Ok(t.constant(Array2::row_vector(f)))
}

pub fn prior_dist(params: &ModelParams, f: &[f64]) -> Result<CategoricalDistribution, ModelError> {
    let mut t = Tape::new();
    let p = params.bind_frozen(&mut t);
    let fv = embedding_var(params, &mut t, f)?;
    let logits = graph::prior_logits(&mut t, &p, fv)?;
    Ok(CategoricalDistribution::from_logits(row_of(t.value(logits), 0)))
}

pub fn posterior_dist(params: &ModelParams, f: &[f64], fut: &[Point; PRED_LEN]) -> Result<CategoricalDistribution, ModelError> {
    let mut t = Tape::new();
    let p = params.bind_frozen(&mut t);
    let fv = embedding_var(params, &mut t, f)?;
    let g = graph::encode_future(&mut t, &p, &[fut])?;
    let logits = graph::posterior_logits(&mut t, &p, fv, g)?;
    Ok(CategoricalDistribution::from_logits(row_of(t.value(logits), 0)))
}

/// Decoded future for latent `z`.
pub fn decode(params: &ModelParams, f: &[f64], z: usize) -> Result<[Point; PRED_LEN], ModelError> {
    if z >= params.k() {
        return Err(ModelError::LatentOutOfRange { index: z, k: params.k() });
    }
    let mut t = Tape::new();
    let p = params.bind_frozen(&mut t);
    let fv = embedding_var(params, &mut t, f)?;
    let steps = graph::decode_pairs(&mut t, &p, fv, &[(0, z)])?;
    Ok(graph::trajectories(&t, &steps)[0])
}

/// Decode at the prior's most probable latent.
pub fn most_likely_predict(params: &ModelParams, obs: &[Point; OBS_LEN]) -> [Point; PRED_LEN] {
    let f = embed_history(params, obs);
    let z = prior_dist(params, &f).expect("embedding from this model").argmax();
    decode(params, &f, z).expect("argmax in range")
}

/// Prior and all `K` decoded futures for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Enumeration {
    pub prior: CategoricalDistribution,
    pub futures: Vec<[Point; PRED_LEN]>,
}

/// Complete enumeration of the latent for a batch of observations.
pub fn enumerate_batch(params: &ModelParams, obs: &[&[Point; OBS_LEN]]) -> Vec<Enumeration> {
    if obs.is_empty() {
        return Vec::new();
    }
    let k = params.k();
    let mut t = Tape::new();
    let p = params.bind_frozen(&mut t);
    let f = graph::encode_history(&mut t, &p, obs).expect("validated shapes");
    let logits = graph::prior_logits(&mut t, &p, f).expect("validated shapes");
    let pairs = graph::all_pairs(obs.len(), k);
    let steps = graph::decode_pairs(&mut t, &p, f, &pairs).expect("validated shapes");
    let mut futures = graph::trajectories(&t, &steps).into_iter();
    (0..obs.len())
        .map(|r| Enumeration {
            prior: CategoricalDistribution::from_logits(row_of(t.value(logits), r)),
            futures: futures.by_ref().take(k).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FdConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelHyper {
        ModelHyper { k: 6, d_f: 5, d_g: 4, d_c: 3, history_hidden: 4, future_hidden: 3, decoder_hidden: 4 }
    }

    fn obs_line() -> [Point; OBS_LEN] {
        std::array::from_fn(|t| [0.4 * (t as f64 - 7.0), 0.05 * (t as f64 - 7.0)])
    }

    fn fut_curve() -> [Point; PRED_LEN] {
        std::array::from_fn(|t| [0.4 * (t + 1) as f64, 0.02 * ((t + 1) * (t + 1)) as f64])
    }

    #[test]
    fn embedding_is_deterministic_and_finite() {
        let params = ModelParams::init(&ModelHyper::default(), 1).unwrap();
        let a = embed_history(&params, &obs_line());
        assert_eq!(a, embed_history(&params, &obs_line()));
        assert_eq!(a.len(), 64);
        let zero = embed_history(&params, &[[0.0; 2]; OBS_LEN]);
        assert!(zero.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_head_gives_uniform_prior_and_posterior() {
        let mut params = ModelParams::init(&small(), 2).unwrap();
        params.prior_w = Array2::zeros(5, 6);
        params.post_w = Array2::zeros(9, 6);
        let f = embed_history(&params, &obs_line());
        let prior = prior_dist(&params, &f).unwrap();
        let post = posterior_dist(&params, &f, &fut_curve()).unwrap();
        for d in [prior, post] {
            assert!(d.probs.iter().all(|p| (p - 1.0 / 6.0).abs() < 1e-15));
            assert_eq!(d.argmax(), 0);
        }
    }

    #[test]
    fn prior_is_proper_and_argmax_matches_logits() {
        let params = ModelParams::init(&ModelHyper::default(), 3).unwrap();
        let d = prior_dist(&params, &embed_history(&params, &obs_line())).unwrap();
        assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(d.argmax(), argmax(&d.logits));
    }

    #[test]
    fn posterior_is_deterministic() {
        let params = ModelParams::init(&small(), 4).unwrap();
        let f = embed_history(&params, &obs_line());
        assert_eq!(posterior_dist(&params, &f, &fut_curve()).unwrap(), posterior_dist(&params, &f, &fut_curve()).unwrap());
    }

    #[test]
    fn decode_shape_range_and_distinctness() {
        let params = ModelParams::init(&ModelHyper::default(), 5).unwrap();
        let f = embed_history(&params, &obs_line());
        let a = decode(&params, &f, 0).unwrap();
        let b = decode(&params, &f, 1).unwrap();
        assert_eq!(a.len(), PRED_LEN);
        assert_ne!(a, b);
        assert!(matches!(decode(&params, &f, 80), Err(ModelError::LatentOutOfRange { index: 80, k: 80 })));
        assert!(matches!(decode(&params, &f[..3], 0), Err(ModelError::EmbeddingSize { .. })));
    }

    #[test]
    fn most_likely_uses_prior_argmax() {
        let mut params = ModelParams::init(&small(), 6).unwrap();
        params.prior_w = Array2::zeros(5, 6);
        let f = embed_history(&params, &obs_line());
        assert_eq!(most_likely_predict(&params, &obs_line()), decode(&params, &f, 0).unwrap());
        params.prior_b = Array2::row_vector(&[0.0, 0.0, 0.0, 3.0, 0.0, 0.0]);
        assert_eq!(most_likely_predict(&params, &obs_line()), decode(&params, &f, 3).unwrap());
    }

    #[test]
    fn enumeration_matches_single_decodes() {
        let params = ModelParams::init(&small(), 7).unwrap();
        let o = obs_line();
        let e = enumerate_batch(&params, &[&o, &o]);
        let f = embed_history(&params, &o);
        for z in 0..6 {
            let single = decode(&params, &f, z).unwrap();
            for (a, b) in single.iter().zip(&e[1].futures[z]) {
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn monotone_logit_transform_keeps_argmax() {
        let d = CategoricalDistribution::from_logits(vec![0.3, -1.0, 2.5, 2.4]);
        let t = CategoricalDistribution::from_logits(d.logits.iter().map(|l| 3.0 * l + l.powi(3) - 7.0).collect());
        assert_eq!(d.argmax(), t.argmax());
        assert_eq!(d.argmax(), 2);
    }

    #[test]
    fn one_hot_sampling_is_constant() {
        let d = CategoricalDistribution::from_probs(&[0.0, 0.0, 1.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| sample_z(&d, &mut rng) == 2));
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let k = 80;
        let d = CategoricalDistribution::uniform(k);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let mut counts = vec![0usize; k];
        for _ in 0..n {
            counts[sample_z(&d, &mut rng)] += 1;
        }
        let p = 1.0 / k as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() <= 4.0 * se);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let d = CategoricalDistribution::from_probs(&[0.1, 0.2, 0.3, 0.4]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| sample_z(&d, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    fn check_subnet(loss: impl Fn(&mut Tape, &ParamVars) -> Result<crate::autodiff::Var, AutodiffError>) {
        let params = ModelParams::init(&small(), 8).unwrap();
        let arrays: Vec<Array2> = params.tensors().into_iter().cloned().collect();
        let report = finite_diff_check(
            |t, vars| loss(t, &ParamVars::from_vars(vars)),
            &arrays,
            &FdConfig { tolerance: 1e-5, ..FdConfig::default() },
        );
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn history_encoder_gradients() {
        let o = obs_line();
        check_subnet(|t, p| {
            let f = graph::encode_history(t, p, &[&o])?;
            let s = t.square(f);
            Ok(t.sum(s))
        });
    }

    #[test]
    fn decoder_gradients() {
        let o = obs_line();
        let fut = fut_curve();
        check_subnet(|t, p| {
            let f = graph::encode_history(t, p, &[&o])?;
            let pairs = graph::all_pairs(1, 6);
            let steps = graph::decode_pairs(t, p, f, &pairs)?;
            let nll = graph::recon_nll_pairs(t, &steps, &[&fut], &pairs)?;
            Ok(t.sum(nll))
        });
    }
}

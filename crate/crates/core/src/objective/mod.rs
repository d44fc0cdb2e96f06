//! Training objective: KL consistency between posterior and prior,
//! expected reconstruction (exact enumeration or score-function), and
//! contrastive distribution discrimination, plus the baseline variants.

mod mi;
mod reinforce;
mod terms;

pub use mi::{mi_bound_check, MiBoundReport};
pub use reinforce::{
    exact_logit_grad, l2_exact_phi_grad, l2_reinforce_grad, score_function_logit_grad, Baseline, ReinforceGrad, RewardKind, ScoreEstimate,
    PHI_PARAMS,
};
pub use terms::{
    density_ratio_h, expected_under, history_code, infonce_from_similarities, kl_categorical, l2_exact, l3_contrastive, recon_nll,
    recon_nll_all, squared_error_nll,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array2, AutodiffError, Tape, Var};
use crate::dataio::{rotate, Point, TrajectorySample, OBS_LEN, PRED_LEN};
use crate::model::{graph, sample_z, CategoricalDistribution, ModelError, ModelParams, ParamVars};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("distributions have different sizes: {q} vs {p}")]
    KMismatch { q: usize, p: usize },
    #[error("contrastive term needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("joint distribution: {0}")]
    Joint(String),
    #[error("loss config: {0}")]
    Config(String),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Which terms make up the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `L1 + λ L2 + μ L3`.
    Disdis,
    /// `L1 + λ L2`.
    Cvae,
    /// `KL(q || uniform) + λ L2`; the prior is fixed.
    Vae,
    /// CVAE plus `μ KL(batch-mean posterior || uniform)`.
    Infovae,
    /// CVAE plus `μ` InfoNCE between a history and a rotated copy of it.
    ViewContrastive,
    /// `L1 + μ L3`, the reconstruction-free ablation arm.
    DisdisNoRecon,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Disdis, Variant::Cvae, Variant::Vae, Variant::Infovae, Variant::ViewContrastive, Variant::DisdisNoRecon];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Disdis => "disdis",
            Variant::Cvae => "cvae",
            Variant::Vae => "vae",
            Variant::Infovae => "infovae",
            Variant::ViewContrastive => "view_contrastive",
            Variant::DisdisNoRecon => "disdis_no_recon",
        }
    }

    /// True when the prior head is held at the uniform distribution.
    pub fn fixed_prior(self) -> bool {
        self == Variant::Vae
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| ObjectiveError::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Sum over all `K` latents.
    #[default]
    Exact,
    /// Score-function estimate for `φ`, pathwise gradient for the decoder.
    Reinforce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the reconstruction term.
    pub lambda: f64,
    /// Weight of the contrastive (or variant-specific third) term.
    pub mu: f64,
    pub temperature: f64,
    pub estimator: Estimator,
    pub variant: Variant,
    pub reinforce_samples: usize,
    pub baseline: Baseline,
    pub reward: RewardKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            mu: 0.1,
            temperature: 0.5,
            estimator: Estimator::Exact,
            variant: Variant::Disdis,
            reinforce_samples: 8,
            baseline: Baseline::BatchMean,
            reward: RewardKind::NegRecon,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(ObjectiveError::Config("lambda and mu must be finite and non-negative".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ObjectiveError::Config("temperature must be positive".into()));
        }
        if self.estimator == Estimator::Reinforce && self.reinforce_samples == 0 {
            return Err(ObjectiveError::Config("reinforce_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Term values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub l1_kl: f64,
    pub l2_recon: f64,
    pub l3_contrastive: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.l1_kl.is_finite() && self.l2_recon.is_finite() && self.l3_contrastive.is_finite() && self.total.is_finite()
    }
}

/// Handles into a loss graph. `root` is what gets differentiated; it
/// differs from the reported total only under the score-function
/// estimator, where it carries the surrogate term.
pub struct LossGraph {
    pub root: Var,
    pub report: LossReport,
}

fn batch_tracks<'a>(batch: &[&'a TrajectorySample]) -> (Vec<&'a [Point; OBS_LEN]>, Vec<&'a [Point; PRED_LEN]>) {
    (batch.iter().map(|s| &s.obs).collect(), batch.iter().map(|s| &s.fut).collect())
}

/// `Σ rows (q ⊙ (log q - log p)) / B`.
fn kl_rows(t: &mut Tape, q: Var, log_q: Var, log_p: Var, rows: usize) -> Result<Var, AutodiffError> {
    let diff = t.sub(log_q, log_p)?;
    let w = t.mul(q, diff)?;
    let s = t.sum(w);
    Ok(t.scale(s, 1.0 / rows as f64))
}

/// KL to the uniform distribution, averaged over rows: `Σ q log q / B + log K`.
fn kl_to_uniform(t: &mut Tape, q: Var, log_q: Var, rows: usize, k: usize) -> Result<Var, AutodiffError> {
    let w = t.mul(q, log_q)?;
    let s = t.sum(w);
    let s = t.scale(s, 1.0 / rows as f64);
    Ok(t.add_scalar(s, (k as f64).ln()))
}

/// InfoNCE with matched rows as positives: `-mean_i log softmax(A Pᵀ / τ)_ii`.
pub fn infonce_graph(t: &mut Tape, anchors: Var, positives: Var, temperature: f64) -> Result<Var, ObjectiveError> {
    let n = t.value(anchors).rows();
    if n < 2 {
        return Err(ObjectiveError::BatchTooSmall(n));
    }
    let pt = t.transpose(positives);
    let s = t.matmul(anchors, pt)?;
    let s = t.scale(s, 1.0 / temperature);
    let ls = t.log_softmax_rows(s);
    let eye = t.constant(Array2::identity(n));
    let diag = t.mul(ls, eye)?;
    let total = t.sum(diag);
    Ok(t.scale(total, -1.0 / n as f64))
}

/// Contrastive discrimination term on a batch: anchors `f W`, positives
/// `q E` (posterior-expected latent embeddings).
pub fn l3_graph(t: &mut Tape, p: &ParamVars, f: Var, q: Var, temperature: f64) -> Result<Var, ObjectiveError> {
    let anchors = t.matmul(f, p.contrastive_w)?;
    let positives = t.matmul(q, p.latent_embed)?;
    infonce_graph(t, anchors, positives, temperature)
}

/// Builds the loss for a batch of normalized samples on `t`.
pub fn build_loss(
    t: &mut Tape,
    p: &ParamVars,
    batch: &[&TrajectorySample],
    config: &LossConfig,
    rng: &mut impl Rng,
) -> Result<LossGraph, ObjectiveError> {
    config.validate()?;
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let b = batch.len();
    let k = t.value(p.prior_b).cols();
    let (obs, fut) = batch_tracks(batch);
    let variant = config.variant;

    let f = graph::encode_history(t, p, &obs)?;
    let g = graph::encode_future(t, p, &fut)?;
    let post_logits = graph::posterior_logits(t, p, f, g)?;
    let log_q = t.log_softmax_rows(post_logits);
    let q = t.softmax_rows(post_logits);

    let l1 = if variant.fixed_prior() {
        kl_to_uniform(t, q, log_q, b, k)?
    } else {
        let prior_logits = graph::prior_logits(t, p, f)?;
        let log_p = t.log_softmax_rows(prior_logits);
        kl_rows(t, q, log_q, log_p, b)?
    };
    let l1_value = t.value(l1).item();

    // Reconstruction: (reported value, graph contribution to the root).
    let recon = if variant == Variant::DisdisNoRecon || config.lambda == 0.0 {
        None
    } else {
        Some(match config.estimator {
            Estimator::Exact => {
                let pairs = graph::all_pairs(b, k);
                let steps = graph::decode_pairs(t, p, f, &pairs)?;
                let nll = graph::recon_nll_pairs(t, &steps, &fut, &pairs)?;
                let nll = t.reshape(nll, b, k)?;
                let w = t.mul(q, nll)?;
                let s = t.sum(w);
                let l2 = t.scale(s, 1.0 / b as f64);
                (t.value(l2).item(), l2)
            }
            Estimator::Reinforce => reinforce_term(t, p, f, q, log_q, &fut, config, rng)?,
        })
    };

    let third = if config.mu == 0.0 {
        None
    } else {
        match variant {
            Variant::Disdis | Variant::DisdisNoRecon => Some(l3_graph(t, p, f, q, config.temperature)?),
            Variant::Infovae => {
                let mean_row = t.constant(Array2::filled(1, b, 1.0 / b as f64));
                let marginal = t.matmul(mean_row, q)?;
                let log_marginal = t.log(marginal);
                Some(kl_to_uniform(t, marginal, log_marginal, 1, k)?)
            }
            Variant::ViewContrastive => {
                let rotated: Vec<TrajectorySample> = batch
                    .iter()
                    .map(|s| {
                        let step = rng.gen_range(1..24) as f64;
                        rotate(s, (15.0 * step).to_radians())
                    })
                    .collect();
                let rotated_obs: Vec<&[Point; OBS_LEN]> = rotated.iter().map(|s| &s.obs).collect();
                let f_view = graph::encode_history(t, p, &rotated_obs)?;
                let anchors = t.matmul(f, p.contrastive_w)?;
                let positives = t.matmul(f_view, p.contrastive_w)?;
                Some(infonce_graph(t, anchors, positives, config.temperature)?)
            }
            Variant::Cvae | Variant::Vae => None,
        }
    };

    let mut root = l1;
    let mut report = LossReport { l1_kl: l1_value, ..Default::default() };
    if let Some((value, var)) = recon {
        let scaled = t.scale(var, config.lambda);
        root = t.add(root, scaled)?;
        report.l2_recon = value;
    }
    if let Some(l3) = third {
        report.l3_contrastive = t.value(l3).item();
        let scaled = t.scale(l3, config.mu);
        root = t.add(root, scaled)?;
    }
    report.total = report.l1_kl + config.lambda * report.l2_recon + config.mu * report.l3_contrastive;
    Ok(LossGraph { root, report })
}

/// Score-function reconstruction: pathwise mean NLL of sampled decodes
/// (decoder and encoder gradients) plus the surrogate
/// `-(1/N) Σ (R_i - b) log q(z_i)` whose gradient is the estimator for `φ`.
#[allow(clippy::too_many_arguments)]
fn reinforce_term(
    t: &mut Tape,
    p: &ParamVars,
    f: Var,
    q: Var,
    log_q: Var,
    fut: &[&[Point; PRED_LEN]],
    config: &LossConfig,
    rng: &mut impl Rng,
) -> Result<(f64, Var), ObjectiveError> {
    let (b, k) = t.value(q).shape();
    let n = config.reinforce_samples;
    let mut pairs = Vec::with_capacity(b * n);
    for row in 0..b {
        let dist = CategoricalDistribution { logits: t.value(log_q).row(row).to_vec(), probs: t.value(q).row(row).to_vec() };
        for _ in 0..n {
            pairs.push((row, sample_z(&dist, rng)));
        }
    }
    let steps = graph::decode_pairs(t, p, f, &pairs)?;
    let nll = graph::recon_nll_pairs(t, &steps, fut, &pairs)?;
    let nll_values = t.value(nll).data().to_vec();

    let rewards: Vec<f64> = match config.reward {
        RewardKind::NegRecon => nll_values.iter().map(|v| -v).collect(),
        RewardKind::NegKl => {
            // Per-sample KL, repeated for each of its draws.
            let (lq, qv) = (t.value(log_q).clone(), t.value(q).clone());
            let prior_logits = graph::prior_logits(t, p, f)?;
            let lp = t.value(prior_logits).clone();
            let mut kl = Vec::with_capacity(b);
            for row in 0..b {
                let prior = CategoricalDistribution::from_logits(lp.row(row).to_vec());
                let post = CategoricalDistribution { logits: lq.row(row).to_vec(), probs: qv.row(row).to_vec() };
                kl.push(kl_categorical(&post, &prior)?);
            }
            pairs.iter().map(|&(row, _)| -kl[row]).collect()
        }
    };
    let baseline = match config.baseline {
        Baseline::None => 0.0,
        Baseline::BatchMean => rewards.iter().sum::<f64>() / rewards.len() as f64,
    };
    let mut coeff = Array2::zeros(b, k);
    for (&(row, z), r) in pairs.iter().zip(&rewards) {
        let c = coeff.get(row, z) - (r - baseline) / (n * b) as f64;
        coeff.set(row, z, c);
    }
    let coeff = t.constant(coeff);
    let surrogate = t.mul(coeff, log_q)?;
    let surrogate = t.sum(surrogate);
    let path = t.mean(nll);
    let value = t.value(path).item();
    Ok((value, t.add(path, surrogate)?))
}

/// Loss report and gradients for every parameter array, in
/// [`ModelParams::NAMES`] order.
pub fn total_loss(
    batch: &[&TrajectorySample],
    params: &ModelParams,
    config: &LossConfig,
    rng: &mut impl Rng,
) -> Result<(LossReport, Vec<Array2>), ObjectiveError> {
    let mut t = Tape::new();
    let p = params.bind(&mut t);
    let lg = build_loss(&mut t, &p, batch, config, rng)?;
    let grads = t.backward(lg.root)?;
    let out = p.vars().into_iter().zip(params.tensors()).map(|(v, arr)| grads.wrt_or_zeros(v, arr)).collect();
    Ok((lg.report, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FdConfig};
    use crate::dataio::{default_personas, normalize, synth_generate, SynthSpec};
    use crate::model::ModelHyper;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelHyper {
        ModelHyper { k: 5, d_f: 6, d_g: 4, d_c: 3, history_hidden: 5, future_hidden: 4, decoder_hidden: 5 }
    }

    fn batch(n: usize) -> Vec<TrajectorySample> {
        let data = synth_generate(&SynthSpec::new(default_personas(), n.div_ceil(4)), 3).unwrap();
        data.iter().take(n).map(normalize).collect()
    }

    fn loss_for(params: &ModelParams, data: &[TrajectorySample], config: &LossConfig) -> (LossReport, Vec<Array2>) {
        let refs: Vec<&TrajectorySample> = data.iter().collect();
        total_loss(&refs, params, config, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("gan".parse::<Variant>(), Err(ObjectiveError::UnknownVariant(_))));
    }

    #[test]
    fn disdis_with_zero_mu_is_cvae() {
        let params = ModelParams::init(&tiny(), 1).unwrap();
        let data = batch(6);
        let disdis = LossConfig { mu: 0.0, ..LossConfig::default() };
        let cvae = LossConfig { variant: Variant::Cvae, ..LossConfig::default() };
        assert_eq!(loss_for(&params, &data, &disdis), loss_for(&params, &data, &cvae));
    }

    #[test]
    fn cvae_with_uniform_prior_head_is_vae() {
        let mut params = ModelParams::init(&tiny(), 2).unwrap();
        params.prior_w = Array2::zeros(6, 5);
        params.prior_b = Array2::zeros(1, 5);
        let data = batch(6);
        let (cvae, _) = loss_for(&params, &data, &LossConfig { variant: Variant::Cvae, ..LossConfig::default() });
        let (vae, _) = loss_for(&params, &data, &LossConfig { variant: Variant::Vae, ..LossConfig::default() });
        assert!((cvae.total - vae.total).abs() < 1e-12);
        assert!((cvae.l1_kl - vae.l1_kl).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_leaves_decoder_untouched() {
        let params = ModelParams::init(&tiny(), 3).unwrap();
        let data = batch(6);
        let idx = ModelParams::NAMES.iter().position(|n| *n == "dec_wh").unwrap();
        for mu in [0.1, 0.7] {
            let (_, grads) = loss_for(&params, &data, &LossConfig { lambda: 0.0, mu, ..LossConfig::default() });
            assert!(grads[idx].data().iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn report_matches_composition_and_values() {
        let params = ModelParams::init(&tiny(), 4).unwrap();
        let data = batch(8);
        let config = LossConfig { lambda: 0.7, mu: 0.3, ..LossConfig::default() };
        let (r, _) = loss_for(&params, &data, &config);
        assert!((r.total - (r.l1_kl + 0.7 * r.l2_recon + 0.3 * r.l3_contrastive)).abs() < 1e-12);
        assert!(r.l1_kl >= -1e-12);

        // Cross-check against the value-level forms.
        let mut kl = 0.0;
        let mut l2 = 0.0;
        let mut fs = Vec::new();
        let mut qs = Vec::new();
        for s in &data {
            let f = crate::model::embed_history(&params, &s.obs);
            let q = crate::model::posterior_dist(&params, &f, &s.fut).unwrap();
            let prior = crate::model::prior_dist(&params, &f).unwrap();
            kl += kl_categorical(&q, &prior).unwrap();
            l2 += l2_exact(&params, &f, &s.fut, &q).unwrap();
            fs.push(f);
            qs.push(q);
        }
        let n = data.len() as f64;
        assert!((r.l1_kl - kl / n).abs() < 1e-10);
        assert!((r.l2_recon - l2 / n).abs() < 1e-10);
        let l3 = l3_contrastive(&fs, &qs, &params, config.temperature).unwrap();
        assert!((r.l3_contrastive - l3).abs() < 1e-10);
    }

    #[test]
    fn every_variant_has_gradients() {
        let params = ModelParams::init(&tiny(), 5).unwrap();
        let data = batch(6);
        for variant in Variant::ALL {
            for estimator in [Estimator::Exact, Estimator::Reinforce] {
                let config = LossConfig { variant, estimator, ..LossConfig::default() };
                let (r, grads) = loss_for(&params, &data, &config);
                assert!(r.is_finite(), "{variant} {estimator:?}");
                assert!(grads.iter().any(|g| g.data().iter().any(|v| *v != 0.0)));
            }
        }
    }

    #[test]
    fn vae_never_touches_prior_head() {
        let params = ModelParams::init(&tiny(), 6).unwrap();
        let (_, grads) = loss_for(&params, &batch(6), &LossConfig { variant: Variant::Vae, ..LossConfig::default() });
        let idx = ModelParams::NAMES.iter().position(|n| *n == "prior_w").unwrap();
        assert!(grads[idx].data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn rejects_bad_configs_and_batches() {
        let params = ModelParams::init(&tiny(), 7).unwrap();
        let data = batch(4);
        let refs: Vec<&TrajectorySample> = data.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = LossConfig { temperature: 0.0, ..LossConfig::default() };
        assert!(total_loss(&refs, &params, &bad, &mut rng).is_err());
        assert!(matches!(total_loss(&[], &params, &LossConfig::default(), &mut rng), Err(ObjectiveError::EmptyBatch)));
        assert!(matches!(total_loss(&refs[..1], &params, &LossConfig::default(), &mut rng), Err(ObjectiveError::BatchTooSmall(1))));
    }

    #[test]
    fn full_objective_gradcheck_tiny() {
        let params = ModelParams::init(&tiny(), 8).unwrap();
        let data = batch(4);
        let refs: Vec<&TrajectorySample> = data.iter().collect();
        let arrays: Vec<Array2> = params.tensors().into_iter().cloned().collect();
        let config = LossConfig::default();
        let report = finite_diff_check(
            |t, vars| {
                let p = ParamVars::from_vars(vars);
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                build_loss(t, &p, &refs, &config, &mut rng).map(|g| g.root).map_err(|e| match e {
                    ObjectiveError::Autodiff(a) => a,
                    other => panic!("{other}"),
                })
            },
            &arrays,
            &FdConfig { tolerance: 1e-5, ..FdConfig::default() },
        );
        assert!(report.pass, "{report:?}");
    }
}

//! Score-function (REINFORCE) gradients for the reconstruction term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array2, Tape};
use crate::dataio::{Point, OBS_LEN, PRED_LEN};
use crate::model::{graph, sample_z, CategoricalDistribution, ModelParams, ParamVars};

use super::terms::squared_error_nll;
use super::ObjectiveError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Subtract the mean reward of all draws in the batch.
    BatchMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Negative reconstruction loss of the sampled decode.
    #[default]
    NegRecon,
    /// Negative KL between posterior and prior (constant across draws).
    NegKl,
}

/// Monte-Carlo mean and standard error per component.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub draws: usize,
    /// Sample covariance of the per-draw vectors.
    pub covariance: Vec<Vec<f64>>,
}

fn summarize(per_draw: &[Vec<f64>]) -> ScoreEstimate {
    let n = per_draw.len();
    let k = per_draw.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; k];
    for v in per_draw {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; k]; k];
    for v in per_draw {
        for a in 0..k {
            let da = v[a] - mean[a];
            for b in 0..k {
                cov[a][b] += da * (v[b] - mean[b]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    cov.iter_mut().flatten().for_each(|c| *c /= denom);
    let stderr = (0..k).map(|a| (cov[a][a] / n as f64).sqrt()).collect();
    ScoreEstimate { mean, stderr, draws: n, covariance: cov }
}

fn baseline_value(baseline: Baseline, rewards: &[f64]) -> f64 {
    match baseline {
        Baseline::None => 0.0,
        Baseline::BatchMean => rewards.iter().sum::<f64>() / rewards.len() as f64,
    }
}

/// Per-draw estimates of `∇_logits E_q[R] = E[R (e_z - q)]` for draws
/// `z ~ q` with reward `rewards[z]`.
fn per_draw_logit_grads(q: &CategoricalDistribution, rewards: &[f64], n: usize, baseline: Baseline, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let draws: Vec<usize> = (0..n).map(|_| sample_z(q, rng)).collect();
    let drawn_rewards: Vec<f64> = draws.iter().map(|&z| rewards[z]).collect();
    let b = baseline_value(baseline, &drawn_rewards);
    draws
        .iter()
        .zip(&drawn_rewards)
        .map(|(&z, &r)| {
            let mut g: Vec<f64> = q.probs.iter().map(|p| -(r - b) * p).collect();
            g[z] += r - b;
            g
        })
        .collect()
}

/// Score-function estimate of the logit gradient of `E_q[R]`.
pub fn score_function_logit_grad(
    q: &CategoricalDistribution,
    rewards: &[f64],
    n: usize,
    baseline: Baseline,
    rng: &mut impl Rng,
) -> Result<ScoreEstimate, ObjectiveError> {
    if n == 0 {
        return Err(ObjectiveError::Config("reinforce_samples must be at least 1".into()));
    }
    if rewards.len() != q.k() {
        return Err(ObjectiveError::KMismatch { q: q.k(), p: rewards.len() });
    }
    Ok(summarize(&per_draw_logit_grads(q, rewards, n, baseline, rng)))
}

/// Exact `∇_logits E_q[R] = q ⊙ (R - E_q R)`.
pub fn exact_logit_grad(q: &CategoricalDistribution, rewards: &[f64]) -> Vec<f64> {
    let mean: f64 = q.probs.iter().zip(rewards).map(|(p, r)| p * r).sum();
    q.probs.iter().zip(rewards).map(|(p, r)| p * (r - mean)).collect()
}

/// Names of the posterior-side parameters (`φ`): future encoder and head.
pub const PHI_PARAMS: &[&str] = &["fut_wx", "fut_wh", "fut_bx", "fut_bh", "fut_out_w", "fut_out_b", "post_w", "post_b"];

fn phi_vars(p: &ParamVars) -> Vec<crate::autodiff::Var> {
    vec![p.fut_wx, p.fut_wh, p.fut_bx, p.fut_bh, p.fut_out_w, p.fut_out_b, p.post_w, p.post_b]
}

/// REINFORCE estimate of `∇_φ L2` for one sample, with per-component
/// standard errors.
#[derive(Clone, Debug)]
pub struct ReinforceGrad {
    /// Flattened `φ` gradient in [`PHI_PARAMS`] order.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub logit: ScoreEstimate,
    pub posterior: CategoricalDistribution,
}

struct PosteriorGraph {
    tape: Tape,
    phi: Vec<crate::autodiff::Var>,
    logits: crate::autodiff::Var,
}

fn posterior_graph(params: &ModelParams, obs: &[Point; OBS_LEN], fut: &[Point; PRED_LEN]) -> Result<PosteriorGraph, ObjectiveError> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let f = graph::encode_history(&mut tape, &p, &[obs])?;
    let g = graph::encode_future(&mut tape, &p, &[fut])?;
    let logits = graph::posterior_logits(&mut tape, &p, f, g)?;
    Ok(PosteriorGraph { tape, phi: phi_vars(&p), logits })
}

fn flatten(tape_grads: &crate::autodiff::Gradients, vars: &[crate::autodiff::Var], tape: &Tape) -> Vec<f64> {
    vars.iter().flat_map(|&v| tape_grads.wrt_or_zeros(v, tape.value(v)).into_vec()).collect()
}

/// Per-latent rewards for one sample.
fn rewards_for(
    params: &ModelParams,
    obs: &[Point; OBS_LEN],
    fut: &[Point; PRED_LEN],
    kind: RewardKind,
) -> Result<(Vec<f64>, CategoricalDistribution), ObjectiveError> {
    let f = crate::model::embed_history(params, obs);
    let q = crate::model::posterior_dist(params, &f, fut)?;
    let rewards = match kind {
        RewardKind::NegRecon => {
            crate::model::enumerate_batch(params, &[obs])[0].futures.iter().map(|y| -squared_error_nll(y, fut)).collect()
        }
        RewardKind::NegKl => {
            let prior = crate::model::prior_dist(params, &f)?;
            let kl = super::terms::kl_categorical(&q, &prior)?;
            vec![-kl; params.k()]
        }
    };
    Ok((rewards, q))
}

/// Score-function estimate of `∇_φ` of the expected reconstruction loss
/// for one normalized sample: `-(1/N) Σ_i ∇_φ log q(z_i) (R_i - b)`.
pub fn l2_reinforce_grad(
    params: &ModelParams,
    obs: &[Point; OBS_LEN],
    fut: &[Point; PRED_LEN],
    n_samples: usize,
    baseline: Baseline,
    reward: RewardKind,
    rng: &mut impl Rng,
) -> Result<ReinforceGrad, ObjectiveError> {
    if n_samples == 0 {
        return Err(ObjectiveError::Config("reinforce_samples must be at least 1".into()));
    }
    let (rewards, q) = rewards_for(params, obs, fut, reward)?;
    // Minimizing L2 = -E[R]: the per-draw descent direction is minus the
    // ascent estimate of E[R].
    let per_draw: Vec<Vec<f64>> =
        per_draw_logit_grads(&q, &rewards, n_samples, baseline, rng).into_iter().map(|g| g.into_iter().map(|v| -v).collect()).collect();
    let logit = summarize(&per_draw);

    // Logit Jacobian rows J_k = ∂ logit_k / ∂φ; every per-draw φ gradient
    // is Σ_k g_k J_k.
    let pg = posterior_graph(params, obs, fut)?;
    let k = params.k();
    let mut jac = Vec::with_capacity(k);
    for row in 0..k {
        let mut seed = Array2::zeros(1, k);
        seed.set(0, row, 1.0);
        let grads = pg.tape.backward_seeded(pg.logits, seed)?;
        jac.push(flatten(&grads, &pg.phi, &pg.tape));
    }
    let dim = jac[0].len();
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for a in 0..k {
        for (m, j) in mean.iter_mut().zip(&jac[a]) {
            *m += logit.mean[a] * j;
        }
        for b in 0..k {
            let c = logit.covariance[a][b];
            if c != 0.0 {
                for ((v, ja), jb) in var.iter_mut().zip(&jac[a]).zip(&jac[b]) {
                    *v += ja * c * jb;
                }
            }
        }
    }
    let stderr = var.iter().map(|v| (v.max(0.0) / n_samples as f64).sqrt()).collect();
    Ok(ReinforceGrad { mean, stderr, logit, posterior: q })
}

/// Exact `∇_φ Σ_k q(k) nll_k`, through the tape.
pub fn l2_exact_phi_grad(params: &ModelParams, obs: &[Point; OBS_LEN], fut: &[Point; PRED_LEN]) -> Result<Vec<f64>, ObjectiveError> {
    let (rewards, _) = rewards_for(params, obs, fut, RewardKind::NegRecon)?;
    let nll = Array2::row_vector(&rewards.iter().map(|r| -r).collect::<Vec<_>>());
    let mut pg = posterior_graph(params, obs, fut)?;
    let t = &mut pg.tape;
    let q = t.softmax_rows(pg.logits);
    let nll = t.constant(nll);
    let weighted = t.mul(q, nll)?;
    let root = t.sum(weighted);
    let grads = t.backward(root)?;
    Ok(flatten(&grads, &pg.phi, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_reward_has_zero_mean_gradient() {
        let q = CategoricalDistribution::from_probs(&[0.2, 0.3, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = score_function_logit_grad(&q, &[2.0, 2.0, 2.0], 50_000, Baseline::None, &mut rng).unwrap();
        for (m, se) in est.mean.iter().zip(&est.stderr) {
            assert!(m.abs() <= 4.0 * se, "{m} vs {se}");
        }
        let with_baseline = score_function_logit_grad(&q, &[2.0, 2.0, 2.0], 100, Baseline::BatchMean, &mut rng).unwrap();
        assert!(with_baseline.mean.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn two_way_closed_form() {
        let q = CategoricalDistribution::from_probs(&[0.5, 0.5]);
        let exact = exact_logit_grad(&q, &[1.0, 0.0]);
        assert!((exact[0] - 0.25).abs() < 1e-12 && (exact[1] + 0.25).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est = score_function_logit_grad(&q, &[1.0, 0.0], 200_000, Baseline::None, &mut rng).unwrap();
        for ((m, e), se) in est.mean.iter().zip(&exact).zip(&est.stderr) {
            assert!((m - e).abs() <= 3.0 * se, "{est:?}");
        }
    }

    #[test]
    fn rejects_zero_samples() {
        let q = CategoricalDistribution::uniform(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(score_function_logit_grad(&q, &[0.0, 1.0], 0, Baseline::None, &mut rng).is_err());
    }
}

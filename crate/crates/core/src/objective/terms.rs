//! Value-level forms of the loss terms, used for inspection and as
//! closed-form references for the batched graphs.

use crate::autodiff::Array2;
use crate::dataio::{Point, PRED_LEN};
use crate::model::{decode, CategoricalDistribution, ModelParams};

use super::ObjectiveError;

/// `Σ_k q_k (log q_k - log p_k)`, evaluated in log space from the logits.
pub fn kl_categorical(q: &CategoricalDistribution, p: &CategoricalDistribution) -> Result<f64, ObjectiveError> {
    if q.k() != p.k() {
        return Err(ObjectiveError::KMismatch { q: q.k(), p: p.k() });
    }
    let (lq, lp) = (q.log_probs(), p.log_probs());
    Ok(lq.iter().zip(&lp).map(|(a, b)| a.exp() * (a - b)).sum())
}

/// `0.5 Σ_t ||fut_t - pred_t||²`: negative log-likelihood of a
/// unit-variance isotropic Gaussian around each predicted position, with
/// constants dropped.
pub fn squared_error_nll(pred: &[Point; PRED_LEN], fut: &[Point; PRED_LEN]) -> f64 {
    0.5 * pred.iter().zip(fut).map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sum::<f64>()
}

pub fn recon_nll(params: &ModelParams, f: &[f64], fut: &[Point; PRED_LEN], z: usize) -> Result<f64, ObjectiveError> {
    Ok(squared_error_nll(&decode(params, f, z)?, fut))
}

/// Per-latent reconstruction losses for all `K` latents.
pub fn recon_nll_all(params: &ModelParams, f: &[f64], fut: &[Point; PRED_LEN]) -> Result<Vec<f64>, ObjectiveError> {
    (0..params.k()).map(|z| recon_nll(params, f, fut, z)).collect()
}

/// `Σ_k q_k nll_k`.
pub fn expected_under(q: &CategoricalDistribution, per_latent: &[f64]) -> f64 {
    q.probs.iter().zip(per_latent).map(|(p, v)| p * v).sum()
}

/// Exact expectation of the reconstruction loss over the discrete latent.
pub fn l2_exact(params: &ModelParams, f: &[f64], fut: &[Point; PRED_LEN], q: &CategoricalDistribution) -> Result<f64, ObjectiveError> {
    if q.k() != params.k() {
        return Err(ObjectiveError::KMismatch { q: q.k(), p: params.k() });
    }
    Ok(expected_under(q, &recon_nll_all(params, f, fut)?))
}

/// Pattern code of the history, `Wᵀ f`.
pub fn history_code(f: &[f64], w: &Array2) -> Result<Vec<f64>, ObjectiveError> {
    if w.rows() != f.len() {
        return Err(ObjectiveError::Shape(format!("W is {}x{}, f has length {}", w.rows(), w.cols(), f.len())));
    }
    Ok(Array2::row_vector(f).matmul(w)?.into_vec())
}

/// Energy-based density ratio `h = exp(z_code · Wᵀ f / temperature)`.
pub fn density_ratio_h(z_code: &[f64], f: &[f64], w: &Array2, temperature: f64) -> Result<f64, ObjectiveError> {
    let code = history_code(f, w)?;
    if code.len() != z_code.len() {
        return Err(ObjectiveError::Shape(format!("z code has length {}, Wᵀf has {}", z_code.len(), code.len())));
    }
    let dot: f64 = code.iter().zip(z_code).map(|(a, b)| a * b).sum();
    Ok((dot / temperature).exp())
}

/// Mean over rows of `-log softmax(s_i)_i` for a square similarity matrix.
pub fn infonce_from_similarities(s: &Array2) -> Result<f64, ObjectiveError> {
    if s.rows() != s.cols() {
        return Err(ObjectiveError::Shape(format!("similarity matrix is {}x{}", s.rows(), s.cols())));
    }
    if s.rows() < 2 {
        return Err(ObjectiveError::BatchTooSmall(s.rows()));
    }
    let mut total = 0.0;
    for i in 0..s.rows() {
        let row = s.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    Ok(total / s.rows() as f64)
}

/// Contrastive discrimination loss: anchor `i` is `Wᵀ f_i`, its positive
/// is the posterior-expected latent embedding `Σ_k q_i(k) e_k` of the same
/// sample, and the other samples' positives are its negatives.
pub fn l3_contrastive(
    embeddings: &[Vec<f64>],
    posteriors: &[CategoricalDistribution],
    params: &ModelParams,
    temperature: f64,
) -> Result<f64, ObjectiveError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(ObjectiveError::BatchTooSmall(n));
    }
    if posteriors.len() != n {
        return Err(ObjectiveError::Shape(format!("{n} embeddings but {} posteriors", posteriors.len())));
    }
    let anchors: Vec<Vec<f64>> = embeddings.iter().map(|f| history_code(f, &params.contrastive_w)).collect::<Result<_, _>>()?;
    let positives: Vec<Vec<f64>> = posteriors
        .iter()
        .map(|q| Array2::row_vector(&q.probs).matmul(&params.latent_embed).map(Array2::into_vec))
        .collect::<Result<_, _>>()?;
    let mut s = Array2::zeros(n, n);
    for (i, anchor) in anchors.iter().enumerate() {
        for (j, positive) in positives.iter().enumerate() {
            let dot: f64 = anchor.iter().zip(positive).map(|(a, b)| a * b).sum();
            s.set(i, j, dot / temperature);
        }
    }
    infonce_from_similarities(&s)
}

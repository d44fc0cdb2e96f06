//! Probability cumulative minimum distance.

use std::fmt::Write as _;

use super::MetricsError;

/// Per-rank mean minimum ADE and FDE; index `m - 1` holds rank `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct PcmdCurve {
    pub ade: Vec<f64>,
    pub fde: Vec<f64>,
}

impl PcmdCurve {
    /// `M`, the number of ranks.
    pub fn len(&self) -> usize {
        self.ade.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ade.is_empty()
    }

    pub fn m_values(&self) -> Vec<usize> {
        (1..=self.len()).collect()
    }

    /// Elementwise mean of equally long curves, summed in order.
    pub fn mean(curves: &[PcmdCurve]) -> PcmdCurve {
        let m = curves[0].len();
        let n = curves.len() as f64;
        let mut ade = vec![0.0; m];
        let mut fde = vec![0.0; m];
        for c in curves {
            for i in 0..m {
                ade[i] += c.ade[i];
                fde[i] += c.fde[i];
            }
        }
        ade.iter_mut().chain(fde.iter_mut()).for_each(|v| *v /= n);
        PcmdCurve { ade, fde }
    }

    pub fn truncated(&self, m: usize) -> PcmdCurve {
        PcmdCurve { ade: self.ade[..m].to_vec(), fde: self.fde[..m].to_vec() }
    }

    pub fn is_monotone(&self) -> bool {
        self.ade.windows(2).all(|w| w[1] <= w[0]) && self.fde.windows(2).all(|w| w[1] <= w[0])
    }

    /// CSV with header `m,k,ade,fde`, where `k = m / M`.
    pub fn to_csv(&self) -> String {
        let total = self.len() as f64;
        let mut s = String::from("m,k,ade,fde\n");
        for (i, (a, f)) in self.ade.iter().zip(&self.fde).enumerate() {
            let m = i + 1;
            let _ = writeln!(s, "{m},{},{a},{f}", m as f64 / total);
        }
        s
    }
}

pub fn cumulative_min(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut best = f64::INFINITY;
    values
        .into_iter()
        .map(|v| {
            best = best.min(v);
            best
        })
        .collect()
}

/// Latent indices by descending probability, lowest index first on ties.
pub(crate) fn rank_by_prob(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// Sort latents by probability and take cumulative minima over the first `m`.
pub fn pcmd_sorted(probs: &[f64], ade: &[f64], fde: &[f64], m: usize) -> Result<PcmdCurve, MetricsError> {
    let k = probs.len();
    if ade.len() != k || fde.len() != k {
        return Err(MetricsError::Lengths("probabilities", "per-latent errors"));
    }
    if m == 0 {
        return Err(MetricsError::EmptyM(m));
    }
    if m > k {
        return Err(MetricsError::MTooLarge { m, k });
    }
    let order = &rank_by_prob(probs)[..m];
    Ok(PcmdCurve { ade: cumulative_min(order.iter().map(|&z| ade[z])), fde: cumulative_min(order.iter().map(|&z| fde[z])) })
}

/// Threshold form: for every achievable `τ`, the minimum error over
/// `{z : p(z) ≥ τ}`, paired with the size of that set. Thresholds are
/// visited from the largest probability down.
pub fn pcmd_brute_force(probs: &[f64], errors: &[f64]) -> Vec<(usize, f64)> {
    let mut taus = probs.to_vec();
    taus.sort_by(|a, b| b.total_cmp(a));
    taus.dedup();
    taus.into_iter()
        .map(|tau| {
            let members: Vec<usize> = (0..probs.len()).filter(|&z| probs[z] >= tau).collect();
            let best = members.iter().map(|&z| errors[z]).fold(f64::INFINITY, f64::min);
            (members.len(), best)
        })
        .collect()
}

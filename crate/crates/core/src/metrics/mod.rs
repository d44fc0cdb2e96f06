//! Displacement errors, most-likely and best-of-N evaluation, the PCMD
//! curve over the discrete latent, and latent diagnostics.

mod pcmd;

pub use pcmd::{cumulative_min, pcmd_brute_force, pcmd_sorted, PcmdCurve};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::dataio::{Point, TrajectorySample, OBS_LEN};
use crate::model::{enumerate_batch, sample_z, Enumeration, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction has {pred} steps, ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("need at least one latent, got M = {0}")]
    EmptyM(usize),
    #[error("exact enumeration needs M <= K, got M = {m} with K = {k}")]
    MTooLarge { m: usize, k: usize },
    #[error("sample {index} has no pattern label")]
    MissingLabels { index: usize },
    #[error("{0} and {1} must have equal lengths")]
    Lengths(&'static str, &'static str),
    #[error("no samples to evaluate")]
    Empty,
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn check_lengths(pred: &[Point], gt: &[Point]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    Ok(())
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean displacement over all predicted steps.
pub fn ade(pred: &[Point], gt: &[Point]) -> Result<f64, MetricsError> {
    check_lengths(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64)
}

/// Euclidean displacement at the final step.
pub fn fde(pred: &[Point], gt: &[Point]) -> Result<f64, MetricsError> {
    check_lengths(pred, gt)?;
    Ok(dist(pred[pred.len() - 1], gt[gt.len() - 1]))
}

/// Per-latent errors of one sample under complete enumeration.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentErrors {
    pub probs: Vec<f64>,
    pub ade: Vec<f64>,
    pub fde: Vec<f64>,
}

impl LatentErrors {
    pub fn from_enumeration(e: &Enumeration, gt: &[Point]) -> Result<Self, MetricsError> {
        let ade = e.futures.iter().map(|y| ade(y, gt)).collect::<Result<_, _>>()?;
        let fde = e.futures.iter().map(|y| fde(y, gt)).collect::<Result<_, _>>()?;
        Ok(LatentErrors { probs: e.prior.probs.clone(), ade, fde })
    }

    /// Index of the most probable latent (lowest index on ties).
    pub fn most_likely(&self) -> usize {
        pcmd::rank_by_prob(&self.probs)[0]
    }
}

const ENUM_CHUNK: usize = 64;

/// Enumerates every latent for each normalized sample, in chunks.
pub fn latent_errors(params: &ModelParams, samples: &[TrajectorySample]) -> Result<Vec<LatentErrors>, MetricsError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(ENUM_CHUNK) {
        let obs: Vec<&[Point; OBS_LEN]> = chunk.iter().map(|s| &s.obs).collect();
        for (e, s) in enumerate_batch(params, &obs).iter().zip(chunk) {
            out.push(LatentErrors::from_enumeration(e, &s.fut)?);
        }
    }
    Ok(out)
}

/// Exact-mode PCMD for one sample: the `M` most probable latents.
pub fn pcmd(params: &ModelParams, sample: &TrajectorySample, m: usize) -> Result<PcmdCurve, MetricsError> {
    let errors = latent_errors(params, std::slice::from_ref(sample))?;
    pcmd_dataset(&errors, m)
}

/// Dataset PCMD: unweighted mean over samples at each rank.
pub fn pcmd_dataset(errors: &[LatentErrors], m: usize) -> Result<PcmdCurve, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::Empty);
    }
    let curves = errors.iter().map(|e| pcmd_sorted(&e.probs, &e.ade, &e.fde, m)).collect::<Result<Vec<_>, _>>()?;
    Ok(PcmdCurve::mean(&curves))
}

/// Sampled-mode PCMD: draw `m` latents from the prior, order the draws by
/// prior probability (draw order on ties), and take cumulative minima.
pub fn pcmd_sampled(errors: &LatentErrors, m: usize, rng: &mut impl Rng) -> Result<PcmdCurve, MetricsError> {
    if m == 0 {
        return Err(MetricsError::EmptyM(m));
    }
    let prior = crate::model::CategoricalDistribution::from_probs(&errors.probs);
    let mut draws: Vec<usize> = (0..m).map(|_| sample_z(&prior, rng)).collect();
    draws.sort_by(|a, b| errors.probs[*b].total_cmp(&errors.probs[*a]));
    let ade = cumulative_min(draws.iter().map(|&z| errors.ade[z]));
    let fde = cumulative_min(draws.iter().map(|&z| errors.fde[z]));
    Ok(PcmdCurve { ade, fde })
}

/// How best-of-N picks its candidates.
pub enum BestOfN<'a, R: Rng> {
    /// The `n` most probable latents; equals PCMD at `m = n`.
    ExactRank,
    /// `n` independent draws from the prior.
    Sampled(&'a mut R),
}

/// Minimum ADE and FDE among `n` candidate latents of one sample.
pub fn best_of_n<R: Rng>(errors: &LatentErrors, n: usize, mode: BestOfN<'_, R>) -> Result<(f64, f64), MetricsError> {
    if n == 0 {
        return Err(MetricsError::EmptyM(n));
    }
    let curve = match mode {
        BestOfN::ExactRank => pcmd_sorted(&errors.probs, &errors.ade, &errors.fde, n)?,
        BestOfN::Sampled(rng) => pcmd_sampled(errors, n, rng)?,
    };
    Ok((curve.ade[n - 1], curve.fde[n - 1]))
}

/// Fraction of samples whose label equals the majority label of their
/// latent index. Majority ties go to the smallest label.
pub fn pattern_purity(latent: &[usize], labels: &[Option<u32>]) -> Result<f64, MetricsError> {
    if latent.len() != labels.len() {
        return Err(MetricsError::Lengths("latent indices", "labels"));
    }
    if latent.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut counts: BTreeMap<usize, BTreeMap<u32, usize>> = BTreeMap::new();
    for (index, (&z, label)) in latent.iter().zip(labels).enumerate() {
        let label = label.ok_or(MetricsError::MissingLabels { index })?;
        *counts.entry(z).or_default().entry(label).or_default() += 1;
    }
    let matched: usize = counts.values().map(|c| c.values().copied().max().unwrap_or(0)).sum();
    Ok(matched as f64 / latent.len() as f64)
}

/// Summary of one evaluation run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub most_likely_ade: f64,
    pub most_likely_fde: f64,
    pub best_of_n: usize,
    pub best_of_n_ade: f64,
    pub best_of_n_fde: f64,
    pub pcmd: PcmdCurve,
    pub n_samples: usize,
}

impl MetricReport {
    /// Most-likely from rank 1 of the exact curve, best-of-N from rank `n`.
    pub fn from_errors(errors: &[LatentErrors], m: usize, n: usize) -> Result<Self, MetricsError> {
        if n == 0 {
            return Err(MetricsError::EmptyM(n));
        }
        let pcmd = pcmd_dataset(errors, m.max(n))?;
        let pcmd_m = pcmd.truncated(m);
        Ok(MetricReport {
            most_likely_ade: pcmd.ade[0],
            most_likely_fde: pcmd.fde[0],
            best_of_n: n,
            best_of_n_ade: pcmd.ade[n - 1],
            best_of_n_fde: pcmd.fde[n - 1],
            pcmd: pcmd_m,
            n_samples: errors.len(),
        })
    }

    /// One `name=value` pair per line.
    pub fn to_text(&self) -> String {
        let m = self.pcmd.len();
        let mut s = String::new();
        let _ = writeln!(s, "n_samples={}", self.n_samples);
        let _ = writeln!(s, "most_likely_ade={}", self.most_likely_ade);
        let _ = writeln!(s, "most_likely_fde={}", self.most_likely_fde);
        let _ = writeln!(s, "best_of_n={}", self.best_of_n);
        let _ = writeln!(s, "best_of_n_ade={}", self.best_of_n_ade);
        let _ = writeln!(s, "best_of_n_fde={}", self.best_of_n_fde);
        let _ = writeln!(s, "pcmd_m={m}");
        let _ = writeln!(s, "pcmd_ade_at_m={}", self.pcmd.ade[m - 1]);
        let _ = writeln!(s, "pcmd_fde_at_m={}", self.pcmd.fde[m - 1]);
        s
    }
}

/// Evaluates normalized samples with exact enumeration.
pub fn evaluate(params: &ModelParams, samples: &[TrajectorySample], m: usize, n: usize) -> Result<MetricReport, MetricsError> {
    if m > params.k() {
        return Err(MetricsError::MTooLarge { m, k: params.k() });
    }
    MetricReport::from_errors(&latent_errors(params, samples)?, m, n.min(params.k()))
}

/// Most probable prior latent per sample.
pub fn prior_argmax(params: &ModelParams, samples: &[TrajectorySample]) -> Vec<usize> {
    prior_probs(params, samples).iter().map(|p| pcmd::rank_by_prob(p)[0]).collect()
}

fn prior_probs(params: &ModelParams, samples: &[TrajectorySample]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let f = crate::model::embed_history(params, &s.obs);
            crate::model::prior_dist(params, &f).expect("embedding from this model").probs
        })
        .collect()
}

fn write_file(path: &Path, text: &str) -> Result<(), MetricsError> {
    std::fs::write(path, text).map_err(|source| MetricsError::Io { path: path.to_path_buf(), source })
}

/// Prior probabilities per sample as CSV, for external visualization.
pub fn dump_latents(params: &ModelParams, samples: &[TrajectorySample], path: impl AsRef<Path>) -> Result<(), MetricsError> {
    let mut s = String::from("scene,ped,pattern_label");
    for k in 0..params.k() {
        let _ = write!(s, ",prior_probs_{k}");
    }
    s.push('\n');
    for (sample, probs) in samples.iter().zip(prior_probs(params, samples)) {
        let label = sample.pattern_label.map(|l| l.to_string()).unwrap_or_default();
        let _ = write!(s, "{},{},{}", sample.scene_id, sample.ped_id, label);
        for p in probs {
            let _ = write!(s, ",{p}");
        }
        s.push('\n');
    }
    write_file(path.as_ref(), &s)
}

pub fn write_pcmd_csv(curve: &PcmdCurve, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    write_file(path.as_ref(), &curve.to_csv())
}

pub fn write_report(report: &MetricReport, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    write_file(path.as_ref(), &report.to_text())
}

//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array2, AutodiffError, Tape, Var};

/// Settings for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct FdConfig {
    /// Perturbation `h` in `(f(p+h) - f(p-h)) / 2h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// that are zero up to rounding are compared in absolute terms.
    pub floor: f64,
    /// Multiple of the central-difference rounding noise,
    /// `ε |f| / h`, below which a mismatch counts as no more than
    /// `tolerance`. Zero disables the loss-scaled floor.
    pub rounding_factor: f64,
    /// Check at most this many coordinates per parameter array, picked
    /// with a fixed seed. `None` checks every scalar.
    pub max_coords_per_param: Option<usize>,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig { step: 1e-5, tolerance: 1e-6, floor: 1e-6, rounding_factor: 16.0, max_coords_per_param: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(param, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

/// Error between an analytical and a numerical derivative, relative to
/// the larger of the two magnitudes and `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

fn evaluate<F>(loss: &F, params: &[Array2]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = loss(&mut tape, &vars)?;
    Ok(tape.value(root).item())
}

/// Analytical loss value and gradient for every parameter.
pub fn value_and_grad<F>(loss: &F, params: &[Array2]) -> Result<(f64, Vec<Array2>), AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = loss(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let out = vars.iter().zip(params).map(|(&v, p)| grads.wrt_or_zeros(v, p)).collect();
    Ok((tape.value(root).item(), out))
}

/// Compares the tape gradient of `loss` against central differences at
/// every (or a seeded subset of) parameter scalar. Any error or non-finite
/// value yields a failing report rather than an `Err`.
pub fn finite_diff_check<F>(loss: F, params: &[Array2], config: &FdConfig) -> FdReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let failed = FdReport { max_rel_err: f64::INFINITY, max_abs_err: f64::INFINITY, checked: 0, worst: None, pass: false };
    let Ok((value, analytic)) = value_and_grad(&loss, params) else { return failed };
    if !value.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return failed;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut work: Vec<Array2> = params.to_vec();
    let mut report = FdReport { max_rel_err: 0.0, max_abs_err: 0.0, checked: 0, worst: None, pass: true };
    let h = config.step;
    let noise = config.rounding_factor * f64::EPSILON * value.abs().max(1.0) / h;
    let floor = config.floor.max(noise / config.tolerance);
    for (pi, grad) in analytic.iter().enumerate() {
        let n = params[pi].len();
        let coords: Vec<usize> = match config.max_coords_per_param {
            Some(limit) if limit < n => {
                let mut picked = sample(&mut rng, n, limit).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let original = params[pi].data()[j];
            work[pi].data_mut()[j] = original + h;
            let plus = evaluate(&loss, &work);
            work[pi].data_mut()[j] = original - h;
            let minus = evaluate(&loss, &work);
            work[pi].data_mut()[j] = original;
            let (Ok(plus), Ok(minus)) = (plus, minus) else { return failed };
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return failed;
            }
            let a = grad.data()[j];
            let rel = relative_error(a, numeric, floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((pi, j));
            }
        }
    }
    report.pass = report.max_rel_err <= config.tolerance;
    report
}

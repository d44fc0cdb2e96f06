//! Brute-force check that the contrastive loss, with the exact density
//! ratio `h(z, x) = p(z|x) / p(z)` as critic, lower-bounds `log N' - I(z, x)`.

use super::ObjectiveError;

const MAX_NEGATIVE_TUPLES: usize = 1 << 22;

#[derive(Clone, Debug, PartialEq)]
pub struct MiBoundReport {
    /// Exact expected contrastive loss: positive `(x, z) ~ p(x, z)` and
    /// `N' - 1` negatives `z_j ~ p(z)`, all tuples enumerated.
    pub l3_value: f64,
    /// `I(z, x)` by direct summation.
    pub mi: f64,
    /// `log N' - I(z, x)`.
    pub bound: f64,
    /// `E log[1 + (N' - 1) p(z) / p(z|x)]`, the mean-field step of the
    /// textbook derivation; reported for comparison only.
    pub mean_field_value: f64,
    pub bound_holds: bool,
}

/// `joint[x][z]` must be non-negative and sum to 1 within 1e-9.
pub fn mi_bound_check(joint: &[Vec<f64>], n_prime: usize) -> Result<MiBoundReport, ObjectiveError> {
    if n_prime < 2 {
        return Err(ObjectiveError::BatchTooSmall(n_prime));
    }
    let nz = joint.first().map_or(0, Vec::len);
    if joint.is_empty() || nz == 0 || joint.iter().any(|r| r.len() != nz) {
        return Err(ObjectiveError::Joint("table must be non-empty and rectangular".into()));
    }
    if joint.iter().flatten().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(ObjectiveError::Joint("entries must be finite and non-negative".into()));
    }
    let total: f64 = joint.iter().flatten().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(ObjectiveError::Joint(format!("entries sum to {total}, not 1")));
    }
    let tuples = nz.checked_pow((n_prime - 1) as u32).filter(|&t| t <= MAX_NEGATIVE_TUPLES);
    let Some(tuples) = tuples else {
        return Err(ObjectiveError::Joint("too many negative tuples to enumerate".into()));
    };

    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pz: Vec<f64> = (0..nz).map(|z| joint.iter().map(|r| r[z]).sum()).collect();
    let ratio = |x: usize, z: usize| if joint[x][z] > 0.0 { joint[x][z] / (px[x] * pz[z]) } else { 0.0 };

    let mut mi = 0.0;
    for (x, row) in joint.iter().enumerate() {
        for (z, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p * ratio(x, z).ln();
            }
        }
    }

    let mut l3 = 0.0;
    let mut mean_field = 0.0;
    let mut digits = vec![0usize; n_prime - 1];
    for (x, row) in joint.iter().enumerate() {
        for (z, &p) in row.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let positive = ratio(x, z);
            mean_field += p * (1.0 + (n_prime - 1) as f64 / positive).ln();
            let mut expected = 0.0;
            digits.iter_mut().for_each(|d| *d = 0);
            for _ in 0..tuples {
                let weight: f64 = digits.iter().map(|&d| pz[d]).product();
                if weight > 0.0 {
                    let negatives: f64 = digits.iter().map(|&d| ratio(x, d)).sum();
                    expected += weight * ((positive + negatives) / positive).ln();
                }
                for d in digits.iter_mut() {
                    *d += 1;
                    if *d < nz {
                        break;
                    }
                    *d = 0;
                }
            }
            l3 += p * expected;
        }
    }

    let bound = (n_prime as f64).ln() - mi;
    Ok(MiBoundReport { l3_value: l3, mi, bound, mean_field_value: mean_field, bound_holds: l3 >= bound - 1e-12 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn independent_joint_meets_bound_with_equality() {
        let px = [0.1, 0.2, 0.3, 0.4];
        let pz = [0.25, 0.25, 0.4, 0.1];
        let joint: Vec<Vec<f64>> = px.iter().map(|a| pz.iter().map(|b| a * b).collect()).collect();
        let r = mi_bound_check(&joint, 4).unwrap();
        assert!(r.mi.abs() < 1e-12);
        assert!((r.l3_value - 4f64.ln()).abs() < 1e-12);
        assert!(r.bound_holds);
    }

    #[test]
    fn diagonal_joint_has_log4_information() {
        let joint: Vec<Vec<f64>> = (0..4).map(|x| (0..4).map(|z| if x == z { 0.25 } else { 0.0 }).collect()).collect();
        let r = mi_bound_check(&joint, 4).unwrap();
        assert!((r.mi - 4f64.ln()).abs() < 1e-12);
        assert!(r.bound.abs() < 1e-12);
        assert!(r.l3_value >= 0.0 && r.bound_holds);
        // Expected log(1 + #negatives equal to x) with 3 draws at 1/4 each.
        let binom = [27.0 / 64.0, 27.0 / 64.0, 9.0 / 64.0, 1.0 / 64.0];
        let expected: f64 = binom.iter().enumerate().map(|(c, w)| w * (1.0 + c as f64).ln()).sum();
        assert!((r.l3_value - expected).abs() < 1e-12);
    }

    #[test]
    fn random_joints_never_violate() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let mut joint: Vec<Vec<f64>> = (0..4).map(|_| (0..4).map(|_| rng.gen::<f64>().powi(3)).collect()).collect();
            let total: f64 = joint.iter().flatten().sum();
            joint.iter_mut().flatten().for_each(|v| *v /= total);
            assert!(mi_bound_check(&joint, 4).unwrap().bound_holds);
        }
    }

    #[test]
    fn rejects_unnormalized_tables() {
        assert!(mi_bound_check(&[vec![0.5, 0.6]], 2).is_err());
        assert!(mi_bound_check(&[vec![1.5, -0.5]], 2).is_err());
        assert!(mi_bound_check(&[vec![0.5], vec![0.25, 0.25]], 2).is_err());
        assert!(mi_bound_check(&[vec![1.0]], 1).is_err());
    }
}

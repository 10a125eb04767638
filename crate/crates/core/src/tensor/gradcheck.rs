//! Central finite-difference gradient verification.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::Result;

/// Step used for central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Gradients smaller than this are
/// compared in absolute terms, below the resolution of a central difference
/// taken on an `O(1)` loss in double precision.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Name and flat index of the coordinate with the largest error.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

/// Compares `analytic` gradients of named inputs against central differences
/// of `loss`.
///
/// `loss` is re-evaluated with one coordinate perturbed at a time. When
/// `max_coords` is set, at most that many coordinates per input are sampled
/// (seeded); otherwise every coordinate is checked.
pub fn check_named(
    inputs: &mut [(String, Tensor<f64>)],
    analytic: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
    mut loss: impl FnMut(&[(String, Tensor<f64>)]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for ti in 0..inputs.len() {
        let n = inputs[ti].1.numel();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = inputs[ti].1.data()[c];
            inputs[ti].1.data_mut()[c] = orig + eps;
            let plus = loss(inputs)?;
            inputs[ti].1.data_mut()[c] = orig - eps;
            let minus = loss(inputs)?;
            inputs[ti].1.data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[ti].data()[c], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((inputs[ti].0.clone(), c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!(relative_error(0.0, 1e-9) < 1e-2);
    }

    #[test]
    fn quadratic_passes() {
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let analytic = vec![x.map(|v| 2.0 * v)];
        let mut inputs = vec![("x".to_string(), x)];
        let r = check_named(&mut inputs, &analytic, DEFAULT_EPS, None, 0, |ins| {
            Ok(ins[0].1.data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap();
        let analytic = vec![x.map(|v| 3.0 * v)];
        let mut inputs = vec![("x".to_string(), x)];
        let r = check_named(&mut inputs, &analytic, DEFAULT_EPS, None, 0, |ins| {
            Ok(ins[0].1.data().iter().map(|v| v * v).sum())
        })
        .unwrap();
        assert!(r.max_rel_err > 0.3);
    }
}

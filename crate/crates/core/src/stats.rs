//! Chi-square gates and small covariance helpers.

use nalgebra::{DMatrix, SMatrix};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// Mahalanobis gate: the chi-square inverse CDF at `p` for `dof` ∈ {1, 2, 3}.
pub fn chi2_gate(dof: usize, p: f64) -> Result<f64> {
    if !(1..=3).contains(&dof) {
        return Err(Error::invalid("dof", format!("{dof} not in 1..=3")));
    }
    if !(p > 0.5 && p < 1.0) {
        return Err(Error::invalid("p", format!("{p} not in (0.5, 1)")));
    }
    chi2_quantile(dof as f64, p)
}

/// Chi-square inverse CDF for any positive degrees of freedom.
pub fn chi2_quantile(dof: f64, p: f64) -> Result<f64> {
    if !(dof > 0.0 && dof.is_finite()) {
        return Err(Error::invalid("dof", format!("{dof} must be positive")));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid("p", format!("{p} not in (0, 1)")));
    }
    let dist = ChiSquared::new(dof).map_err(|e| Error::invalid("dof", e.to_string()))?;
    Ok(dist.inverse_cdf(p))
}

/// Two-sided chi-square interval for the mean of `runs` independent
/// `dof`-dimensional NEES samples.
pub fn nees_interval(dof: usize, runs: usize, confidence: f64) -> Result<(f64, f64)> {
    let k = (dof * runs) as f64;
    let alpha = 1.0 - confidence;
    let lo = chi2_quantile(k, alpha / 2.0)? / runs as f64;
    let hi = chi2_quantile(k, 1.0 - alpha / 2.0)? / runs as f64;
    Ok((lo, hi))
}

/// (P + Pᵀ) / 2 in place.
pub fn symmetrize<const N: usize>(p: &mut SMatrix<f64, N, N>) {
    for i in 0..N {
        for j in (i + 1)..N {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

pub fn symmetrize_dyn(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(p: &DMatrix<f64>) -> f64 {
    p.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetric within 1e-9 relative tolerance and PSD within `eig_tol`.
pub fn is_covariance(p: &DMatrix<f64>, eig_tol: f64) -> bool {
    if p.nrows() != p.ncols() || p.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let scale = p.abs().max().max(1e-300);
    let asym = (p - p.transpose()).abs().max();
    asym <= 1e-9 * scale && min_eigenvalue(p) >= -eig_tol
}

/// Ratio of largest to smallest absolute eigenvalue (∞ if singular).
pub fn condition_estimate(p: &DMatrix<f64>) -> f64 {
    let eig = p.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Chi-square density integrated with composite Simpson, inverted by bisection.
    /// Substituting x = u² removes the x^(-1/2) singularity at the origin for dof = 1.
    fn chi2_quantile_oracle(dof: usize, p: f64) -> f64 {
        let k = dof as f64;
        let gamma_half_k = match dof {
            1 => std::f64::consts::PI.sqrt(),
            2 => 1.0,
            3 => std::f64::consts::PI.sqrt() / 2.0,
            _ => unreachable!(),
        };
        let norm = 1.0 / (2f64.powf(k / 2.0) * gamma_half_k);
        // integrand in u where x = u², dx = 2u du
        let f = |u: f64| {
            let x = u * u;
            norm * x.powf(k / 2.0 - 1.0).max(0.0) * (-x / 2.0).exp() * 2.0 * u
        };
        let f = move |u: f64| if u == 0.0 && dof == 1 { 2.0 * norm } else { f(u) };
        let cdf = |x: f64| {
            let b = x.sqrt();
            let n = 20_000;
            let h = b / n as f64;
            let mut s = f(0.0) + f(b);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * f(i as f64 * h);
            }
            s * h / 3.0
        };
        let (mut lo, mut hi) = (0.0, 100.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn gate_matches_quadrature_oracle() {
        for dof in 1..=3 {
            for &p in &[0.6, 0.9, 0.95, 0.99, 0.999] {
                let oracle = chi2_quantile_oracle(dof, p);
                let got = chi2_gate(dof, p).unwrap();
                assert_abs_diff_eq!(got, oracle, epsilon = 1e-6 * oracle.max(1.0));
            }
        }
    }

    #[test]
    fn gate_reference_values() {
        // frozen from the quadrature oracle above
        assert_abs_diff_eq!(chi2_gate(2, 0.99).unwrap(), 9.210340, epsilon = 1e-5);
        assert_abs_diff_eq!(chi2_gate(1, 0.99).unwrap(), 6.634897, epsilon = 1e-5);
        assert_abs_diff_eq!(chi2_gate(3, 0.99).unwrap(), 11.344867, epsilon = 1e-5);
    }

    #[test]
    fn gate_monotone_towards_one() {
        let mut prev = 0.0;
        for &p in &[0.9, 0.99, 0.999, 0.9999, 0.999999, 0.99999999] {
            let g = chi2_gate(2, p).unwrap();
            assert!(g > prev);
            prev = g;
        }
        // dof 2 has the closed form -2 ln(1-p)
        assert_abs_diff_eq!(prev, -2.0 * (1e-8f64).ln(), epsilon = 1e-4);
        assert!(prev > 36.0);
    }

    #[test]
    fn gate_rejects_bad_args() {
        assert!(chi2_gate(0, 0.99).is_err());
        assert!(chi2_gate(4, 0.99).is_err());
        assert!(chi2_gate(2, 0.5).is_err());
        assert!(chi2_gate(2, 1.0).is_err());
        assert!(chi2_gate(2, f64::NAN).is_err());
    }

    #[test]
    fn nees_interval_for_fifty_runs() {
        let (lo, hi) = nees_interval(6, 50, 0.95).unwrap();
        assert!(lo < 6.0 && hi > 6.0);
        assert_abs_diff_eq!(lo, 5.08, epsilon = 0.02);
        assert_abs_diff_eq!(hi, 6.98, epsilon = 0.02);
    }

    #[test]
    fn covariance_checks() {
        let mut p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0 + 1e-6, 1.0, 2.0]);
        assert!(!is_covariance(&p, 1e-9));
        symmetrize_dyn(&mut p);
        assert!(is_covariance(&p, 1e-9));
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!is_covariance(&bad, 1e-9));
        assert!(condition_estimate(&DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).is_infinite());
    }
}

//! Shared Kalman-filter numerics: finite-difference Jacobians, Gaussian
//! likelihoods and the iterated EKF measurement update.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::geometry::symmetrize;

/// Central-difference step used for every numerically linearized model.
pub const JACOBIAN_STEP: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Central-difference Jacobian of `f` at `x`.
pub fn numeric_jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut jac: Option<DMatrix<f64>> = None;
    let mut probe = x.clone();
    for j in 0..x.len() {
        probe[j] = x[j] + JACOBIAN_STEP;
        let plus = f(&probe);
        probe[j] = x[j] - JACOBIAN_STEP;
        let minus = f(&probe);
        probe[j] = x[j];
        let col = (plus - minus) / (2.0 * JACOBIAN_STEP);
        let m = jac.get_or_insert_with(|| DMatrix::zeros(col.len(), x.len()));
        m.set_column(j, &col);
    }
    jac.unwrap_or_else(|| DMatrix::zeros(f(x).len(), 0))
}

pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or(Error::SingularCovariance)
}

/// `sqrt(νᵀ S⁻¹ ν)`.
pub fn mahalanobis_distance(innovation: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(s)?;
    Ok(innovation.dot(&chol.solve(innovation)).max(0.0).sqrt())
}

/// Log-density of `innovation` under a zero-mean Gaussian with covariance `s`.
pub fn gaussian_log_likelihood(innovation: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let chol = cholesky(s)?;
    let quad = innovation.dot(&chol.solve(innovation));
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().take(s.nrows()).map(|d| d.ln()).sum::<f64>();
    Ok(-0.5 * (quad + log_det + innovation.len() as f64 * LN_2PI))
}

/// Result of an iterated EKF update, expressed as an increment `delta` on the
/// prior mean's local parameterization.
#[derive(Clone, Debug)]
pub struct IteratedUpdate {
    pub delta: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Innovation and its covariance linearized at the prior mean.
    pub prior_innovation: DVector<f64>,
    pub prior_innovation_cov: DMatrix<f64>,
    /// Innovation remaining at the posterior mean.
    pub posterior_innovation: DVector<f64>,
}

/// Gauss-Newton iterated EKF update.
///
/// `residual(δ)` returns the innovation `z − h(x̂ ⊞ δ)`. Iteration starts at
/// `δ = 0` and at every entry of `extra_starts`; the start reaching the lowest
/// MAP cost wins. The posterior covariance uses the Joseph form at the final
/// linearization point.
pub fn iterated_update<F>(
    prior_cov: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    residual: F,
    extra_starts: &[DVector<f64>],
    max_iterations: usize,
) -> Result<IteratedUpdate>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = prior_cov.nrows();
    let prior_chol = cholesky(prior_cov)?;
    let noise_chol = cholesky(noise)?;
    let cost = |delta: &DVector<f64>, nu: &DVector<f64>| {
        delta.dot(&prior_chol.solve(delta)) + nu.dot(&noise_chol.solve(nu))
    };
    let neg_jacobian = |delta: &DVector<f64>| -numeric_jacobian(&residual, delta);

    let zero = DVector::zeros(n);
    let prior_innovation = residual(&zero);
    let h0 = neg_jacobian(&zero);
    let mut prior_innovation_cov = &h0 * prior_cov * h0.transpose() + noise;
    symmetrize(&mut prior_innovation_cov);

    let mut best: Option<(f64, DVector<f64>)> = None;
    for start in std::iter::once(&zero).chain(extra_starts.iter()) {
        let mut delta = start.clone();
        for _ in 0..max_iterations {
            let nu = residual(&delta);
            let h = neg_jacobian(&delta);
            let mut s = &h * prior_cov * h.transpose() + noise;
            symmetrize(&mut s);
            let Some(s_chol) = Cholesky::new(s) else { break };
            let gain = (s_chol.solve(&(&h * prior_cov))).transpose();
            let next = &gain * (nu + &h * &delta);
            let step = (&next - &delta).norm();
            delta = next;
            if step < 1e-12 {
                break;
            }
        }
        let nu = residual(&delta);
        if !delta.iter().chain(nu.iter()).all(|v| v.is_finite()) {
            continue;
        }
        let c = cost(&delta, &nu);
        if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
            best = Some((c, delta));
        }
    }
    let (_, delta) = best.ok_or(Error::SingularCovariance)?;

    let h = neg_jacobian(&delta);
    let mut s = &h * prior_cov * h.transpose() + noise;
    symmetrize(&mut s);
    let s_chol = cholesky(&s)?;
    let gain = (s_chol.solve(&(&h * prior_cov))).transpose();
    let ikh = DMatrix::identity(n, n) - &gain * &h;
    let mut cov = &ikh * prior_cov * ikh.transpose() + &gain * noise * gain.transpose();
    symmetrize(&mut cov);
    let posterior_innovation = residual(&delta);

    Ok(IteratedUpdate { delta, cov, prior_innovation, prior_innovation_cov, posterior_innovation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn jacobian_of_quadratic() {
        let f = |x: &DVector<f64>| DVector::from_vec(vec![x[0] * x[0], x[0] * x[1]]);
        let j = numeric_jacobian(f, &DVector::from_vec(vec![2.0, 3.0]));
        assert_relative_eq!(j, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 3.0, 2.0]), epsilon = 1e-8);
    }

    #[test]
    fn log_likelihood_of_standard_normal() {
        let ll = gaussian_log_likelihood(&DVector::from_vec(vec![0.0]), &DMatrix::identity(1, 1)).unwrap();
        assert_relative_eq!(ll, -0.5 * LN_2PI, epsilon = 1e-15);
        let ll2 = gaussian_log_likelihood(&DVector::from_vec(vec![1.0, 0.0]), &(DMatrix::identity(2, 2) * 4.0)).unwrap();
        assert_relative_eq!(ll2, -0.5 * (0.25 + 2.0 * 4f64.ln() + 2.0 * LN_2PI), epsilon = 1e-12);
    }

    #[test]
    fn iterated_update_matches_linear_kalman() {
        // Linear measurement: one IEKF iteration equals the Kalman update.
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let r = DMatrix::from_row_slice(1, 1, &[0.5]);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let z = 1.5;
        let residual = |d: &DVector<f64>| DVector::from_vec(vec![z - (d[0] + 2.0 * d[1])]);
        let out = iterated_update(&p, &r, residual, &[], 5).unwrap();

        let s = &h * &p * h.transpose() + &r;
        let k = &p * h.transpose() / s[(0, 0)];
        let expected_mean: DVector<f64> = k.column(0) * z;
        let expected_cov = (DMatrix::identity(2, 2) - &k * &h) * &p;
        assert_relative_eq!(out.delta, expected_mean, epsilon = 1e-8);
        assert_relative_eq!(out.cov, expected_cov, epsilon = 1e-8);
        assert_relative_eq!(out.prior_innovation_cov, s, epsilon = 1e-8);
    }
}

//! Expectation steps: Gaussian posterior moments of the sample loadings and
//! posterior inclusion probabilities of both indicator matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{EmState, ExpressionMatrix};

const JITTER: f64 = 1e-10;
const JITTER_RETRY: f64 = 1e-6;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// Log density of the exponential mixing distribution Exp(rate omega^2 / 2)
/// that makes a normal with variance tau marginally Laplace(omega).
pub fn ln_tau_density(tau: f64, omega: f64) -> f64 {
    let rate = 0.5 * omega * omega;
    rate.ln() - rate * tau
}

/// Log prior odds that sample loading (i, k) sits in the slab, given its
/// variance and the column inclusion weight.
pub fn tau_log_odds(tau: f64, inclusion: f64, omega0_tilde: f64, omega1_tilde: f64) -> f64 {
    logit(inclusion) + ln_tau_density(tau, omega1_tilde) - ln_tau_density(tau, omega0_tilde)
}

/// Cholesky factor of `p` with diagonal jitter, retrying once with a larger
/// jitter.
pub(crate) fn jittered_cholesky(p: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    [JITTER, JITTER_RETRY].iter().find_map(|&eps| {
        let mut q = p.clone();
        for d in 0..q.nrows() {
            q[(d, d)] += eps;
        }
        Cholesky::new(q)
    })
}

/// Posterior means and second moments of every lambda_i.
///
/// lambda_i | x_i is Gaussian with covariance V_i = (Z' S^-1 Z + D_i)^-1
/// (D_i = diag(1/tau_i)) and mean V_i Z' S^-1 x_i.
pub fn e_step_lambda(x: &ExpressionMatrix, state: &EmState) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let n = x.n_samples();
    let k = state.k();
    let mut scaled_z = state.z.clone();
    for (j, mut row) in scaled_z.row_iter_mut().enumerate() {
        row /= state.sigma2[j];
    }
    let gram = state.z.transpose() * &scaled_z;
    let proj = &x.values * &scaled_z;

    let per_sample: Vec<Result<(DVector<f64>, DMatrix<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut precision = gram.clone();
            for d in 0..k {
                precision[(d, d)] += 1.0 / state.tau[(i, d)];
            }
            let chol = jittered_cholesky(&precision).ok_or(Error::SingularPrecision { sample: i })?;
            let cov = chol.inverse();
            let mean = &cov * proj.row(i).transpose();
            let second = cov + &mean * mean.transpose();
            Ok((mean, second))
        })
        .collect();

    let mut means = DMatrix::zeros(n, k);
    let mut seconds = Vec::with_capacity(n);
    for (i, r) in per_sample.into_iter().enumerate() {
        let (m, s) = r?;
        means.row_mut(i).copy_from(&m.transpose());
        seconds.push(s);
    }
    Ok((means, seconds))
}

/// Posterior slab probabilities of the gene indicators under the
/// spike-and-slab Laplace prior.
pub fn e_step_gamma(state: &EmState, omega0: f64, omega1: f64) -> DMatrix<f64> {
    let (g, k) = state.z.shape();
    DMatrix::from_fn(g, k, |j, c| {
        let theta = state.theta[c];
        let az = state.z[(j, c)].abs();
        let odds = logit(theta) + omega1.ln() - omega1 * az - omega0.ln() + omega0 * az;
        sigmoid(odds)
    })
}

/// Sample-indicator posterior from the variances and inclusion weights alone.
pub fn e_step_gamma_tilde_unsupervised(state: &EmState, omega0_tilde: f64, omega1_tilde: f64) -> DMatrix<f64> {
    let inclusion = state.stick.inclusion();
    let (n, k) = state.tau.shape();
    DMatrix::from_fn(n, k, |i, c| {
        sigmoid(tau_log_odds(state.tau[(i, c)], inclusion[c], omega0_tilde, omega1_tilde))
    })
}

//! EM fitting of the spike-and-slab lasso biclustering model with dynamic
//! posterior exploration over a ladder of spike rates.

pub mod estep;
pub mod fit;
pub mod mstep;
pub mod objective;

pub use estep::{e_step_gamma, e_step_gamma_tilde_unsupervised, e_step_lambda};
pub use fit::{
    binarize, init_state, prune, run_rung, run_sslb, run_sslb_with, FitOptions, FitOutput, RungResult, RungSummary,
    TraceRow, MEMBERSHIP_TOL, Z_ZERO_TOL,
};
pub use mstep::{m_step_sigma, m_step_sparsity, m_step_tau, m_step_z, SparsityPriors};
pub use objective::{eval_log_posterior, objective_terms, ObjectiveTerms};

use crate::error::Result;
use crate::model::{calibrate_xi, ExpressionMatrix, FitConfig};

/// Spike rates of one ladder rung.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rung {
    pub omega0: f64,
    pub omega0_tilde: f64,
}

/// Hyperparameters with every `auto` entry resolved against the data.
#[derive(Clone, Copy, Debug)]
pub struct ResolvedPriors {
    pub omega1: f64,
    pub omega1_tilde: f64,
    pub eta: f64,
    pub xi: f64,
    pub sparsity: SparsityPriors,
}

impl ResolvedPriors {
    pub fn from_config(cfg: &FitConfig, x: &ExpressionMatrix) -> Result<Self> {
        let xi = match cfg.xi {
            crate::model::AutoValue::Value(v) => v,
            crate::model::AutoValue::Auto => calibrate_xi(x, cfg.eta)?,
        };
        Ok(ResolvedPriors {
            omega1: cfg.omega1,
            omega1_tilde: cfg.omega1_tilde,
            eta: cfg.eta,
            xi,
            sparsity: SparsityPriors {
                variant: cfg.prior_variant,
                alpha: cfg.alpha_value(),
                a_tilde: cfg.a_tilde_value(),
                b_tilde: cfg.b_tilde,
                alpha_tilde: cfg.alpha_tilde,
                d: cfg.effective_discount(),
            },
        })
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng as _, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::model::{EmState, OutcomeMatrix, PriorVariant, Stick};
    use crate::rng::Rng;

    fn normal(rng: &mut Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    pub fn random_x(n: usize, g: usize, seed: u64) -> ExpressionMatrix {
        let mut rng = Rng::seed_from_u64(seed);
        ExpressionMatrix::from_values(DMatrix::from_fn(n, g, |_, _| normal(&mut rng))).unwrap()
    }

    pub fn random_state(n: usize, g: usize, k: usize, seed: u64) -> EmState {
        let mut rng = Rng::seed_from_u64(seed);
        let mut unif = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let z = DMatrix::from_fn(g, k, |_, _| unif(-2.0, 2.0));
        let tau = DMatrix::from_fn(n, k, |_, _| unif(0.1, 2.0));
        let sigma2 = DVector::from_fn(g, |_, _| unif(0.5, 2.0));
        let gamma_tilde = DMatrix::from_fn(n, k, |_, _| unif(0.05, 0.95));
        let gamma = DMatrix::from_fn(g, k, |_, _| unif(0.05, 0.95));
        let theta = DVector::from_fn(k, |_, _| unif(0.1, 0.9));
        let nu = DVector::from_fn(k, |_, _| unif(0.3, 0.95));
        let mut rng = Rng::seed_from_u64(seed + 1000);
        let lambda_mean = DMatrix::from_fn(n, k, |_, _| normal(&mut rng));
        let lambda_second = (0..n)
            .map(|i| {
                let a = DMatrix::from_fn(k, k, |_, _| 0.3 * normal(&mut rng));
                let m = lambda_mean.row(i).transpose();
                &a * a.transpose() + DMatrix::identity(k, k) * 0.05 + &m * m.transpose()
            })
            .collect();
        EmState {
            z,
            lambda_mean,
            lambda_second,
            tau,
            sigma2,
            gamma_tilde,
            gamma,
            theta,
            stick: Stick::Breaks(nu),
            outcome: None,
        }
    }

    pub fn random_outcomes(n: usize, c: usize, seed: u64) -> OutcomeMatrix {
        let mut rng = Rng::seed_from_u64(seed);
        let classes: Vec<usize> = (0..n).map(|i| if i < c { i } else { rng.random_range(0..c) }).collect();
        let labels = (0..c).map(|l| format!("c{l}")).collect();
        OutcomeMatrix::from_classes(&classes, labels, 0).unwrap()
    }

    pub fn test_priors(variant: PriorVariant) -> ResolvedPriors {
        ResolvedPriors {
            omega1: 1.0,
            omega1_tilde: 1.0,
            eta: 3.0,
            xi: 0.4,
            sparsity: SparsityPriors {
                variant,
                alpha: 0.7,
                a_tilde: 0.6,
                b_tilde: 1.3,
                alpha_tilde: 1.0,
                d: if variant == PriorVariant::PY { 0.5 } else { 0.0 },
            },
        }
    }
}

//! Expected complete-data log posterior, evaluated at the current state with
//! every expectation block plugged in.

use nalgebra::DMatrix;

use crate::em::estep::ln_tau_density;
use crate::em::mstep::{expected_rss, SslPrior};
use crate::em::{ResolvedPriors, Rung};
use crate::error::Result;
use crate::model::{EmState, ExpressionMatrix, OutcomeMatrix, PriorVariant, Stick};
use crate::outcome::mc_log_sum_exp;
use crate::rng::{substream, tags};

/// The objective split by prior block; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ObjectiveTerms {
    pub likelihood: f64,
    pub sigma_prior: f64,
    pub z_prior: f64,
    pub theta_prior: f64,
    pub lambda_prior: f64,
    pub tau_prior: f64,
    pub membership_prior: f64,
    pub stick_prior: f64,
    pub outcome: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.sigma_prior
            + self.z_prior
            + self.theta_prior
            + self.lambda_prior
            + self.tau_prior
            + self.membership_prior
            + self.stick_prior
            + self.outcome
    }
}

/// Multinomial-logistic terms: sum_i y_i' W' E[g_i] - sum_i E[lse_i] - lambda/2 ||W||^2.
pub fn outcome_terms(
    y: &OutcomeMatrix,
    gamma_tilde: &DMatrix<f64>,
    w: &DMatrix<f64>,
    lambda_w: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    let n = y.n_samples();
    let mut aug = DMatrix::from_element(n, gamma_tilde.ncols() + 1, 1.0);
    aug.columns_mut(1, gamma_tilde.ncols()).copy_from(gamma_tilde);
    let linear = (&aug * w).component_mul(&y.values).sum();
    let mut rng = substream(seed, tags::OBJECTIVE, 0);
    let lse = mc_log_sum_exp(w, gamma_tilde, mc_samples, &mut rng)?;
    Ok(linear - lse.sum() - 0.5 * lambda_w * w.norm_squared())
}

pub fn objective_terms(
    x: &ExpressionMatrix,
    y: Option<&OutcomeMatrix>,
    state: &EmState,
    priors: &ResolvedPriors,
    rung: Rung,
    mc_samples: usize,
    seed: u64,
) -> Result<ObjectiveTerms> {
    let n = x.n_samples() as f64;
    let (eta, xi) = (priors.eta, priors.xi);
    let mut t = ObjectiveTerms::default();

    let rss = expected_rss(x, state);
    for (r, s2) in rss.iter().zip(state.sigma2.iter()) {
        t.likelihood += -0.5 * n * s2.ln() - 0.5 * r / s2;
        t.sigma_prior += -(0.5 * eta + 1.0) * s2.ln() - 0.5 * eta * xi / s2;
    }

    let alpha = priors.sparsity.alpha;
    for (c, &theta) in state.theta.iter().enumerate() {
        let prior = SslPrior::new(theta, rung.omega0, priors.omega1);
        t.z_prior += state.z.column(c).iter().map(|z| prior.ln_density(z.abs())).sum::<f64>();
        t.theta_prior += (alpha - 1.0) * theta.ln();
    }

    let inclusion = state.stick.inclusion();
    for (i, second) in state.lambda_second.iter().enumerate() {
        for c in 0..state.k() {
            let tau = state.tau[(i, c)];
            let g = state.gamma_tilde[(i, c)];
            t.lambda_prior += -0.5 * second[(c, c)] / tau - 0.5 * tau.ln();
            t.tau_prior +=
                (1.0 - g) * ln_tau_density(tau, rung.omega0_tilde) + g * ln_tau_density(tau, priors.omega1_tilde);
            t.membership_prior += g * inclusion[c].ln() + (1.0 - g) * (-inclusion[c]).ln_1p();
        }
    }

    let sp = &priors.sparsity;
    t.stick_prior = match (&state.stick, sp.variant) {
        (Stick::Weights(th), _) => th
            .iter()
            .map(|v| (sp.a_tilde - 1.0) * v.ln() + (sp.b_tilde - 1.0) * (-v).ln_1p())
            .sum(),
        (Stick::Breaks(nu), variant) => {
            let d = if variant == PriorVariant::PY { sp.d } else { 0.0 };
            nu.iter()
                .enumerate()
                .map(|(k, v)| (sp.alpha_tilde + (k + 1) as f64 * d - 1.0) * v.ln() - d * (-v).ln_1p())
                .sum()
        }
    };

    if let (Some(y), Some(o)) = (y, state.outcome.as_ref()) {
        t.outcome = outcome_terms(y, &state.gamma_tilde, &o.w, o.lambda_w, mc_samples, seed)?;
    }
    Ok(t)
}

/// Scalar objective; guided states add the outcome-model terms.
pub fn eval_log_posterior(
    x: &ExpressionMatrix,
    y: Option<&OutcomeMatrix>,
    state: &EmState,
    priors: &ResolvedPriors,
    rung: Rung,
    mc_samples: usize,
    seed: u64,
) -> Result<f64> {
    Ok(objective_terms(x, y, state, priors, rung, mc_samples, seed)?.total())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::fit::prune;
    use crate::em::test_support::{random_outcomes, random_state, random_x, test_priors};
    use crate::model::OutcomeBlock;
    use approx::assert_relative_eq;

    const RUNG: Rung = Rung { omega0: 20.0, omega0_tilde: 5.0 };

    #[test]
    fn pruning_zero_column_removes_only_its_own_terms() {
        let x = random_x(6, 8, 31);
        let mut state = random_state(6, 8, 3, 32);
        state.stick = Stick::Weights(state.theta.map(|t| 0.5 * t + 0.1));
        state.z.column_mut(1).fill(0.0);
        state.gamma_tilde.column_mut(1).fill(0.01);
        let priors = test_priors(PriorVariant::BB);
        let full = objective_terms(&x, None, &state, &priors, RUNG, 0, 0).unwrap();
        let (pruned, kept) = prune(&state, 1e-10, 0.025);
        assert_eq!(kept, vec![0, 2]);
        let small = objective_terms(&x, None, &pruned, &priors, RUNG, 0, 0).unwrap();

        // the removed column's own terms, written out directly
        let theta = state.theta[1];
        let tt = state.stick.values()[1];
        let mut own = 8.0 * SslPrior::new(theta, 20.0, 1.0).ln_density(0.0);
        own += (priors.sparsity.alpha - 1.0) * theta.ln();
        own += (priors.sparsity.a_tilde - 1.0) * tt.ln() + (priors.sparsity.b_tilde - 1.0) * (-tt).ln_1p();
        for i in 0..6 {
            let tau = state.tau[(i, 1)];
            let g = state.gamma_tilde[(i, 1)];
            own += -0.5 * state.lambda_second[i][(1, 1)] / tau - 0.5 * tau.ln();
            own += (1.0 - g) * ln_tau_density(tau, 5.0) + g * ln_tau_density(tau, 1.0);
            own += g * tt.ln() + (1.0 - g) * (-tt).ln_1p();
        }
        assert_relative_eq!(full.likelihood, small.likelihood, max_relative = 1e-10);
        assert_relative_eq!(full.total() - small.total(), own, max_relative = 1e-9);
    }

    #[test]
    fn guided_difference_is_outcome_block() {
        let x = random_x(6, 5, 33);
        let y = random_outcomes(6, 3, 34);
        let mut state = random_state(6, 5, 2, 35);
        let priors = test_priors(PriorVariant::IBP);
        let plain = eval_log_posterior(&x, Some(&y), &state, &priors, RUNG, 20, 7).unwrap();
        let mut w = DMatrix::from_fn(3, 3, |r, c| 0.3 * r as f64 - 0.2 * c as f64);
        w.column_mut(0).fill(0.0);
        state.outcome = Some(OutcomeBlock { w: w.clone(), lambda_w: 0.7, reference: 0 });
        let guided = eval_log_posterior(&x, Some(&y), &state, &priors, RUNG, 20, 7).unwrap();
        let block = outcome_terms(&y, &state.gamma_tilde, &w, 0.7, 20, 7).unwrap();
        assert_relative_eq!(guided - plain, block, max_relative = 1e-12);
    }

    #[test]
    fn ridge_scale_is_irrelevant_at_zero_weights() {
        let x = random_x(6, 5, 36);
        let y = random_outcomes(6, 3, 37);
        let mut state = random_state(6, 5, 2, 38);
        let priors = test_priors(PriorVariant::PY);
        state.outcome = Some(OutcomeBlock { w: DMatrix::zeros(3, 3), lambda_w: 0.5, reference: 0 });
        let a = eval_log_posterior(&x, Some(&y), &state, &priors, RUNG, 20, 1).unwrap();
        state.outcome.as_mut().unwrap().lambda_w = 1.0;
        let b = eval_log_posterior(&x, Some(&y), &state, &priors, RUNG, 20, 1).unwrap();
        assert_eq!(a, b);
    }
}

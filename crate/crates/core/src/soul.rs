//! Empirical-Bayes choice of the ridge strength on the regression weights:
//! stochastic approximation driven by an unadjusted Langevin chain.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{AutoValue, SoulConfig};
use crate::outcome::RidgeMlr;
use crate::rng::Rng;

/// Log-likelihood side of a Gaussian-prior model sampled by the Langevin
/// chain. The prior N(0, I / lambda) is added by the caller.
pub trait LangevinTarget {
    /// Gradient of the negative log-likelihood.
    fn grad_neg_log_lik(&self, w: &DMatrix<f64>) -> DMatrix<f64>;
    /// Lipschitz constant of that gradient.
    fn data_lipschitz(&self) -> f64;
    /// Number of free parameters under the prior.
    fn dim(&self) -> usize;
    /// Restores pinned entries after a move.
    fn project(&self, _w: &mut DMatrix<f64>) {}
}

impl LangevinTarget for RidgeMlr<'_> {
    fn grad_neg_log_lik(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        self.neg_log_lik_gradient(w)
    }

    fn data_lipschitz(&self) -> f64 {
        RidgeMlr::data_lipschitz(self)
    }

    fn dim(&self) -> usize {
        RidgeMlr::dim(self)
    }

    fn project(&self, w: &mut DMatrix<f64>) {
        w.column_mut(self.reference).fill(0.0);
    }
}

/// One Langevin move W - delta * grad + sqrt(2 delta) * Z, where `grad` is
/// the gradient of the negative log posterior at W.
pub fn ula_step(w: &DMatrix<f64>, grad: &DMatrix<f64>, delta: f64, rng: &mut Rng) -> Result<DMatrix<f64>> {
    let scale = (2.0 * delta).sqrt();
    let next = DMatrix::from_fn(w.nrows(), w.ncols(), |r, c| {
        let z: f64 = StandardNormal.sample(rng);
        w[(r, c)] - delta * grad[(r, c)] + scale * z
    });
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(Error::NonFiniteState)
    }
}

/// Step size of the outer update at iteration i (counted from one).
pub fn pga_step(i: usize, c0: f64, p: f64) -> f64 {
    c0 * (i as f64).powf(-p)
}

#[derive(Clone, Debug)]
pub struct SoulTrace {
    /// lambda after every outer iteration.
    pub lambda_path: Vec<f64>,
    /// log lambda after every outer iteration (log-scale variant only).
    pub kappa_path: Option<Vec<f64>>,
    pub final_estimate: f64,
    pub w_final: DMatrix<f64>,
    /// More than half of the averaged iterates sat on a projection bound.
    pub saturated: bool,
}

/// Runs the stochastic approximation from `w0` and `lambda0`.
pub fn soul_estimate_lambda(
    target: &impl LangevinTarget,
    w0: &DMatrix<f64>,
    lambda0: f64,
    cfg: &SoulConfig,
    rng: &mut Rng,
) -> Result<SoulTrace> {
    let dim = target.dim() as f64;
    let [lo, hi] = cfg.theta_bounds;
    let data_l = target.data_lipschitz();
    let delta_call = cfg.delta_ula.resolve(|| 0.95 / (data_l + lambda0));
    let c0 = cfg.c0.resolve(|| 1.0 / (cfg.lambda_init * dim));
    let m = cfg.inner_samples.max(1);

    let mut w = w0.clone();
    target.project(&mut w);
    let mut lambda = lambda0.clamp(lo, hi);
    let mut lambda_path = Vec::with_capacity(cfg.n_iters);
    let mut kappa_path = Vec::with_capacity(cfg.n_iters);
    for i in 1..=cfg.n_iters {
        let delta = match cfg.delta_ula {
            AutoValue::Auto => delta_call.min(0.95 / (data_l + lambda)),
            AutoValue::Value(v) => v,
        };
        let mut drift = 0.0;
        for _ in 0..m {
            let grad = target.grad_neg_log_lik(&w) + lambda * &w;
            w = ula_step(&w, &grad, delta, rng)?;
            target.project(&mut w);
            drift += w.norm_squared();
        }
        let step = pga_step(i, c0, cfg.p_exponent);
        if cfg.log_scale {
            let kappa = lambda.ln();
            let grad = (m as f64 * dim - lambda * drift) / (2.0 * m as f64);
            let kappa = (kappa + step * grad).clamp(lo.ln(), hi.ln());
            kappa_path.push(kappa);
            lambda = kappa.exp();
        } else {
            let grad = (m as f64 * dim / lambda - drift) / (2.0 * m as f64);
            lambda = (lambda + step * grad).clamp(lo, hi);
        }
        if !lambda.is_finite() {
            return Err(Error::NonFiniteState);
        }
        lambda_path.push(lambda);
    }

    let first = cfg.burn_in.max(1);
    let kept = first - 1..cfg.n_iters;
    let count = kept.len().max(1) as f64;
    let final_estimate = if cfg.log_scale {
        (kappa_path[kept.clone()].iter().sum::<f64>() / count).exp()
    } else {
        lambda_path[kept.clone()].iter().sum::<f64>() / count
    };
    let on_bound = lambda_path[kept]
        .iter()
        .filter(|&&l| (l - lo).abs() <= 1e-12 * lo || (l - hi).abs() <= 1e-12 * hi)
        .count();
    let saturated = on_bound as f64 > 0.5 * count;
    if saturated {
        log::warn!("ridge-strength estimate saturated at a projection bound ({final_estimate:.3e})");
    }
    Ok(SoulTrace {
        lambda_path,
        kappa_path: cfg.log_scale.then_some(kappa_path),
        final_estimate,
        w_final: w,
        saturated,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::Normal;

    /// y_i ~ N(w, 1) with a scalar w.
    pub(crate) struct GaussianMean {
        pub n: usize,
        pub sum: f64,
    }

    impl LangevinTarget for GaussianMean {
        fn grad_neg_log_lik(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
            w.map(|v| self.n as f64 * v - self.sum)
        }
        fn data_lipschitz(&self) -> f64 {
            self.n as f64
        }
        fn dim(&self) -> usize {
            1
        }
    }

    pub(crate) fn gaussian_toy(n: usize, truth: f64, seed: u64) -> (GaussianMean, f64) {
        let mut rng = Rng::seed_from_u64(seed);
        let normal = Normal::new(truth, 1.0).unwrap();
        let sum: f64 = (0..n).map(|_| normal.sample(&mut rng)).sum();
        let mean = sum / n as f64;
        // marginal y_bar ~ N(0, 1/lambda + 1/n)
        let mmle = 1.0 / (mean * mean - 1.0 / n as f64);
        (GaussianMean { n, sum }, mmle)
    }

    struct PureGaussian;
    impl LangevinTarget for PureGaussian {
        fn grad_neg_log_lik(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
            DMatrix::zeros(w.nrows(), w.ncols())
        }
        fn data_lipschitz(&self) -> f64 {
            0.0
        }
        fn dim(&self) -> usize {
            1
        }
    }

    #[test]
    fn ula_stationary_variance_matches_bias_formula() {
        let (lambda, delta) = (2.0, 0.3);
        let mut rng = Rng::seed_from_u64(1);
        let mut w = DMatrix::zeros(1, 1);
        let mut acc = 0.0;
        let steps = 100_000;
        for _ in 0..steps {
            let g = PureGaussian.grad_neg_log_lik(&w) + lambda * &w;
            w = ula_step(&w, &g, delta, &mut rng).unwrap();
            acc += w[(0, 0)] * w[(0, 0)];
        }
        let expect = (1.0 / lambda) / (1.0 - delta * lambda / 2.0);
        assert!((acc / steps as f64 / expect - 1.0).abs() < 0.05);
    }

    #[test]
    fn ula_noise_free_limit_is_euler_step() {
        let w = DMatrix::from_element(2, 2, 1.5);
        let g = DMatrix::from_element(2, 2, 3.0);
        let a = ula_step(&w, &g, 1e-14, &mut Rng::seed_from_u64(2)).unwrap();
        assert!((a - &w).abs().max() < 1e-6);
        let b = ula_step(&w, &g, 0.1, &mut Rng::seed_from_u64(3)).unwrap();
        let c = ula_step(&w, &g, 0.1, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn non_finite_state_is_reported() {
        let w = DMatrix::from_element(1, 1, f64::MAX);
        let g = DMatrix::from_element(1, 1, -f64::MAX);
        assert!(matches!(ula_step(&w, &g, 10.0, &mut Rng::seed_from_u64(4)), Err(Error::NonFiniteState)));
    }

    #[test]
    fn soul_recovers_conjugate_mmle() {
        let (target, mmle) = gaussian_toy(200, 1.0, 5);
        let cfg = SoulConfig::default();
        let trace = soul_estimate_lambda(&target, &DMatrix::zeros(1, 1), 1.0, &cfg, &mut Rng::seed_from_u64(6)).unwrap();
        assert!((trace.final_estimate / mmle - 1.0).abs() < 0.1, "{} vs {mmle}", trace.final_estimate);
        assert!(!trace.saturated);
        assert!(trace.lambda_path.iter().all(|l| (1e-4..=1e4).contains(l)));
    }

    #[test]
    fn noiseless_update_is_stationary_at_fixed_point() {
        // with a frozen draw of norm r^2 the log-scale update vanishes at dim / r^2
        let (dim, r2) = (6.0, 1.7);
        let lambda: f64 = dim / r2;
        let grad = (dim - lambda * r2) / 2.0;
        assert!(grad.abs() < 1e-12);
        assert!(((lambda.ln() + pga_step(3, 0.5, 0.8) * grad).exp() - lambda).abs() < 1e-12);
    }

    #[test]
    fn saturation_is_flagged() {
        let (target, _) = gaussian_toy(200, 1.0, 7);
        let cfg = SoulConfig { theta_bounds: [5.0, 10.0], ..SoulConfig::default() };
        let trace = soul_estimate_lambda(&target, &DMatrix::zeros(1, 1), 5.0, &cfg, &mut Rng::seed_from_u64(8)).unwrap();
        assert!(trace.saturated);
        assert!((trace.final_estimate - 5.0).abs() < 1e-9);
    }
}

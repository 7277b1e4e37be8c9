//! Initialization, the per-rung EM loop, the ladder driver, pruning and
//! binarization.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::em::estep::{e_step_gamma, e_step_gamma_tilde_unsupervised, e_step_lambda};
use crate::em::mstep::{m_step_sigma, m_step_sparsity, m_step_tau, m_step_z};
use crate::em::objective::eval_log_posterior;
use crate::em::{ResolvedPriors, Rung};
use crate::error::{Error, Result};
use crate::model::{
    column_variances, validate_inputs, Bicluster, BiclusterSet, EmState, ExpressionMatrix, FitConfig, OutcomeBlock,
    OutcomeMatrix, PriorVariant, Stick,
};
use crate::outcome::{agd_minimize, draw_indicator_samples, e_step_gamma_tilde_guided, RidgeMlr};
use crate::rng::{substream, tags};
use crate::soul::soul_estimate_lambda;

pub const Z_ZERO_TOL: f64 = 1e-10;
pub const MEMBERSHIP_TOL: f64 = 0.025;
const INIT_TAU: f64 = 100.0;

/// Starting state: standard normal loadings, all variances 100, inclusion
/// weights one half, uniform stick breaks sorted in decreasing order.
pub fn init_state(x: &ExpressionMatrix, y: Option<&OutcomeMatrix>, cfg: &FitConfig) -> EmState {
    let (n, g, k) = (x.n_samples(), x.n_genes(), cfg.k_init);
    let mut rng = substream(cfg.seed, tags::INIT, 0);
    let z = DMatrix::from_fn(g, k, |_, _| StandardNormal.sample(&mut rng));
    let stick = match cfg.prior_variant {
        PriorVariant::BB => Stick::Weights(DVector::from_element(k, 0.5)),
        PriorVariant::IBP | PriorVariant::PY => {
            let mut nu: Vec<f64> = (0..k).map(|_| rng.random::<f64>().max(1e-10)).collect();
            nu.sort_by(|a, b| b.total_cmp(a));
            Stick::Breaks(DVector::from_vec(nu))
        }
    };
    let outcome = y.filter(|_| cfg.outcome_guided).map(|y| OutcomeBlock {
        w: DMatrix::zeros(k + 1, y.n_classes()),
        lambda_w: cfg.soul.lambda_init,
        reference: y.reference_class,
    });
    EmState {
        z,
        lambda_mean: DMatrix::zeros(n, k),
        lambda_second: vec![DMatrix::from_diagonal_element(k, k, INIT_TAU); n],
        tau: DMatrix::from_element(n, k, INIT_TAU),
        sigma2: column_variances(&x.values),
        gamma_tilde: DMatrix::from_element(n, k, 0.5),
        gamma: DMatrix::from_element(g, k, 0.5),
        theta: DVector::from_element(k, 0.5),
        stick,
        outcome,
    }
}

/// Drops columns whose loadings are all (numerically) zero or whose sample
/// memberships are all below `membership_tol`. Returns the reduced state and
/// the surviving column indices.
pub fn prune(state: &EmState, z_tol: f64, membership_tol: f64) -> (EmState, Vec<usize>) {
    let keep: Vec<usize> = (0..state.k())
        .filter(|&c| {
            state.z.column(c).amax() >= z_tol && state.gamma_tilde.column(c).iter().any(|&v| v >= membership_tol)
        })
        .collect();
    if keep.len() == state.k() {
        return (state.clone(), keep);
    }
    let cols = |m: &DMatrix<f64>| m.select_columns(&keep);
    let pick = |v: &DVector<f64>| DVector::from_iterator(keep.len(), keep.iter().map(|&c| v[c]));
    let outcome = state.outcome.as_ref().map(|o| {
        let rows: Vec<usize> = std::iter::once(0).chain(keep.iter().map(|c| c + 1)).collect();
        OutcomeBlock { w: o.w.select_rows(&rows), ..o.clone() }
    });
    let reduced = EmState {
        z: cols(&state.z),
        lambda_mean: cols(&state.lambda_mean),
        lambda_second: state.lambda_second.iter().map(|m| m.select_rows(&keep).select_columns(&keep)).collect(),
        tau: cols(&state.tau),
        sigma2: state.sigma2.clone(),
        gamma_tilde: cols(&state.gamma_tilde),
        gamma: cols(&state.gamma),
        theta: pick(&state.theta),
        stick: state.stick.select(&keep),
        outcome,
    };
    (reduced, keep)
}

/// Sample i is in bicluster k when its membership expectation exceeds one
/// half; gene j when its loading is nonzero. Biclusters empty on either side
/// are dropped.
pub fn binarize(state: &EmState) -> BiclusterSet {
    let biclusters = (0..state.k())
        .filter_map(|c| {
            let samples: Vec<usize> = (0..state.gamma_tilde.nrows()).filter(|&i| state.gamma_tilde[(i, c)] > 0.5).collect();
            let genes: Vec<usize> = (0..state.z.nrows()).filter(|&j| state.z[(j, c)] != 0.0).collect();
            (!samples.is_empty() && !genes.is_empty()).then(|| Bicluster::new(samples, genes))
        })
        .collect();
    BiclusterSet::new(biclusters)
}

#[derive(Clone, Debug)]
pub struct RungResult {
    pub state: EmState,
    pub q_value: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

/// One line of the per-iteration trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub rung: usize,
    pub q_value: f64,
    pub k_current: usize,
    pub max_delta_z: f64,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct RungSummary {
    pub omega0: f64,
    pub omega0_tilde: f64,
    pub iterations: usize,
    pub converged: bool,
    pub q_value: f64,
    pub k_after_prune: usize,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub deadline: Option<Instant>,
    pub record_trace: bool,
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub biclusters: BiclusterSet,
    pub state: EmState,
    pub trace: Vec<TraceRow>,
    pub rungs: Vec<RungSummary>,
    pub xi: f64,
    /// The time budget ran out before the ladder finished.
    pub truncated: bool,
}

struct Runner<'a> {
    x: &'a ExpressionMatrix,
    y: Option<&'a OutcomeMatrix>,
    cfg: &'a FitConfig,
    priors: ResolvedPriors,
    options: &'a FitOptions,
    iteration: u64,
    trace: Vec<TraceRow>,
    truncated: bool,
}

impl Runner<'_> {
    fn guided(&self) -> bool {
        self.cfg.outcome_guided && self.y.is_some()
    }

    fn objective(&self, state: &EmState, rung: Rung) -> Result<f64> {
        let y = if self.guided() { self.y } else { None };
        eval_log_posterior(self.x, y, state, &self.priors, rung, self.cfg.mc_logsumexp_samples, self.cfg.seed)
    }

    fn iterate(&mut self, state: &mut EmState, rung: Rung, step_in_rung: usize) -> Result<()> {
        let cfg = self.cfg;
        let it = self.iteration;
        let (mean, second) = e_step_lambda(self.x, state)?;
        state.lambda_mean = mean;
        state.lambda_second = second;
        state.gamma_tilde = match (self.y, state.outcome.as_ref()) {
            (Some(y), Some(o)) if cfg.outcome_guided => e_step_gamma_tilde_guided(
                y,
                state,
                &o.w,
                rung.omega0_tilde,
                cfg.omega1_tilde,
                cfg.mc_gamma_samples,
                cfg.seed,
                it,
            )?,
            _ => e_step_gamma_tilde_unsupervised(state, rung.omega0_tilde, cfg.omega1_tilde),
        };
        state.gamma = e_step_gamma(state, rung.omega0, cfg.omega1);
        state.z = m_step_z(self.x, state, rung.omega0, cfg.omega1);
        state.sigma2 = m_step_sigma(self.x, state, self.priors.eta, self.priors.xi);
        state.tau = m_step_tau(state, rung.omega0_tilde, cfg.omega1_tilde);
        let (theta, stick) = m_step_sparsity(state, &self.priors.sparsity);
        state.theta = theta;
        state.stick = stick;

        if let (Some(y), true) = (self.y, self.guided()) {
            self.update_outcome(y, state, step_in_rung)?;
        }
        Ok(())
    }

    fn update_outcome(&self, y: &OutcomeMatrix, state: &mut EmState, step_in_rung: usize) -> Result<()> {
        let cfg = self.cfg;
        let it = self.iteration;
        let Some(block) = state.outcome.as_mut() else { return Ok(()) };
        let mut rng = substream(cfg.seed, tags::per_iteration(tags::AGD, it), 0);
        let samples = draw_indicator_samples(&state.gamma_tilde, cfg.mc_grad_samples, &mut rng);
        let classes = y.classes();
        let mut problem = RidgeMlr::new(&classes, y.n_classes(), &samples, block.lambda_w, block.reference);
        let refresh = match cfg.soul_refresh_period {
            None => step_in_rung == 0,
            Some(r) => step_in_rung % r == 0,
        };
        if refresh && state.gamma_tilde.ncols() > 0 {
            let mut soul_rng = substream(cfg.seed, tags::per_iteration(tags::SOUL, it), 0);
            let trace = soul_estimate_lambda(&problem, &block.w, block.lambda_w, &cfg.soul, &mut soul_rng)?;
            block.lambda_w = trace.final_estimate;
            problem.lambda_w = block.lambda_w;
        }
        let delta = 0.95 / problem.lipschitz();
        let zero = DMatrix::zeros(block.w.nrows(), block.w.ncols());
        block.w = agd_minimize(&problem, &zero, cfg.agd_steps, delta).w;
        Ok(())
    }

    fn past_deadline(&self) -> bool {
        self.options.deadline.is_some_and(|d| Instant::now() >= d)
    }

    fn rung(&mut self, mut state: EmState, rung: Rung, rung_index: usize) -> Result<RungResult> {
        let mut converged = false;
        let mut used = 0;
        for step in 0..self.cfg.em_max_iters_per_rung {
            if state.k() == 0 {
                converged = true;
                break;
            }
            if self.past_deadline() {
                self.truncated = true;
                break;
            }
            let old_z = state.z.clone();
            self.iterate(&mut state, rung, step)?;
            self.iteration += 1;
            used += 1;
            let diff = &state.z - &old_z;
            let change = diff.norm() / old_z.norm().max(f64::MIN_POSITIVE);
            if self.options.record_trace {
                self.trace.push(TraceRow {
                    iteration: self.iteration as usize,
                    rung: rung_index,
                    q_value: self.objective(&state, rung)?,
                    k_current: state.k(),
                    max_delta_z: diff.amax(),
                });
            }
            if !state.z.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteState);
            }
            if change < self.cfg.em_tolerance {
                converged = true;
                break;
            }
        }
        let q_value = self.objective(&state, rung)?;
        Ok(RungResult { state, q_value, iterations_used: used, converged })
    }
}

/// EM at a single rung from `state`.
pub fn run_rung(
    x: &ExpressionMatrix,
    y: Option<&OutcomeMatrix>,
    state: EmState,
    omega0: f64,
    omega0_tilde: f64,
    cfg: &FitConfig,
) -> Result<RungResult> {
    let options = FitOptions::default();
    let mut runner = Runner {
        x,
        y,
        cfg,
        priors: ResolvedPriors::from_config(cfg, x)?,
        options: &options,
        iteration: 0,
        trace: Vec::new(),
        truncated: false,
    };
    runner.rung(state, Rung { omega0, omega0_tilde }, 0)
}

pub fn run_sslb(x: &ExpressionMatrix, y: Option<&OutcomeMatrix>, cfg: &FitConfig) -> Result<FitOutput> {
    run_sslb_with(x, y, cfg, &FitOptions::default())
}

/// The full ladder: one warm-started rung per spike rate, pruning after
/// each, then binarization.
pub fn run_sslb_with(
    x: &ExpressionMatrix,
    y: Option<&OutcomeMatrix>,
    cfg: &FitConfig,
    options: &FitOptions,
) -> Result<FitOutput> {
    cfg.validate()?;
    validate_inputs(x, y)?;
    if cfg.outcome_guided && y.is_none() {
        return Err(Error::InvalidConfig("outcome-guided fit needs an outcome matrix".into()));
    }
    let priors = ResolvedPriors::from_config(cfg, x)?;
    let mut runner = Runner { x, y, cfg, priors, options, iteration: 0, trace: Vec::new(), truncated: false };
    let mut state = init_state(x, y, cfg);
    let mut rungs = Vec::with_capacity(cfg.omega0_ladder.len());
    for (r, (&omega0, &omega0_tilde)) in cfg.omega0_ladder.iter().zip(&cfg.omega0_tilde_ladder).enumerate() {
        let result = runner.rung(state, Rung { omega0, omega0_tilde }, r)?;
        let (pruned, _) = prune(&result.state, Z_ZERO_TOL, MEMBERSHIP_TOL);
        log::debug!(
            "rung {r} (omega0 = {omega0}): {} iterations, K = {}, Q = {:.6e}",
            result.iterations_used,
            pruned.k(),
            result.q_value
        );
        rungs.push(RungSummary {
            omega0,
            omega0_tilde,
            iterations: result.iterations_used,
            converged: result.converged,
            q_value: result.q_value,
            k_after_prune: pruned.k(),
        });
        state = pruned;
        if runner.truncated {
            log::warn!("time budget exhausted during rung {r}; returning the current state");
            break;
        }
    }
    Ok(FitOutput {
        biclusters: binarize(&state),
        state,
        trace: runner.trace,
        rungs,
        xi: priors.xi,
        truncated: runner.truncated,
    })
}

//! Maximization steps.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::em::estep::{logit, sigmoid};
use crate::model::{EmState, ExpressionMatrix, PriorVariant, Stick};

/// Probabilities produced by the sparsity updates are kept inside
/// [PROB_EPS, 1 - PROB_EPS].
pub const PROB_EPS: f64 = 1e-10;
pub const VARIANCE_FLOOR: f64 = 1e-12;

fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Spike-and-slab Laplace prior of one loading column, up to a constant.
#[derive(Clone, Copy, Debug)]
pub struct SslPrior {
    ln_slab: f64,
    ln_spike: f64,
    omega0: f64,
    omega1: f64,
}

impl SslPrior {
    pub fn new(theta: f64, omega0: f64, omega1: f64) -> Self {
        SslPrior {
            ln_slab: theta.ln() + omega1.ln(),
            ln_spike: (-theta).ln_1p() + omega0.ln(),
            omega0,
            omega1,
        }
    }

    /// ln(theta w1 e^{-w1 u} + (1 - theta) w0 e^{-w0 u}) for u = |z|.
    pub fn ln_density(&self, u: f64) -> f64 {
        log_add(self.ln_slab - self.omega1 * u, self.ln_spike - self.omega0 * u)
    }

    /// Posterior slab weight of a loading with magnitude u.
    pub fn slab_weight(&self, u: f64) -> f64 {
        sigmoid(self.ln_slab - self.ln_spike + (self.omega0 - self.omega1) * u)
    }

    /// Adaptive penalty: minus the derivative of `ln_density` at u > 0.
    pub fn penalty(&self, u: f64) -> f64 {
        let p = self.slab_weight(u);
        self.omega1 * p + self.omega0 * (1.0 - p)
    }
}

/// Maximizes -(a z^2 - 2 r z) / (2 s) + ln pi(|z|) over the real line, where
/// pi is the spike-and-slab Laplace mixture. Returns the global maximizer.
pub fn ssl_coordinate_max(a: f64, r: f64, s: f64, prior: &SslPrior) -> f64 {
    if a <= 0.0 || r == 0.0 {
        return 0.0;
    }
    let sign = r.signum();
    let r = r.abs();
    let (w0, w1) = (prior.omega0, prior.omega1);
    if r <= s * w0.min(w1) {
        return 0.0;
    }
    let h = |u: f64| r - a * u - s * prior.penalty(u);
    let dh = |u: f64| {
        let p = prior.slab_weight(u);
        -a + s * (w0 - w1).powi(2) * p * (1.0 - p)
    };
    let obj = |u: f64| (-a * u * u + 2.0 * r * u) / (2.0 * s) + prior.ln_density(u);

    let upper = r / a;
    let mut knots = vec![0.0, upper];
    if w0 != w1 {
        let c = a / (s * (w0 - w1).powi(2));
        if c < 0.25 {
            let disc = (1.0 - 4.0 * c).sqrt();
            let l0 = prior.ln_slab - prior.ln_spike;
            for p in [0.5 * (1.0 - disc), 0.5 * (1.0 + disc)] {
                let u = (logit(p) - l0) / (w0 - w1);
                if u.is_finite() && u > 0.0 && u < upper {
                    knots.push(u);
                }
            }
        }
    }
    knots.sort_by(f64::total_cmp);

    let mut best = (0.0, obj(0.0));
    let mut consider = |u: f64| {
        let v = obj(u);
        if v > best.1 {
            best = (u, v);
        }
    };
    for pair in knots.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        consider(hi);
        if lo < hi && h(lo) > 0.0 && h(hi) < 0.0 {
            consider(decreasing_root(&h, &dh, lo, hi));
        }
    }
    sign * best.0
}

/// Root of a decreasing function bracketed by h(lo) > 0 > h(hi), by Newton
/// steps that fall back to bisection when they leave the bracket.
fn decreasing_root(h: &impl Fn(f64) -> f64, dh: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let hx = h(x);
        if hx > 0.0 {
            lo = x;
        } else if hx < 0.0 {
            hi = x;
        } else {
            return x;
        }
        let d = dh(x);
        let newton = x - hx / d;
        let next = if d < 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= 1e-15 * x.abs().max(f64::MIN_POSITIVE) || hi - lo <= 1e-15 * hi {
            return next;
        }
        x = next;
    }
    x
}

/// Sum over samples of the posterior second moments.
pub fn second_moment_sum(state: &EmState) -> DMatrix<f64> {
    let k = state.k();
    state.lambda_second.iter().fold(DMatrix::zeros(k, k), |acc, m| acc + m)
}

/// One coordinate sweep over each gene's loadings; every coordinate moves to
/// the exact maximizer of its penalized objective.
pub fn m_step_z(x: &ExpressionMatrix, state: &EmState, omega0: f64, omega1: f64) -> DMatrix<f64> {
    let (g, k) = state.z.shape();
    let s = second_moment_sum(state);
    let bz = x.values.transpose() * &state.lambda_mean;
    let priors: Vec<SslPrior> = state.theta.iter().map(|&t| SslPrior::new(t, omega0, omega1)).collect();

    let rows: Vec<Vec<f64>> = (0..g)
        .into_par_iter()
        .map(|j| {
            let mut z: Vec<f64> = state.z.row(j).iter().copied().collect();
            let mut sz: Vec<f64> = (0..k).map(|c| (0..k).map(|l| s[(c, l)] * z[l]).sum()).collect();
            for c in 0..k {
                let a = s[(c, c)];
                let r = bz[(j, c)] - sz[c] + a * z[c];
                let new = ssl_coordinate_max(a, r, state.sigma2[j], &priors[c]);
                let delta = new - z[c];
                if delta != 0.0 {
                    for (l, v) in sz.iter_mut().enumerate() {
                        *v += delta * s[(l, c)];
                    }
                    z[c] = new;
                }
            }
            z
        })
        .collect();
    DMatrix::from_fn(g, k, |j, c| rows[j][c])
}

/// Expected residual sum of squares of every gene,
/// E||x_j - Lambda z_j||^2 under the current loading posterior.
pub fn expected_rss(x: &ExpressionMatrix, state: &EmState) -> DVector<f64> {
    let resid = &x.values - &state.lambda_mean * state.z.transpose();
    let cov_sum = second_moment_sum(state) - state.lambda_mean.transpose() * &state.lambda_mean;
    let zc = &state.z * &cov_sum;
    DVector::from_fn(state.z.nrows(), |j, _| {
        let quad: f64 = zc.row(j).dot(&state.z.row(j));
        resid.column(j).norm_squared() + quad.max(0.0)
    })
}

pub fn m_step_sigma(x: &ExpressionMatrix, state: &EmState, eta: f64, xi: f64) -> DVector<f64> {
    let n = x.n_samples() as f64;
    expected_rss(x, state).map(|r| ((eta * xi + r) / (n + eta + 2.0)).max(VARIANCE_FLOOR))
}

pub fn m_step_tau(state: &EmState, omega0_tilde: f64, omega1_tilde: f64) -> DMatrix<f64> {
    let (n, k) = state.tau.shape();
    let (s0, s1) = (omega0_tilde * omega0_tilde, omega1_tilde * omega1_tilde);
    DMatrix::from_fn(n, k, |i, c| {
        let m2 = state.lambda_second[i][(c, c)];
        let g = state.gamma_tilde[(i, c)];
        let w2 = (1.0 - g) * s0 + g * s1;
        (2.0 * m2 / (1.0 + (1.0 + 4.0 * w2 * m2).sqrt())).max(VARIANCE_FLOOR)
    })
}

/// Gene-side inclusion weights under independent Beta(alpha, 1) priors.
pub fn m_step_theta(gamma: &DMatrix<f64>, alpha: f64) -> DVector<f64> {
    let g = gamma.nrows() as f64;
    DVector::from_iterator(
        gamma.ncols(),
        gamma.column_iter().map(|col| clip_prob((col.sum() + alpha - 1.0) / (g + alpha - 1.0))),
    )
}

/// Sample-side inclusion weights under Beta(a, b) priors.
pub fn m_step_theta_tilde_bb(gamma_tilde: &DMatrix<f64>, a: f64, b: f64) -> DVector<f64> {
    let n = gamma_tilde.nrows() as f64;
    DVector::from_iterator(
        gamma_tilde.ncols(),
        gamma_tilde.column_iter().map(|col| clip_prob((col.sum() + a - 1.0) / (n + a + b - 2.0))),
    )
}

/// Expected-complete-data objective of the stick breaks:
/// sum_k [S_k ln theta_k + (N - S_k) ln(1 - theta_k)]
///   + sum_k [(alpha + k d - 1) ln nu_k - d ln(1 - nu_k)],
/// with theta_k the running product of the breaks and k counted from one.
pub fn stick_objective(nu: &[f64], counts: &[f64], n: f64, alpha: f64, d: f64) -> f64 {
    let mut theta = 1.0;
    let mut total = 0.0;
    for (k, (&v, &s)) in nu.iter().zip(counts).enumerate() {
        theta *= v;
        total += s * theta.ln() + (n - s) * (-theta).ln_1p();
        total += (alpha + (k + 1) as f64 * d - 1.0) * v.ln() - d * (-v).ln_1p();
    }
    total
}

/// The objective of break k with every other break held fixed, up to a
/// constant.
fn stick_coordinate_objective(nu: &[f64], counts: &[f64], n: f64, alpha: f64, d: f64, k: usize, v: f64) -> f64 {
    let tail_count: f64 = counts[k..].iter().sum();
    let mut total = (tail_count + alpha + (k + 1) as f64 * d - 1.0) * v.ln() - d * (-v).ln_1p();
    let mut c: f64 = nu[..k].iter().product();
    for l in k..nu.len() {
        if l > k {
            c *= nu[l];
        }
        total += (n - counts[l]) * (-(c * v)).ln_1p();
    }
    total
}

/// Maximizes `f` over [lo, hi] by golden-section search.
pub(crate) fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iters {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        }
    }
    if f1 > f2 { x1 } else { x2 }
}

/// Bounded maximization of break k: a coarse logit-space grid locates the
/// best bracket, golden-section search refines it.
pub fn update_stick_coordinate(nu: &[f64], counts: &[f64], n: f64, alpha: f64, d: f64, k: usize) -> f64 {
    let f = |t: f64| stick_coordinate_objective(nu, counts, n, alpha, d, k, sigmoid(t));
    let (lo, hi) = (logit(PROB_EPS), logit(1.0 - PROB_EPS));
    let steps = 46;
    let grid: Vec<f64> = (0..=steps).map(|s| lo + (hi - lo) * s as f64 / steps as f64).collect();
    let best = (0..grid.len()).max_by(|&a, &b| f(grid[a]).total_cmp(&f(grid[b]))).unwrap_or(0);
    let left = grid[best.saturating_sub(1)];
    let right = grid[(best + 1).min(steps)];
    let t = golden_max(&f, left, right, 80);
    let v = sigmoid(t);
    let fb = f(grid[best]);
    clip_prob(if f(t) >= fb { v } else { sigmoid(grid[best]) })
}

/// Coordinate ascent over the stick breaks.
pub fn update_sticks(nu: &DVector<f64>, gamma_tilde: &DMatrix<f64>, alpha: f64, d: f64, sweeps: usize) -> DVector<f64> {
    let counts: Vec<f64> = gamma_tilde.column_iter().map(|c| c.sum()).collect();
    let n = gamma_tilde.nrows() as f64;
    let mut v: Vec<f64> = nu.iter().copied().collect();
    for _ in 0..sweeps {
        for k in 0..v.len() {
            v[k] = update_stick_coordinate(&v, &counts, n, alpha, d, k);
        }
    }
    DVector::from_vec(v)
}

/// Hyperparameters of the sparsity updates.
#[derive(Clone, Copy, Debug)]
pub struct SparsityPriors {
    pub variant: PriorVariant,
    pub alpha: f64,
    pub a_tilde: f64,
    pub b_tilde: f64,
    pub alpha_tilde: f64,
    pub d: f64,
}

pub fn m_step_sparsity(state: &EmState, priors: &SparsityPriors) -> (DVector<f64>, Stick) {
    let theta = m_step_theta(&state.gamma, priors.alpha);
    let stick = match priors.variant {
        PriorVariant::BB => Stick::Weights(m_step_theta_tilde_bb(&state.gamma_tilde, priors.a_tilde, priors.b_tilde)),
        PriorVariant::IBP | PriorVariant::PY => {
            let d = if priors.variant == PriorVariant::PY { priors.d } else { 0.0 };
            Stick::Breaks(update_sticks(state.stick.values(), &state.gamma_tilde, priors.alpha_tilde, d, 2))
        }
    };
    (theta, stick)
}

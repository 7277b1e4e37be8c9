//! Outcome guidance: a multinomial-logistic model of the class labels on the
//! sample memberships, the Monte Carlo guided E-step for the memberships,
//! and accelerated gradient fitting of the regression weights.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;

use crate::em::estep::{sigmoid, tau_log_odds};
use crate::error::{Error, Result};
use crate::model::{EmState, OutcomeMatrix};
use crate::rng::{substream, tags, Rng};

/// One draw of the augmented membership matrix [1 | G]: for each sample the
/// indices of biclusters it belongs to. The intercept column is implicit.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorSample {
    pub k: usize,
    pub active: Vec<Vec<usize>>,
}

impl IndicatorSample {
    pub fn n(&self) -> usize {
        self.active.len()
    }

    /// Dense N x (K+1) matrix with the intercept column first.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n(), self.k + 1);
        for (i, act) in self.active.iter().enumerate() {
            m[(i, 0)] = 1.0;
            for &c in act {
                m[(i, c + 1)] = 1.0;
            }
        }
        m
    }

    pub fn from_dense(g: &DMatrix<f64>) -> Self {
        let active = g.row_iter().map(|r| (0..g.ncols()).filter(|&c| r[c] > 0.5).collect()).collect();
        IndicatorSample { k: g.ncols(), active }
    }
}

fn draw_row(probs: impl Iterator<Item = f64>, rng: &mut Rng) -> Vec<usize> {
    probs.enumerate().filter_map(|(c, p)| (rng.random::<f64>() < p).then_some(c)).collect()
}

/// Independent Bernoulli draw of every membership.
pub fn draw_indicator_sample(gamma_tilde: &DMatrix<f64>, rng: &mut Rng) -> IndicatorSample {
    let active = gamma_tilde.row_iter().map(|r| draw_row(r.iter().copied(), rng)).collect();
    IndicatorSample { k: gamma_tilde.ncols(), active }
}

pub fn draw_indicator_samples(gamma_tilde: &DMatrix<f64>, count: usize, rng: &mut Rng) -> Vec<IndicatorSample> {
    (0..count).map(|_| draw_indicator_sample(gamma_tilde, rng)).collect()
}

fn logits(w: &DMatrix<f64>, active: &[usize]) -> Vec<f64> {
    let mut l = vec![0.0; w.ncols()];
    fill_logits(w, active, &mut l);
    l
}

fn fill_logits(w: &DMatrix<f64>, active: &[usize], out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        *o = w[(0, c)] + active.iter().map(|&k| w[(k + 1, c)]).sum::<f64>();
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Class probabilities of one sample given its active biclusters.
pub fn class_probabilities(w: &DMatrix<f64>, active: &[usize]) -> Vec<f64> {
    let l = logits(w, active);
    let lse = log_sum_exp(&l);
    l.iter().map(|v| (v - lse).exp()).collect()
}

/// N x C class probabilities for one augmented membership draw.
pub fn mlr_probabilities(w: &DMatrix<f64>, sample: &IndicatorSample) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(sample.n(), w.ncols());
    for (i, act) in sample.active.iter().enumerate() {
        for (c, v) in class_probabilities(w, act).into_iter().enumerate() {
            p[(i, c)] = v;
        }
    }
    p
}

/// Monte Carlo estimate of E[log sum_c exp(w_c' g_i)] for every sample, with
/// memberships drawn from `gamma_tilde`.
pub fn mc_log_sum_exp(
    w: &DMatrix<f64>,
    gamma_tilde: &DMatrix<f64>,
    samples: usize,
    rng: &mut Rng,
) -> Result<nalgebra::DVector<f64>> {
    if samples == 0 {
        return Err(Error::InvalidConfig("Monte Carlo sample count must be positive".into()));
    }
    let n = gamma_tilde.nrows();
    let mut out = nalgebra::DVector::zeros(n);
    for _ in 0..samples {
        for (i, row) in gamma_tilde.row_iter().enumerate() {
            let act = draw_row(row.iter().copied(), rng);
            out[i] += log_sum_exp(&logits(w, &act));
        }
    }
    Ok(out / samples as f64)
}

/// Monte Carlo estimate of the joint quantity
/// sum_{v : v_k = value} P(v) p(class | v), from `m` draws of the membership
/// row `probs`. Fails when no draw has v_k = value.
pub fn estimate_class_likelihood(
    probs: &[f64],
    k: usize,
    value: bool,
    class: usize,
    w: &DMatrix<f64>,
    m: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut hits = 0;
    for _ in 0..m {
        let act = draw_row(probs.iter().copied(), rng);
        if act.contains(&k) == value {
            sum += class_probabilities(w, &act)[class];
            hits += 1;
        }
    }
    if hits == 0 {
        return Err(Error::DegenerateConditioning { k, value: value as u8 });
    }
    Ok(sum / m as f64)
}

/// Source of the class likelihoods p(y_i | g_ik = 0) and p(y_i | g_ik = 1)
/// used by the guided E-step.
pub trait ClassLikelihood: Sync {
    /// `probs` are the prior membership probabilities of sample i; returns
    /// one `[given 0, given 1]` pair per bicluster.
    fn conditionals(&self, i: usize, probs: &[f64], rng: &mut Rng) -> Result<Vec<[f64; 2]>>;
}

/// Monte Carlo class likelihoods under the current regression weights: the
/// mean class probability over the draws that share the conditioning value.
pub struct MonteCarloLikelihood<'a> {
    pub w: &'a DMatrix<f64>,
    pub classes: &'a [usize],
    pub draws: usize,
}

impl ClassLikelihood for MonteCarloLikelihood<'_> {
    fn conditionals(&self, i: usize, probs: &[f64], rng: &mut Rng) -> Result<Vec<[f64; 2]>> {
        let k = probs.len();
        let class = self.classes[i];
        let mut sums = vec![[0.0f64; 2]; k];
        let mut hits = vec![[0usize; 2]; k];
        let mut member = vec![false; k];
        for _ in 0..self.draws {
            let act = draw_row(probs.iter().copied(), rng);
            let q = class_probabilities(self.w, &act)[class];
            member.iter_mut().for_each(|m| *m = false);
            act.iter().for_each(|&c| member[c] = true);
            for c in 0..k {
                let v = member[c] as usize;
                sums[c][v] += q;
                hits[c][v] += 1;
            }
        }
        let fallback = 1.0 / self.w.ncols() as f64;
        Ok((0..k)
            .map(|c| {
                let mut out = [fallback; 2];
                for v in 0..2 {
                    if hits[c][v] > 0 {
                        out[v] = sums[c][v] / hits[c][v] as f64;
                    }
                }
                out
            })
            .collect())
    }
}

/// Guided update of the sample memberships: the prior odds from the
/// variances and inclusion weights, times the likelihood ratio of the
/// observed class.
pub fn e_step_gamma_tilde_with<L: ClassLikelihood>(
    lik: &L,
    state: &EmState,
    omega0_tilde: f64,
    omega1_tilde: f64,
    seed: u64,
    iteration: u64,
) -> Result<DMatrix<f64>> {
    let inclusion = state.stick.inclusion();
    let (n, k) = state.tau.shape();
    let tag = tags::per_iteration(tags::GUIDED_E, iteration);
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let odds: Vec<f64> =
                (0..k).map(|c| tau_log_odds(state.tau[(i, c)], inclusion[c], omega0_tilde, omega1_tilde)).collect();
            let probs: Vec<f64> = odds.iter().map(|&o| sigmoid(o)).collect();
            let mut rng = substream(seed, tag, i as u64);
            let cond = lik.conditionals(i, &probs, &mut rng)?;
            Ok((0..k)
                .map(|c| {
                    let [l0, l1] = cond[c];
                    if l0 <= 0.0 && l1 <= 0.0 {
                        probs[c]
                    } else {
                        sigmoid(l1.ln() - l0.ln() + odds[c])
                    }
                })
                .collect())
        })
        .collect();
    let mut out = DMatrix::zeros(n, k);
    for (i, r) in rows.into_iter().enumerate() {
        for (c, v) in r?.into_iter().enumerate() {
            out[(i, c)] = v;
        }
    }
    Ok(out)
}

pub fn e_step_gamma_tilde_guided(
    y: &OutcomeMatrix,
    state: &EmState,
    w: &DMatrix<f64>,
    omega0_tilde: f64,
    omega1_tilde: f64,
    draws: usize,
    seed: u64,
    iteration: u64,
) -> Result<DMatrix<f64>> {
    let classes = y.classes();
    let lik = MonteCarloLikelihood { w, classes: &classes, draws };
    e_step_gamma_tilde_with(&lik, state, omega0_tilde, omega1_tilde, seed, iteration)
}

/// Ridge-penalized multinomial negative log-likelihood averaged over a fixed
/// set of membership draws:
/// F(W) = (1/J) sum_j sum_i [lse(W' g_ij) - W_{c_i}' g_ij] + lambda/2 ||W||^2.
/// The reference class column is pinned at zero.
pub struct RidgeMlr<'a> {
    pub classes: &'a [usize],
    pub n_classes: usize,
    pub samples: &'a [IndicatorSample],
    pub lambda_w: f64,
    pub reference: usize,
    /// Distinct (active set, class) rows with their weight count / J; the
    /// sums over draws and samples collapse onto these.
    patterns: Vec<(Vec<usize>, usize, f64)>,
}

impl<'a> RidgeMlr<'a> {
    pub fn new(
        classes: &'a [usize],
        n_classes: usize,
        samples: &'a [IndicatorSample],
        lambda_w: f64,
        reference: usize,
    ) -> Self {
        let mut counts: BTreeMap<(&[usize], usize), usize> = BTreeMap::new();
        for s in samples {
            for (act, &c) in s.active.iter().zip(classes) {
                *counts.entry((act.as_slice(), c)).or_default() += 1;
            }
        }
        let j = samples.len().max(1) as f64;
        let patterns = counts.into_iter().map(|((act, c), n)| (act.to_vec(), c, n as f64 / j)).collect();
        RidgeMlr { classes, n_classes, samples, lambda_w, reference, patterns }
    }

    fn k(&self) -> usize {
        self.samples.first().map_or(0, |s| s.k)
    }

    /// Data term without the ridge penalty.
    pub fn neg_log_lik(&self, w: &DMatrix<f64>) -> f64 {
        let mut l = vec![0.0; w.ncols()];
        self.patterns
            .iter()
            .map(|(act, c, weight)| {
                fill_logits(w, act, &mut l);
                weight * (log_sum_exp(&l) - l[*c])
            })
            .sum()
    }

    pub fn value(&self, w: &DMatrix<f64>) -> f64 {
        self.neg_log_lik(w) + 0.5 * self.lambda_w * w.norm_squared()
    }

    pub fn neg_log_lik_gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut grad = DMatrix::zeros(self.k() + 1, self.n_classes);
        let mut d = vec![0.0; w.ncols()];
        for (act, cls, weight) in &self.patterns {
            fill_logits(w, act, &mut d);
            let lse = log_sum_exp(&d);
            for v in d.iter_mut() {
                *v = weight * (*v - lse).exp();
            }
            d[*cls] -= weight;
            for (c, dv) in d.iter().enumerate() {
                grad[(0, c)] += dv;
                for &k in act {
                    grad[(k + 1, c)] += dv;
                }
            }
        }
        grad.column_mut(self.reference).fill(0.0);
        grad
    }

    pub fn gradient(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = self.neg_log_lik_gradient(w) + self.lambda_w * w;
        g.column_mut(self.reference).fill(0.0);
        g
    }

    /// Lipschitz constant of the data-term gradient:
    /// half the top eigenvalue of the averaged Gram matrix of the draws.
    pub fn data_lipschitz(&self) -> f64 {
        0.5 * top_gram_eigenvalue(self.samples)
    }

    pub fn lipschitz(&self) -> f64 {
        self.data_lipschitz() + self.lambda_w
    }

    /// Number of free weights.
    pub fn dim(&self) -> usize {
        (self.k() + 1) * (self.n_classes - 1)
    }
}

/// Largest eigenvalue of (1/J) sum_j G_j' G_j for augmented draws G_j.
pub fn top_gram_eigenvalue(samples: &[IndicatorSample]) -> f64 {
    let Some(first) = samples.first() else { return 0.0 };
    let d = first.k + 1;
    let mut gram = DMatrix::zeros(d, d);
    for s in samples {
        for act in &s.active {
            gram[(0, 0)] += 1.0;
            for &a in act {
                gram[(0, a + 1)] += 1.0;
                gram[(a + 1, 0)] += 1.0;
                for &b in act {
                    gram[(a + 1, b + 1)] += 1.0;
                }
            }
        }
    }
    gram /= samples.len() as f64;
    SymmetricEigen::new(gram).eigenvalues.max()
}

pub fn lipschitz_constant(samples: &[IndicatorSample], lambda_w: f64) -> f64 {
    0.5 * top_gram_eigenvalue(samples) + lambda_w
}

/// Gradient of F at `w` from `draws` fresh membership samples.
pub fn grad_ridge_mlr(
    y: &OutcomeMatrix,
    gamma_tilde: &DMatrix<f64>,
    w: &DMatrix<f64>,
    lambda_w: f64,
    draws: usize,
    rng: &mut Rng,
) -> DMatrix<f64> {
    let samples = draw_indicator_samples(gamma_tilde, draws, rng);
    let classes = y.classes();
    let problem = RidgeMlr::new(&classes, y.n_classes(), &samples, lambda_w, y.reference_class);
    problem.gradient(w)
}

#[derive(Clone, Debug)]
pub struct AgdResult {
    pub w: DMatrix<f64>,
    /// F at the start and after every step.
    pub values: Vec<f64>,
}

/// Nesterov-accelerated gradient descent on F with a monotone restart: a
/// step that increases F is replaced by a plain gradient step from the
/// current point and the momentum is reset.
pub fn agd_minimize(problem: &RidgeMlr, w0: &DMatrix<f64>, steps: usize, delta: f64) -> AgdResult {
    let mut w = w0.clone();
    w.column_mut(problem.reference).fill(0.0);
    let mut prev = w.clone();
    let mut t = 0.0f64;
    let mut f = problem.value(&w);
    let mut values = vec![f];
    for _ in 0..steps {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let v = &w + ((t - 1.0) / t_next) * (&w - &prev);
        let mut cand = &v - delta * problem.gradient(&v);
        cand.column_mut(problem.reference).fill(0.0);
        let mut f_cand = problem.value(&cand);
        if f_cand > f {
            cand = &w - delta * problem.gradient(&w);
            cand.column_mut(problem.reference).fill(0.0);
            f_cand = problem.value(&cand);
            t = 0.0;
            prev = w.clone();
        } else {
            t = t_next;
            prev = w;
        }
        w = cand;
        f = f_cand;
        values.push(f);
    }
    AgdResult { w, values }
}

/// Posterior-mode update of W from zero with a frozen set of draws.
pub fn agd_maximize_w(
    y: &OutcomeMatrix,
    gamma_tilde: &DMatrix<f64>,
    lambda_w: f64,
    draws: usize,
    steps: usize,
    rng: &mut Rng,
) -> AgdResult {
    let samples = draw_indicator_samples(gamma_tilde, draws, rng);
    let classes = y.classes();
    let problem = RidgeMlr::new(&classes, y.n_classes(), &samples, lambda_w, y.reference_class);
    let delta = 0.95 / problem.lipschitz();
    agd_minimize(&problem, &DMatrix::zeros(gamma_tilde.ncols() + 1, y.n_classes()), steps, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::test_support::{random_outcomes, random_state};
    use crate::model::Stick;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::SeedableRng;

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn random_w(k: usize, c: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng(seed);
        let mut w = DMatrix::from_fn(k + 1, c, |_, _| r.random::<f64>() * 2.0 - 1.0);
        w.column_mut(0).fill(0.0);
        w
    }

    #[test]
    fn probabilities_are_softmax_rows() {
        let w = random_w(3, 4, 1);
        let mut r = rng(2);
        let g = DMatrix::from_fn(5, 3, |_, _| 0.5);
        let s = draw_indicator_sample(&g, &mut r);
        let p = mlr_probabilities(&w, &s);
        let dense = s.to_dense() * &w;
        for i in 0..5 {
            assert_relative_eq!(p.row(i).sum(), 1.0, epsilon = 1e-12);
            let z: f64 = dense.row(i).iter().map(|v| v.exp()).sum();
            for c in 0..4 {
                assert_relative_eq!(p[(i, c)], dense[(i, c)].exp() / z, max_relative = 1e-12);
            }
        }
        // zero weights give the uniform distribution
        let p0 = mlr_probabilities(&DMatrix::zeros(4, 4), &s);
        assert!(p0.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn value_matches_direct_double_sum() {
        let y = random_outcomes(9, 3, 8);
        let g = DMatrix::from_fn(9, 3, |i, c| 0.15 + 0.2 * ((2 * i + c) % 4) as f64);
        let samples = draw_indicator_samples(&g, 6, &mut rng(9));
        let classes = y.classes();
        let w = random_w(3, 3, 10);
        let problem = RidgeMlr::new(&classes, 3, &samples, 0.4, 0);
        // literal (1/J) sum_j sum_i [lse - logit of observed class] over dense [1 | G]
        let mut direct = 0.0;
        for s in &samples {
            let dense = s.to_dense();
            for i in 0..9 {
                let eta: Vec<f64> = (0..3)
                    .map(|c| (0..4).map(|k| dense[(i, k)] * w[(k, c)]).sum::<f64>())
                    .collect();
                let lse = eta.iter().map(|e| e.exp()).sum::<f64>().ln();
                direct += lse - eta[classes[i]];
            }
        }
        direct /= samples.len() as f64;
        assert_relative_eq!(problem.neg_log_lik(&w), direct, max_relative = 1e-12);
        assert_relative_eq!(problem.value(&w), direct + 0.2 * w.norm_squared(), max_relative = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let y = random_outcomes(7, 3, 3);
        let mut r = rng(4);
        let g = DMatrix::from_fn(7, 2, |i, c| 0.2 + 0.1 * ((i + c) % 5) as f64);
        let samples = draw_indicator_samples(&g, 4, &mut r);
        let classes = y.classes();
        let problem = RidgeMlr::new(&classes, 3, &samples, 0.3, 0);
        let w = random_w(2, 3, 5);
        let grad = problem.gradient(&w);
        let h = 1e-6;
        for a in 0..3 {
            for c in 1..3 {
                let mut wp = w.clone();
                wp[(a, c)] += h;
                let mut wm = w.clone();
                wm[(a, c)] -= h;
                let fd = (problem.value(&wp) - problem.value(&wm)) / (2.0 * h);
                assert_relative_eq!(grad[(a, c)], fd, epsilon = 1e-7, max_relative = 1e-6);
            }
            assert_eq!(grad[(a, 0)], 0.0);
        }
    }

    #[test]
    fn lipschitz_bounds_hessian() {
        let y = random_outcomes(9, 3, 6);
        let mut r = rng(7);
        let g = DMatrix::from_fn(9, 3, |i, c| if (i + c) % 3 == 0 { 0.9 } else { 0.3 });
        let samples = draw_indicator_samples(&g, 3, &mut r);
        let classes = y.classes();
        let problem = RidgeMlr::new(&classes, 3, &samples, 0.2, 0);
        let l = problem.lipschitz();
        let free: Vec<(usize, usize)> = (0..4).flat_map(|a| (1..3).map(move |c| (a, c))).collect();
        for seed in 0..10 {
            let w = random_w(3, 3, 100 + seed) * 2.0;
            let h = 1e-5;
            let dim = free.len();
            let mut hess = DMatrix::zeros(dim, dim);
            for (col, &(a, c)) in free.iter().enumerate() {
                let mut wp = w.clone();
                wp[(a, c)] += h;
                let mut wm = w.clone();
                wm[(a, c)] -= h;
                let dg = (problem.gradient(&wp) - problem.gradient(&wm)) / (2.0 * h);
                for (row, &(b, d)) in free.iter().enumerate() {
                    hess[(row, col)] = dg[(b, d)];
                }
            }
            let hess = 0.5 * (&hess + hess.transpose());
            let top = SymmetricEigen::new(hess).eigenvalues.max();
            assert!(top <= l + 1e-6, "hessian eigenvalue {top} above bound {l}");
        }
    }

    #[test]
    fn agd_is_monotone_and_reaches_minimizer() {
        let y = random_outcomes(20, 3, 8);
        let mut r = rng(9);
        let g = DMatrix::from_fn(20, 2, |i, c| if (i * (c + 1)) % 3 == 0 { 0.8 } else { 0.2 });
        let samples = draw_indicator_samples(&g, 5, &mut r);
        let classes = y.classes();
        let problem = RidgeMlr::new(&classes, 3, &samples, 0.5, 0);
        let delta = 0.95 / problem.lipschitz();
        let res = agd_minimize(&problem, &DMatrix::zeros(3, 3), 400, delta);
        assert!(res.values.windows(2).all(|p| p[1] <= p[0] + 1e-12));
        // long plain gradient descent as the reference minimizer
        let mut w = DMatrix::zeros(3, 3);
        for _ in 0..20_000 {
            w = &w - delta * problem.gradient(&w);
        }
        assert!((&res.w - &w).abs().max() < 1e-6);
        assert!(problem.gradient(&res.w).abs().max() < 1e-6);
    }

    // exact joint sum over all 2^K membership patterns
    fn enumerate_joint(probs: &[f64], k: usize, value: bool, class: usize, w: &DMatrix<f64>) -> (f64, f64) {
        let kk = probs.len();
        let (mut mean, mut second) = (0.0, 0.0);
        for mask in 0..(1usize << kk) {
            let act: Vec<usize> = (0..kk).filter(|c| mask >> c & 1 == 1).collect();
            let p: f64 = (0..kk).map(|c| if mask >> c & 1 == 1 { probs[c] } else { 1.0 - probs[c] }).product();
            if act.contains(&k) == value {
                let q = class_probabilities(w, &act)[class];
                mean += p * q;
                second += p * q * q;
            }
        }
        (mean, second)
    }

    #[test]
    fn class_likelihood_estimate_matches_enumeration() {
        let probs = [0.3, 0.6, 0.8];
        let w = random_w(3, 3, 10) * 2.0;
        let m = 4000;
        for k in 0..3 {
            for value in [false, true] {
                let (mean, second) = enumerate_joint(&probs, k, value, 1, &w);
                let se = ((second - mean * mean) / m as f64).sqrt();
                let est = estimate_class_likelihood(&probs, k, value, 1, &w, m, &mut rng(11 + k as u64)).unwrap();
                assert!((est - mean).abs() < 4.0 * se, "k={k} v={value} est={est} exact={mean} se={se}");
            }
        }
    }

    #[test]
    fn degenerate_conditioning_is_reported() {
        let w = random_w(2, 2, 12);
        let err = estimate_class_likelihood(&[0.0, 0.5], 0, true, 0, &w, 10, &mut rng(13)).unwrap_err();
        assert!(matches!(err, Error::DegenerateConditioning { k: 0, value: 1 }));
    }

    struct Flat;
    impl ClassLikelihood for Flat {
        fn conditionals(&self, _: usize, probs: &[f64], _: &mut Rng) -> Result<Vec<[f64; 2]>> {
            Ok(vec![[0.37, 0.37]; probs.len()])
        }
    }

    #[test]
    fn flat_likelihood_reduces_to_unsupervised() {
        let state = random_state(6, 4, 3, 14);
        let guided = e_step_gamma_tilde_with(&Flat, &state, 5.0, 1.0, 0, 0).unwrap();
        let plain = crate::em::estep::e_step_gamma_tilde_unsupervised(&state, 5.0, 1.0);
        assert!((guided - plain).abs().max() < 1e-14);
    }

    #[test]
    fn zero_weights_reduce_to_unsupervised() {
        let state = random_state(6, 4, 3, 15);
        let y = random_outcomes(6, 3, 16);
        let w = DMatrix::zeros(4, 3);
        let guided = e_step_gamma_tilde_guided(&y, &state, &w, 5.0, 1.0, 50, 3, 0).unwrap();
        let plain = crate::em::estep::e_step_gamma_tilde_unsupervised(&state, 5.0, 1.0);
        assert!((guided - plain).abs().max() < 1e-12);
    }

    #[test]
    fn guided_posterior_matches_enumeration() {
        let mut state = random_state(1, 2, 3, 17);
        state.tau = DMatrix::from_row_slice(1, 3, &[0.3, 0.05, 0.8]);
        state.stick = Stick::Weights(DVector::from_vec(vec![0.4, 0.5, 0.6]));
        let w = random_w(3, 3, 18) * 3.0;
        let y = OutcomeMatrix::from_classes(&[2], vec!["a".into(), "b".into(), "c".into()], 0).unwrap();
        let draws = 20_000;
        let est = e_step_gamma_tilde_guided(&y, &state, &w, 5.0, 1.0, draws, 19, 0).unwrap();
        let inclusion = state.stick.inclusion();
        let probs: Vec<f64> = (0..3).map(|c| sigmoid(tau_log_odds(state.tau[(0, c)], inclusion[c], 5.0, 1.0))).collect();
        for k in 0..3 {
            let (j1, _) = enumerate_joint(&probs, k, true, 2, &w);
            let (j0, _) = enumerate_joint(&probs, k, false, 2, &w);
            let exact = j1 / (j0 + j1);
            assert!((est[(0, k)] - exact).abs() < 0.02, "k={k} est={} exact={exact}", est[(0, k)]);
        }
    }

    #[test]
    fn mc_lse_matches_enumeration() {
        let w = random_w(2, 3, 20);
        let g = DMatrix::from_row_slice(1, 2, &[0.3, 0.7]);
        let est = mc_log_sum_exp(&w, &g, 20_000, &mut rng(21)).unwrap();
        let mut exact = 0.0;
        for mask in 0..4usize {
            let act: Vec<usize> = (0..2).filter(|c| mask >> c & 1 == 1).collect();
            let p: f64 = (0..2).map(|c| if mask >> c & 1 == 1 { g[(0, c)] } else { 1.0 - g[(0, c)] }).product();
            exact += p * log_sum_exp(&logits(&w, &act));
        }
        assert!((est[0] - exact).abs() < 0.02);
    }
}

//! Synthetic benchmark: sparse loadings and factors with planted
//! biclusters, Gaussian noise, and class labels drawn from a multinomial
//! logistic model on the true sample memberships.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bicluster, BiclusterSet, ExpressionMatrix, OutcomeMatrix};
use crate::outcome::{class_probabilities, IndicatorSample};
use crate::rng::{substream, tags, Rng};

pub const REFERENCE_LABEL: &str = "HC";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_samples: usize,
    pub n_genes: usize,
    pub n_biclusters: usize,
    pub n_classes: usize,
    pub epsilon: f64,
    pub informative: bool,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_samples: 300,
            n_genes: 1000,
            n_biclusters: 15,
            n_classes: 3,
            epsilon: 0.25,
            informative: true,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.n_samples < 20 {
            return bad("n_samples must be at least 20");
        }
        if self.n_genes < 50 {
            return bad("n_genes must be at least 50");
        }
        if self.n_biclusters == 0 {
            return bad("n_biclusters must be at least 1");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        Ok(())
    }

    /// Class labels in sorted order: the healthy reference plus D1, D2, ...
    pub fn class_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = std::iter::once(REFERENCE_LABEL.to_string())
            .chain((1..self.n_classes).map(|c| format!("D{c}")))
            .collect();
        labels.sort();
        labels
    }
}

#[derive(Clone, Debug)]
pub struct SimulatedDataset {
    pub x: ExpressionMatrix,
    pub y: OutcomeMatrix,
    pub truth: BiclusterSet,
    pub true_lambda: DMatrix<f64>,
    pub true_z: DMatrix<f64>,
    pub true_w: DMatrix<f64>,
    pub seed: u64,
}

/// Sparse n x k matrix: column c has a uniform number of members in
/// `min..=max`, member values N(+-2, 1) with a per-column random sign, and
/// N(0, 0.2^2) elsewhere. Returns the matrix and the member index sets.
fn sparse_block(n: usize, k: usize, min: usize, max: usize, rng: &mut Rng) -> (DMatrix<f64>, Vec<Vec<usize>>) {
    let background = Normal::new(0.0, 0.2).expect("valid sd");
    let mut m = DMatrix::from_fn(n, k, |_, _| background.sample(rng));
    let mut sets = Vec::with_capacity(k);
    for c in 0..k {
        let size = rng.random_range(min..=max.min(n));
        let sign = if rng.random::<bool>() { 2.0 } else { -2.0 };
        let mut members = sample(rng, n, size).into_vec();
        members.sort_unstable();
        for &i in &members {
            let e: f64 = StandardNormal.sample(rng);
            m[(i, c)] = sign + e;
        }
        sets.push(members);
    }
    (m, sets)
}

pub fn simulate_loadings(n: usize, k: usize, rng: &mut Rng) -> (DMatrix<f64>, Vec<Vec<usize>>) {
    sparse_block(n, k, 5, 20, rng)
}

pub fn simulate_factors(g: usize, k: usize, rng: &mut Rng) -> (DMatrix<f64>, Vec<Vec<usize>>) {
    sparse_block(g, k, 10, 50, rng)
}

/// (K+1) x C outcome weights. Informative: intercepts ln(eps), one random
/// non-reference cell per bicluster row set to ln(1/eps). Otherwise small
/// N(0, 0.01^2) jitter. The reference column is zero in both regimes.
pub fn build_weight_matrix(k: usize, c: usize, epsilon: f64, informative: bool, reference: usize, rng: &mut Rng) -> DMatrix<f64> {
    let mut w = if informative {
        let mut w = DMatrix::zeros(k + 1, c);
        w.row_mut(0).fill(epsilon.ln());
        let others: Vec<usize> = (0..c).filter(|&l| l != reference).collect();
        for r in 1..=k {
            let col = others[rng.random_range(0..others.len())];
            w[(r, col)] = (1.0 / epsilon).ln();
        }
        w
    } else {
        let jitter = Normal::new(0.0, 0.01).expect("valid sd");
        DMatrix::from_fn(k + 1, c, |_, _| jitter.sample(rng))
    };
    w.column_mut(reference).fill(0.0);
    w
}

/// Draws one class per sample from the multinomial logistic model on its
/// true memberships.
pub fn simulate_outcomes(
    w: &DMatrix<f64>,
    memberships: &IndicatorSample,
    labels: Vec<String>,
    reference: usize,
    rng: &mut Rng,
) -> Result<OutcomeMatrix> {
    let classes: Vec<usize> = memberships
        .active
        .iter()
        .map(|act| {
            let p = class_probabilities(w, act);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            p.iter().position(|v| {
                acc += v;
                u < acc
            })
            .unwrap_or(p.len() - 1)
        })
        .collect();
    OutcomeMatrix::from_classes(&classes, labels, reference)
}

pub fn simulate_dataset(cfg: &SimulationConfig) -> Result<SimulatedDataset> {
    cfg.validate()?;
    let (n, g, k) = (cfg.n_samples, cfg.n_genes, cfg.n_biclusters);
    let mut rng = substream(cfg.seed, tags::SIM_STRUCTURE, 0);
    let (true_lambda, sample_sets) = simulate_loadings(n, k, &mut rng);
    let (true_z, gene_sets) = simulate_factors(g, k, &mut rng);
    let mut noise_rng = substream(cfg.seed, tags::SIM_STRUCTURE, 1);
    let noise = DMatrix::from_fn(n, g, |_, _| StandardNormal.sample(&mut noise_rng));
    let values = &true_lambda * true_z.transpose() + noise;
    let x = ExpressionMatrix::new(
        values,
        (1..=n).map(|i| format!("S{i}")).collect(),
        (1..=g).map(|j| format!("G{j}")).collect(),
    )?;

    let labels = cfg.class_labels();
    let reference = labels.iter().position(|l| l == REFERENCE_LABEL).unwrap_or(0);
    let mut w_rng = substream(cfg.seed, tags::SIM_WEIGHTS, cfg.informative as u64);
    let true_w = build_weight_matrix(k, cfg.n_classes, cfg.epsilon, cfg.informative, reference, &mut w_rng);
    let mut member_rows = vec![Vec::new(); n];
    for (c, set) in sample_sets.iter().enumerate() {
        for &i in set {
            member_rows[i].push(c);
        }
    }
    let memberships = IndicatorSample { k, active: member_rows };
    let mut y_rng = substream(cfg.seed, tags::SIM_OUTCOMES, cfg.informative as u64);
    let y = simulate_outcomes(&true_w, &memberships, labels, reference, &mut y_rng)?;

    let truth = BiclusterSet::new(
        sample_sets.into_iter().zip(gene_sets).map(|(s, gs)| Bicluster::new(s, gs)).collect(),
    );
    Ok(SimulatedDataset { x, y, truth, true_lambda, true_z, true_w, seed: cfg.seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn block_sizes_and_background() {
        let mut rng = Rng::seed_from_u64(1);
        let (m, sets) = simulate_loadings(300, 200, &mut rng);
        assert!(sets.iter().all(|s| (5..=20).contains(&s.len())));
        let mut bg = Vec::new();
        let mut member_abs = Vec::new();
        for (c, s) in sets.iter().enumerate() {
            for i in 0..300 {
                if s.binary_search(&i).is_ok() {
                    member_abs.push(m[(i, c)].abs());
                } else {
                    bg.push(m[(i, c)]);
                }
            }
        }
        let sd = (bg.iter().map(|v| v * v).sum::<f64>() / bg.len() as f64).sqrt();
        assert!((sd / 0.2 - 1.0).abs() < 0.1);
        let (_, gsets) = simulate_factors(1000, 200, &mut rng);
        assert!(gsets.iter().all(|s| (10..=50).contains(&s.len())));
        // |N(2, 1)| has mean close to 2
        let mean_abs = member_abs.iter().sum::<f64>() / member_abs.len() as f64;
        assert!((mean_abs - 2.0).abs() < 0.1);
    }

    #[test]
    fn weight_matrices() {
        let mut rng = Rng::seed_from_u64(2);
        let w = build_weight_matrix(15, 3, 0.25, true, 2, &mut rng);
        assert!(w.row(0).iter().take(2).all(|v| (v - 0.25f64.ln()).abs() < 1e-15));
        for r in 1..16 {
            let strong = w.row(r).iter().filter(|v| (*v - 4f64.ln()).abs() < 1e-15).count();
            assert_eq!(strong, 1);
            assert_eq!(w[(r, 2)], 0.0);
        }
        let w = build_weight_matrix(15, 3, 0.25, false, 2, &mut rng);
        assert!(w.amax() <= 0.05);
        assert!(w.column(2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn flat_weights_give_uniform_classes() {
        let mut rng = Rng::seed_from_u64(3);
        let n = 10_000;
        let memberships = IndicatorSample { k: 2, active: vec![vec![0]; n] };
        let y = simulate_outcomes(&DMatrix::zeros(3, 3), &memberships, vec!["a".into(), "b".into(), "c".into()], 0, &mut rng).unwrap();
        let se = (1.0 / 3.0 * 2.0 / 3.0 / n as f64).sqrt();
        for c in 0..3 {
            let freq = y.classes().iter().filter(|&&v| v == c).count() as f64 / n as f64;
            assert!((freq - 1.0 / 3.0).abs() < 3.0 * se);
        }
    }

    #[test]
    fn informative_member_prefers_its_class() {
        let mut w = DMatrix::zeros(2, 3);
        w[(0, 1)] = 0.25f64.ln();
        w[(0, 2)] = 0.25f64.ln();
        w[(1, 2)] = 4f64.ln();
        let exact = class_probabilities(&w, &[0])[2];
        let n = 20_000;
        let memberships = IndicatorSample { k: 1, active: vec![vec![0]; n] };
        let y = simulate_outcomes(&w, &memberships, vec!["a".into(), "b".into(), "c".into()], 0, &mut Rng::seed_from_u64(4)).unwrap();
        let freq = y.classes().iter().filter(|&&v| v == 2).count() as f64 / n as f64;
        assert!(exact > 1.0 / 3.0 && (freq - exact).abs() < 0.02);
    }

    #[test]
    fn dataset_shapes_noise_and_regimes() {
        let cfg = SimulationConfig { seed: 5, ..Default::default() };
        let d = simulate_dataset(&cfg).unwrap();
        assert_eq!(d.x.values.shape(), (300, 1000));
        assert_eq!(d.y.values.shape(), (300, 3));
        assert_eq!(d.truth.k_hat(), 15);
        assert_eq!(d.y.class_labels, vec!["D1", "D2", "HC"]);
        assert_eq!(d.y.reference_class, 2);
        let resid = &d.x.values - &d.true_lambda * d.true_z.transpose();
        let mean = resid.mean();
        let sd = (resid.map(|v| (v - mean).powi(2)).sum() / resid.len() as f64).sqrt();
        assert!(mean.abs() < 0.05 && (sd - 1.0).abs() < 0.05);

        let other = simulate_dataset(&SimulationConfig { informative: false, ..cfg.clone() }).unwrap();
        assert_eq!(other.x.values, d.x.values);
        assert_eq!(other.truth, d.truth);
        let again = simulate_dataset(&cfg).unwrap();
        assert_eq!(again.x.values, d.x.values);
        assert_eq!(again.y.values, d.y.values);
        let reseeded = simulate_dataset(&SimulationConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(reseeded.x.values, d.x.values);
    }
}

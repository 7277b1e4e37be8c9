//! Scoring found biclusters against the truth and the replicate study.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{run_sslb_with, FitOptions};
use crate::error::{Error, Result};
use crate::model::{Bicluster, BiclusterSet, FitConfig, PriorVariant};
use crate::rng::child_seed;
use crate::simulation::{simulate_dataset, SimulationConfig};

fn intersection_size(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Jaccard index of the two cell sets (samples x genes).
pub fn jaccard(a: &Bicluster, b: &Bicluster) -> f64 {
    let inter = intersection_size(&a.samples, &b.samples) * intersection_size(&a.genes, &b.genes);
    let union = a.n_cells() + b.n_cells() - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Minimum-cost perfect matching on a square cost matrix (Kuhn-Munkres with
/// row and column potentials). Returns the column assigned to every row.
pub fn hungarian_min(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays; index 0 is the virtual start column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Largest total similarity of a one-to-one matching between rows and
/// columns of a rectangular similarity matrix.
pub fn max_assignment(sim: &[Vec<f64>], n_cols: usize) -> f64 {
    let size = sim.len().max(n_cols);
    let cost: Vec<Vec<f64>> = (0..size)
        .map(|r| (0..size).map(|c| -sim.get(r).and_then(|row| row.get(c)).copied().unwrap_or(0.0)).collect())
        .collect();
    hungarian_min(&cost)
        .iter()
        .enumerate()
        .map(|(r, &c)| sim.get(r).and_then(|row| row.get(c)).copied().unwrap_or(0.0))
        .sum()
}

/// Optimal one-to-one matching of pairwise Jaccard indices divided by the
/// larger set size. Two empty sets score 1; one empty set scores 0.
pub fn consensus_score(found: &BiclusterSet, truth: &BiclusterSet) -> f64 {
    let (a, b) = (found.k_hat(), truth.k_hat());
    if a == 0 && b == 0 {
        return 1.0;
    }
    if a == 0 || b == 0 {
        return 0.0;
    }
    let sim: Vec<Vec<f64>> = found
        .biclusters
        .iter()
        .map(|f| truth.biclusters.iter().map(|t| jaccard(f, t)).collect())
        .collect();
    (max_assignment(&sim, b) / a.max(b) as f64).clamp(0.0, 1.0)
}

/// Fitting method of a replicate-study cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SSLB")]
    Sslb,
    #[serde(rename = "OG-SSLB-inf")]
    GuidedInformative,
    #[serde(rename = "OG-SSLB-noninf")]
    GuidedNonInformative,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Sslb => "SSLB",
            Method::GuidedInformative => "OG-SSLB-inf",
            Method::GuidedNonInformative => "OG-SSLB-noninf",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_replicates: usize,
    pub methods: Vec<Method>,
    pub prior_variants: Vec<PriorVariant>,
    /// Seed of the replicate algorithm seeds.
    pub seed: u64,
    pub simulation: SimulationConfig,
    pub fit: FitConfig,
    /// Wall-clock cap per fit, in seconds.
    pub time_budget_secs: Option<f64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            n_replicates: 10,
            methods: vec![Method::Sslb, Method::GuidedInformative],
            prior_variants: vec![PriorVariant::BB, PriorVariant::IBP, PriorVariant::PY],
            seed: 0,
            simulation: SimulationConfig::default(),
            fit: FitConfig::default(),
            time_budget_secs: None,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_replicates == 0 {
            return Err(Error::InvalidConfig("n_replicates must be at least 1".into()));
        }
        if self.methods.is_empty() || self.prior_variants.is_empty() {
            return Err(Error::InvalidConfig("methods and prior_variants must be non-empty".into()));
        }
        self.simulation.validate()?;
        self.fit.validate()
    }

    /// Algorithm seed of replicate r; shared by every method and variant.
    pub fn replicate_seed(&self, r: usize) -> u64 {
        child_seed(self.seed, r as u64)
    }
}

/// One fitted replicate.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateRecord {
    pub method: Method,
    pub variant: PriorVariant,
    pub seed: u64,
    pub score: f64,
    pub k_hat: usize,
    pub truncated: bool,
    pub runtime_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplicateSummary {
    pub method_label: String,
    pub prior_variant: String,
    pub consensus_scores: Vec<f64>,
    pub k_hats: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl ReplicateSummary {
    pub fn mean_k_hat(&self) -> f64 {
        self.k_hats.iter().sum::<usize>() as f64 / self.k_hats.len().max(1) as f64
    }

    pub fn median_score(&self) -> f64 {
        crate::model::median(&self.consensus_scores)
    }
}

/// Groups records by (method, variant) in the study's cell order.
pub fn summarize(study: &StudyConfig, records: &[ReplicateRecord]) -> Vec<ReplicateSummary> {
    let mut out = Vec::new();
    for &variant in &study.prior_variants {
        for &method in &study.methods {
            let cell: Vec<&ReplicateRecord> =
                records.iter().filter(|r| r.method == method && r.variant == variant).collect();
            out.push(ReplicateSummary {
                method_label: method.label().into(),
                prior_variant: variant.to_string(),
                consensus_scores: cell.iter().map(|r| r.score).collect(),
                k_hats: cell.iter().map(|r| r.k_hat).collect(),
                seeds: cell.iter().map(|r| r.seed).collect(),
            });
        }
    }
    out
}

/// One dataset, every (variant, method, replicate) fit, results in
/// (variant, method, replicate) order regardless of scheduling.
pub fn run_replicate_study(study: &StudyConfig) -> Result<Vec<ReplicateRecord>> {
    study.validate()?;
    let informative = simulate_dataset(&SimulationConfig { informative: true, ..study.simulation.clone() })?;
    let flat = simulate_dataset(&SimulationConfig { informative: false, ..study.simulation.clone() })?;
    let jobs: Vec<(PriorVariant, Method, usize)> = study
        .prior_variants
        .iter()
        .flat_map(|&v| study.methods.iter().flat_map(move |&m| (0..study.n_replicates).map(move |r| (v, m, r))))
        .collect();
    jobs.par_iter()
        .map(|&(variant, method, r)| {
            let seed = study.replicate_seed(r);
            let cfg = FitConfig {
                prior_variant: variant,
                outcome_guided: method != Method::Sslb,
                seed,
                ..study.fit.clone()
            };
            let y = match method {
                Method::Sslb => None,
                Method::GuidedInformative => Some(&informative.y),
                Method::GuidedNonInformative => Some(&flat.y),
            };
            let start = Instant::now();
            let options = FitOptions {
                deadline: study.time_budget_secs.map(|s| start + std::time::Duration::from_secs_f64(s)),
                record_trace: false,
            };
            let fit = run_sslb_with(&informative.x, y, &cfg, &options)?;
            let runtime_seconds = start.elapsed().as_secs_f64();
            log::info!(
                "{} {variant} replicate {r}: K = {}, {:.1} s",
                method.label(),
                fit.biclusters.k_hat(),
                runtime_seconds
            );
            Ok(ReplicateRecord {
                method,
                variant,
                seed,
                score: consensus_score(&fit.biclusters, &informative.truth),
                k_hat: fit.biclusters.k_hat(),
                truncated: fit.truncated,
                runtime_seconds,
            })
        })
        .collect()
}

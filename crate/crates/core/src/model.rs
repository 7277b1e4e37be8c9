//! Domain types shared by the fitting, simulation and evaluation code, plus
//! input validation and calibration of the residual-variance prior.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::function::gamma::gamma_lr;

use crate::error::{Error, Result};

/// Observed N x G expression matrix (samples in rows, genes in columns).
#[derive(Clone, Debug, PartialEq)]
pub struct ExpressionMatrix {
    pub values: DMatrix<f64>,
    pub sample_ids: Vec<String>,
    pub gene_ids: Vec<String>,
}

impl ExpressionMatrix {
    pub fn new(values: DMatrix<f64>, sample_ids: Vec<String>, gene_ids: Vec<String>) -> Result<Self> {
        let x = Self { values, sample_ids, gene_ids };
        x.validate()?;
        Ok(x)
    }

    /// Matrix with generated ids `s0..`, `g0..`.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        let sample_ids = (0..values.nrows()).map(|i| format!("s{i}")).collect();
        let gene_ids = (0..values.ncols()).map(|j| format!("g{j}")).collect();
        Self::new(values, sample_ids, gene_ids)
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.values.ncols()
    }

    fn validate(&self) -> Result<()> {
        let (n, g) = self.values.shape();
        if n < 2 || g < 2 {
            return Err(Error::DimensionMismatch(format!(
                "expression matrix must be at least 2 x 2, got {n} x {g}"
            )));
        }
        if self.sample_ids.len() != n || self.gene_ids.len() != g {
            return Err(Error::DimensionMismatch(format!(
                "{} sample ids and {} gene ids for a {n} x {g} matrix",
                self.sample_ids.len(),
                self.gene_ids.len()
            )));
        }
        check_unique(&self.sample_ids, "sample")?;
        check_unique(&self.gene_ids, "gene")?;
        for col in 0..g {
            for row in 0..n {
                if !self.values[(row, col)].is_finite() {
                    return Err(Error::NonFiniteEntry { row, col });
                }
            }
        }
        Ok(())
    }
}

fn check_unique(ids: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DimensionMismatch(format!("duplicate {what} id '{id}'")));
        }
    }
    Ok(())
}

/// One-hot N x C outcome matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeMatrix {
    pub values: DMatrix<f64>,
    pub class_labels: Vec<String>,
    pub reference_class: usize,
}

impl OutcomeMatrix {
    pub fn new(values: DMatrix<f64>, class_labels: Vec<String>, reference_class: usize) -> Result<Self> {
        let y = Self { values, class_labels, reference_class };
        y.validate()?;
        Ok(y)
    }

    /// Build from per-sample class indices.
    pub fn from_classes(classes: &[usize], class_labels: Vec<String>, reference_class: usize) -> Result<Self> {
        let c = class_labels.len();
        let mut values = DMatrix::zeros(classes.len(), c);
        for (i, &cls) in classes.iter().enumerate() {
            if cls >= c {
                return Err(Error::DimensionMismatch(format!("class index {cls} >= {c}")));
            }
            values[(i, cls)] = 1.0;
        }
        Self::new(values, class_labels, reference_class)
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.values.ncols()
    }

    /// Observed class index of every sample.
    pub fn classes(&self) -> Vec<usize> {
        (0..self.values.nrows())
            .map(|i| {
                (0..self.values.ncols())
                    .find(|&l| self.values[(i, l)] == 1.0)
                    .unwrap_or(0)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let c = self.values.ncols();
        if c < 2 {
            return Err(Error::DimensionMismatch(format!("need at least 2 classes, got {c}")));
        }
        if self.class_labels.len() != c {
            return Err(Error::DimensionMismatch(format!(
                "{} class labels for {c} outcome columns",
                self.class_labels.len()
            )));
        }
        if self.reference_class >= c {
            return Err(Error::DimensionMismatch(format!(
                "reference class {} out of range for {c} classes",
                self.reference_class
            )));
        }
        for row in 0..self.values.nrows() {
            let mut sum = 0.0;
            for col in 0..c {
                let v = self.values[(row, col)];
                if !v.is_finite() {
                    return Err(Error::NonFiniteEntry { row, col });
                }
                if v != 0.0 && v != 1.0 {
                    return Err(Error::NotOneHot { row, sum: v });
                }
                sum += v;
            }
            if sum != 1.0 {
                return Err(Error::NotOneHot { row, sum });
            }
        }
        Ok(())
    }
}

/// Checks every invariant of the inputs. Pure; calling it twice gives the
/// same answer.
pub fn validate_inputs(x: &ExpressionMatrix, y: Option<&OutcomeMatrix>) -> Result<()> {
    x.validate()?;
    if let Some(y) = y {
        y.validate()?;
        if y.n_samples() != x.n_samples() {
            return Err(Error::DimensionMismatch(format!(
                "expression matrix has {} samples but outcome matrix has {}",
                x.n_samples(),
                y.n_samples()
            )));
        }
    }
    Ok(())
}

/// Unbiased sample variance of every column.
pub fn column_variances(values: &DMatrix<f64>) -> DVector<f64> {
    let n = values.nrows() as f64;
    DVector::from_iterator(
        values.ncols(),
        values.column_iter().map(|col| {
            let mean = col.sum() / n;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        }),
    )
}

/// 0.05 quantile of Gamma(shape, 1), by bisection on the regularized lower
/// incomplete gamma function.
fn gamma_lower_quantile(shape: f64, prob: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = shape.max(1.0);
    while gamma_lr(shape, hi) < prob {
        hi *= 2.0;
    }
    while hi - lo > 1e-10 * hi.max(1e-300) {
        let mid = 0.5 * (lo + hi);
        if gamma_lr(shape, mid) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Chooses xi so that the 95% quantile of the InvGamma(eta/2, eta*xi/2)
/// prior on sigma^2 equals the median per-gene sample variance.
///
/// If Y ~ Gamma(eta/2, 1) then sigma^2 = (eta*xi/2) / Y, so
/// P(sigma^2 < s^2) = 0.95 becomes xi = 2 s^2 q / eta with q the 0.05
/// quantile of Y.
pub fn calibrate_xi(x: &ExpressionMatrix, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
    }
    let vars = column_variances(&x.values);
    if let Some(col) = vars.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::ZeroVarianceColumn { col });
    }
    let target = median(vars.as_slice());
    let q = gamma_lower_quantile(eta / 2.0, 0.05);
    Ok(2.0 * target * q / eta)
}

pub(crate) fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Prior family on the sample-side indicators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PriorVariant {
    /// Finite Beta-Bernoulli approximation.
    BB,
    /// Stick-breaking Indian buffet process.
    IBP,
    /// Pitman-Yor extension of the stick-breaking IBP.
    PY,
}

impl fmt::Display for PriorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            PriorVariant::BB => "BB",
            PriorVariant::IBP => "IBP",
            PriorVariant::PY => "PY",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PriorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BB" => Ok(Self::BB),
            "IBP" => Ok(Self::IBP),
            "PY" => Ok(Self::PY),
            other => Err(Error::InvalidConfig(format!("unknown prior variant '{other}'"))),
        }
    }
}

/// A positive real that may be left as `"auto"` in config files.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum AutoValue {
    #[default]
    Auto,
    Value(f64),
}

impl AutoValue {
    pub fn resolve(self, auto: impl FnOnce() -> f64) -> f64 {
        match self {
            AutoValue::Auto => auto(),
            AutoValue::Value(v) => v,
        }
    }
}

impl Serialize for AutoValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AutoValue::Auto => s.serialize_str("auto"),
            AutoValue::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for AutoValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(AutoValue::Value(v)),
            Raw::Int(v) => Ok(AutoValue::Value(v as f64)),
            Raw::Str(s) if s == "auto" => Ok(AutoValue::Auto),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got \"{s}\""))),
        }
    }
}

/// Settings of the stochastic marginal-likelihood optimizer for the ridge
/// strength of the outcome weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoulConfig {
    pub n_iters: usize,
    pub burn_in: usize,
    pub inner_samples: usize,
    /// Langevin step; `auto` is 0.95 / L_f.
    pub delta_ula: AutoValue,
    /// Step-size scale; `auto` is 1 / (lambda_init * dim).
    pub c0: AutoValue,
    pub p_exponent: f64,
    pub theta_bounds: [f64; 2],
    pub log_scale: bool,
    pub lambda_init: f64,
}

impl Default for SoulConfig {
    fn default() -> Self {
        Self {
            n_iters: 150,
            burn_in: 75,
            inner_samples: 1,
            delta_ula: AutoValue::Auto,
            c0: AutoValue::Auto,
            p_exponent: 0.8,
            theta_bounds: [1e-4, 1e4],
            log_scale: true,
            lambda_init: 1.0,
        }
    }
}

impl SoulConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 || self.burn_in >= self.n_iters {
            return Err(Error::InvalidConfig(format!(
                "soul burn_in ({}) must be below n_iters ({})",
                self.burn_in, self.n_iters
            )));
        }
        if self.inner_samples == 0 {
            return Err(Error::InvalidConfig("soul inner_samples must be at least 1".into()));
        }
        let [lo, hi] = self.theta_bounds;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid soul theta_bounds [{lo}, {hi}]")));
        }
        if !(0.6..=0.9).contains(&self.p_exponent) {
            return Err(Error::InvalidConfig(format!(
                "soul p_exponent must lie in [0.6, 0.9], got {}",
                self.p_exponent
            )));
        }
        if !(self.lambda_init >= lo && self.lambda_init <= hi) {
            return Err(Error::InvalidConfig("soul lambda_init outside theta_bounds".into()));
        }
        for (name, v) in [("delta_ula", self.delta_ula), ("c0", self.c0)] {
            if let AutoValue::Value(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::InvalidConfig(format!("soul {name} must be positive")));
                }
            }
        }
        Ok(())
    }
}

/// Every hyperparameter and schedule of a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Initial (over-)estimate K* of the number of biclusters.
    pub k_init: usize,
    pub prior_variant: PriorVariant,
    /// Spike rates for the gene loadings, one per rung.
    pub omega0_ladder: Vec<f64>,
    pub omega1: f64,
    /// Spike rates for the sample loadings, one per rung.
    pub omega0_tilde_ladder: Vec<f64>,
    pub omega1_tilde: f64,
    /// Beta(alpha, 1) prior on the gene inclusion weights; `auto` is 1/K*.
    pub alpha: AutoValue,
    pub alpha_tilde: f64,
    /// Pitman-Yor discount (PY only).
    pub d: f64,
    /// Beta(a, b) prior on the sample inclusion weights (BB only); `auto` a is 1/K*.
    pub a_tilde: AutoValue,
    pub b_tilde: f64,
    pub eta: f64,
    pub xi: AutoValue,
    pub outcome_guided: bool,
    /// Label of the reference (healthy control) class.
    pub reference_class: Option<String>,
    pub mc_gamma_samples: usize,
    pub mc_logsumexp_samples: usize,
    pub mc_grad_samples: usize,
    pub agd_steps: usize,
    /// Re-estimate the ridge strength every this many EM iterations; unset
    /// means once at the start of every rung.
    pub soul_refresh_period: Option<usize>,
    pub soul: SoulConfig,
    pub em_max_iters_per_rung: usize,
    pub em_tolerance: f64,
    pub seed: u64,
}

pub const DEFAULT_OMEGA0_LADDER: [f64; 11] =
    [1.0, 5.0, 10.0, 50.0, 100.0, 500.0, 1e3, 1e4, 1e5, 1e6, 1e7];

impl Default for FitConfig {
    fn default() -> Self {
        let rungs = DEFAULT_OMEGA0_LADDER.len();
        Self {
            k_init: 30,
            prior_variant: PriorVariant::IBP,
            omega0_ladder: DEFAULT_OMEGA0_LADDER.to_vec(),
            omega1: 1.0,
            omega0_tilde_ladder: vec![5.0; rungs],
            omega1_tilde: 1.0,
            alpha: AutoValue::Auto,
            alpha_tilde: 1.0,
            d: 0.5,
            a_tilde: AutoValue::Auto,
            b_tilde: 1.0,
            eta: 3.0,
            xi: AutoValue::Auto,
            outcome_guided: false,
            reference_class: None,
            mc_gamma_samples: 50,
            mc_logsumexp_samples: 30,
            mc_grad_samples: 30,
            agd_steps: 50,
            soul_refresh_period: None,
            soul: SoulConfig::default(),
            em_max_iters_per_rung: 500,
            em_tolerance: 1e-3,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k_init == 0 {
            return bad("k_init must be at least 1".into());
        }
        if self.omega0_ladder.is_empty() {
            return bad("omega0_ladder is empty".into());
        }
        if self.omega0_ladder.len() != self.omega0_tilde_ladder.len() {
            return bad(format!(
                "omega0_ladder has {} rungs but omega0_tilde_ladder has {}",
                self.omega0_ladder.len(),
                self.omega0_tilde_ladder.len()
            ));
        }
        if self.omega0_ladder.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("omega0_ladder must be strictly increasing".into());
        }
        let positive = self
            .omega0_ladder
            .iter()
            .chain(&self.omega0_tilde_ladder)
            .chain([&self.omega1, &self.omega1_tilde, &self.eta, &self.b_tilde, &self.em_tolerance])
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive {
            return bad("rates, eta, b_tilde and em_tolerance must be positive and finite".into());
        }
        if !(0.0..1.0).contains(&self.d) {
            return bad(format!("discount d must lie in [0, 1), got {}", self.d));
        }
        if !(self.alpha_tilde > -self.effective_discount()) {
            return bad("alpha_tilde must exceed -d".into());
        }
        for (name, v) in [("alpha", self.alpha), ("a_tilde", self.a_tilde), ("xi", self.xi)] {
            if let AutoValue::Value(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be positive"));
                }
            }
        }
        if self.mc_gamma_samples == 0 || self.mc_logsumexp_samples == 0 || self.mc_grad_samples == 0 {
            return bad("Monte Carlo sample counts must be at least 1".into());
        }
        if self.soul_refresh_period == Some(0) {
            return bad("soul_refresh_period must be at least 1".into());
        }
        self.soul.validate()
    }

    /// Discount actually used: zero unless the variant is PY.
    pub fn effective_discount(&self) -> f64 {
        if self.prior_variant == PriorVariant::PY {
            self.d
        } else {
            0.0
        }
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha.resolve(|| 1.0 / self.k_init as f64)
    }

    pub fn a_tilde_value(&self) -> f64 {
        self.a_tilde.resolve(|| 1.0 / self.k_init as f64)
    }
}

/// Stick-breaking state of the sample-side inclusion probabilities.
#[derive(Clone, Debug, PartialEq)]
pub enum Stick {
    /// IBP / PY breaks; inclusion weights are running products.
    Breaks(DVector<f64>),
    /// BB: independent inclusion weights.
    Weights(DVector<f64>),
}

impl Stick {
    /// Inclusion probability of every column.
    pub fn inclusion(&self) -> DVector<f64> {
        match self {
            Stick::Breaks(nu) => {
                let mut acc = 1.0;
                nu.map(|v| {
                    acc *= v;
                    acc
                })
            }
            Stick::Weights(t) => t.clone(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Stick::Breaks(v) | Stick::Weights(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &DVector<f64> {
        match self {
            Stick::Breaks(v) | Stick::Weights(v) => v,
        }
    }

    pub(crate) fn select(&self, keep: &[usize]) -> Stick {
        let pick = |v: &DVector<f64>| DVector::from_iterator(keep.len(), keep.iter().map(|&k| v[k]));
        match self {
            Stick::Breaks(v) => Stick::Breaks(pick(v)),
            Stick::Weights(v) => Stick::Weights(pick(v)),
        }
    }
}

/// Multinomial-logistic outcome block of a guided fit.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeBlock {
    /// (K+1) x C weights; row 0 is the intercept.
    pub w: DMatrix<f64>,
    pub lambda_w: f64,
    pub reference: usize,
}

/// All parameter and expectation blocks of one EM run.
#[derive(Clone, Debug, PartialEq)]
pub struct EmState {
    /// G x K gene loadings.
    pub z: DMatrix<f64>,
    /// N x K posterior means of the sample loadings.
    pub lambda_mean: DMatrix<f64>,
    /// Per-sample K x K posterior second moments.
    pub lambda_second: Vec<DMatrix<f64>>,
    /// N x K auxiliary variances.
    pub tau: DMatrix<f64>,
    pub sigma2: DVector<f64>,
    /// N x K sample membership expectations.
    pub gamma_tilde: DMatrix<f64>,
    /// G x K gene membership expectations.
    pub gamma: DMatrix<f64>,
    pub theta: DVector<f64>,
    pub stick: Stick,
    pub outcome: Option<OutcomeBlock>,
}

impl EmState {
    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    /// Checks the shape and range invariants of every block.
    pub fn check_invariants(&self) -> Result<()> {
        let k = self.k();
        let (g, n) = (self.z.nrows(), self.tau.nrows());
        let shape_ok = self.lambda_mean.shape() == (n, k)
            && self.lambda_second.len() == n
            && self.lambda_second.iter().all(|m| m.shape() == (k, k))
            && self.tau.ncols() == k
            && self.sigma2.len() == g
            && self.gamma_tilde.shape() == (n, k)
            && self.gamma.shape() == (g, k)
            && self.theta.len() == k
            && self.stick.len() == k
            && self.outcome.as_ref().is_none_or(|o| o.w.nrows() == k + 1);
        if !shape_ok {
            return Err(Error::DimensionMismatch("EM state blocks disagree on K".into()));
        }
        let unit = |v: &f64| (0.0..=1.0).contains(v);
        if !(self.tau.iter().all(|v| *v > 0.0) && self.sigma2.iter().all(|v| *v > 0.0)) {
            return Err(Error::InvalidConfig("non-positive variance in EM state".into()));
        }
        if !(self.gamma.iter().all(unit)
            && self.gamma_tilde.iter().all(unit)
            && self.theta.iter().all(unit)
            && self.stick.values().iter().all(unit))
        {
            return Err(Error::InvalidConfig("probability outside [0, 1] in EM state".into()));
        }
        if let Some(o) = &self.outcome {
            if o.w.column(o.reference).iter().any(|v| *v != 0.0) {
                return Err(Error::InvalidConfig("reference column of W is not zero".into()));
            }
        }
        Ok(())
    }
}

/// One bicluster: a set of samples and a set of genes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bicluster {
    #[serde(rename = "sample_indices")]
    pub samples: Vec<usize>,
    #[serde(rename = "gene_indices")]
    pub genes: Vec<usize>,
}

impl Bicluster {
    /// Sorts and deduplicates both index sets.
    pub fn new(mut samples: Vec<usize>, mut genes: Vec<usize>) -> Self {
        samples.sort_unstable();
        samples.dedup();
        genes.sort_unstable();
        genes.dedup();
        Self { samples, genes }
    }

    pub fn n_cells(&self) -> usize {
        self.samples.len() * self.genes.len()
    }
}

/// Discrete biclusters; overlap between members is allowed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BiclusterSet {
    pub biclusters: Vec<Bicluster>,
}

impl BiclusterSet {
    pub fn new(biclusters: Vec<Bicluster>) -> Self {
        Self { biclusters }
    }

    pub fn k_hat(&self) -> usize {
        self.biclusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.biclusters.is_empty()
    }

    pub fn validate(&self, n_samples: usize, n_genes: usize) -> Result<()> {
        for (k, b) in self.biclusters.iter().enumerate() {
            if b.samples.is_empty() || b.genes.is_empty() {
                return Err(Error::DimensionMismatch(format!("bicluster {k} is empty on one axis")));
            }
            if b.samples.iter().any(|&i| i >= n_samples) || b.genes.iter().any(|&j| j >= n_genes) {
                return Err(Error::DimensionMismatch(format!("bicluster {k} index out of bounds")));
            }
        }
        Ok(())
    }
}

//! Synthetic micro data with known APC-I structure, and a demonstration that
//! the additive age + period + cohort model is not identified.
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with the
//! scenario seed; cell `(i, j)` draws from stream `cell_offset(i, j)`, so each
//! cell's records are fixed by the seed alone and cells can be generated in
//! any order.

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{
    build_accounting_design, build_apci_design, grid_rows, rank_and_nullspace, Coding, ColumnTag, Covariate, DesignError,
};
use crate::glm::Family;
use crate::grid::{GridError, GridSpec, MicroRecord};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("{what} has length {got}, expected {expected}")]
    Shape { what: String, expected: usize, got: usize },
    #[error("{margin} sums to {sum:e}, must be zero")]
    ZeroSum { margin: String, sum: f64 },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("cell ({age}, {period}): linear predictor {eta} gives no valid mean")]
    BadMean { age: usize, period: usize, eta: f64 },
    #[error("scenario JSON: {0}")]
    Json(String),
}

/// Record weight distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightDist {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    /// Mean-one log-normal, `exp(sigma Z - sigma^2 / 2)`.
    LogNormal { sigma: f64 },
}

impl Default for WeightDist {
    fn default() -> Self {
        WeightDist::Constant { value: 1.0 }
    }
}

impl WeightDist {
    fn check(&self) -> Result<(), SimError> {
        let ok = match *self {
            WeightDist::Constant { value } => value > 0.0 && value.is_finite(),
            WeightDist::Uniform { low, high } => low >= 0.0 && high > low && high.is_finite(),
            WeightDist::LogNormal { sigma } => sigma >= 0.0 && sigma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::Invalid(format!("bad weight distribution {self:?}")))
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            WeightDist::Constant { value } => value,
            WeightDist::Uniform { low, high } => rng.random_range(low..high),
            WeightDist::LogNormal { sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                (sigma * z - sigma * sigma / 2.0).exp()
            }
        }
    }
}

/// A categorical covariate with sum-to-zero effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCovariate {
    pub name: String,
    pub levels: Vec<String>,
    pub effects: Vec<f64>,
    /// Level probabilities; uniform when absent.
    #[serde(default)]
    pub probabilities: Option<Vec<f64>>,
}

fn default_noise() -> f64 {
    1.0
}

/// Known parameters of a simulated APC-I population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEffects {
    pub grid: GridSpec,
    pub family: Family,
    pub intercept: f64,
    /// Sum to zero.
    pub age: Vec<f64>,
    /// Sum to zero.
    pub period: Vec<f64>,
    /// `a x p`; every row and column sums to zero.
    pub interaction: Vec<Vec<f64>>,
    #[serde(default)]
    pub covariates: Vec<SimCovariate>,
    /// Records per cell.
    pub cell_size: usize,
    #[serde(default)]
    pub weights: WeightDist,
    /// Residual standard deviation for the Gaussian family.
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

fn zero_sum(values: impl Iterator<Item = f64>, margin: impl FnOnce() -> String) -> Result<(), SimError> {
    let (sum, abs) = values.fold((0.0, 0.0), |(s, a), v| (s + v, a + v.abs()));
    if sum.abs() > 1e-9 * abs.max(1.0) {
        return Err(SimError::ZeroSum { margin: margin(), sum });
    }
    Ok(())
}

fn expect_len(what: &str, expected: usize, got: usize) -> Result<(), SimError> {
    if expected != got {
        return Err(SimError::Shape {
            what: what.into(),
            expected,
            got,
        });
    }
    Ok(())
}

impl TrueEffects {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let effects: TrueEffects = serde_json::from_str(text).map_err(|e| SimError::Json(e.to_string()))?;
        effects.validate()?;
        Ok(effects)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let (a, p) = (self.grid.age_groups(), self.grid.periods());
        expect_len("age effects", a, self.age.len())?;
        expect_len("period effects", p, self.period.len())?;
        expect_len("interaction rows", a, self.interaction.len())?;
        for (i, row) in self.interaction.iter().enumerate() {
            expect_len(&format!("interaction row {}", i + 1), p, row.len())?;
        }
        let all = std::iter::once(self.intercept)
            .chain(self.age.iter().copied())
            .chain(self.period.iter().copied())
            .chain(self.interaction.iter().flatten().copied());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(SimError::Invalid("effects must be finite".into()));
        }
        zero_sum(self.age.iter().copied(), || "age effects".into())?;
        zero_sum(self.period.iter().copied(), || "period effects".into())?;
        for (i, row) in self.interaction.iter().enumerate() {
            zero_sum(row.iter().copied(), || format!("interaction row {} (age {})", i + 1, self.grid.age_label(i + 1)))?;
        }
        for j in 0..p {
            zero_sum(self.interaction.iter().map(|r| r[j]), || {
                format!("interaction column {} (period {})", j + 1, self.grid.period_label(j + 1))
            })?;
        }
        for cov in &self.covariates {
            if cov.levels.len() < 2 {
                return Err(SimError::Invalid(format!("covariate '{}' needs at least 2 levels", cov.name)));
            }
            expect_len(&format!("effects of covariate '{}'", cov.name), cov.levels.len(), cov.effects.len())?;
            zero_sum(cov.effects.iter().copied(), || format!("effects of covariate '{}'", cov.name))?;
            if let Some(pr) = &cov.probabilities {
                expect_len(&format!("probabilities of covariate '{}'", cov.name), cov.levels.len(), pr.len())?;
                if pr.iter().any(|&v| !(v >= 0.0 && v.is_finite())) || pr.iter().sum::<f64>() <= 0.0 {
                    return Err(SimError::Invalid(format!("bad probabilities for covariate '{}'", cov.name)));
                }
            }
        }
        if self.cell_size == 0 {
            return Err(SimError::Invalid("cell_size must be at least 1".into()));
        }
        if self.family == Family::GaussianIdentity && !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(SimError::Invalid("noise_sd must be positive".into()));
        }
        self.weights.check()
    }

    /// Linear predictor of cell `(i, j)` (1-based) at the given covariate levels.
    pub fn linear_predictor(&self, i: usize, j: usize, levels: &[usize]) -> f64 {
        let cov: f64 = self.covariates.iter().zip(levels).map(|(c, &l)| c.effects[l]).sum();
        self.intercept + self.age[i - 1] + self.period[j - 1] + self.interaction[i - 1][j - 1] + cov
    }

    pub fn design_covariates(&self) -> Vec<Covariate> {
        self.covariates
            .iter()
            .map(|c| Covariate::new(c.name.clone(), c.levels.clone()))
            .collect()
    }

    /// All-zero effects on `spec`.
    pub fn null(spec: GridSpec, family: Family, cell_size: usize, seed: u64) -> Self {
        let (a, p) = (spec.age_groups(), spec.periods());
        Self {
            grid: spec,
            family,
            intercept: 0.0,
            age: vec![0.0; a],
            period: vec![0.0; p],
            interaction: vec![vec![0.0; p]; a],
            covariates: Vec::new(),
            cell_size,
            weights: WeightDist::default(),
            noise_sd: 1.0,
            seed,
        }
    }

    /// The 9 x 6 (14-cohort) logit scenario with 2000 records per cell and
    /// every effect at most 0.3 in magnitude.
    pub fn default_scenario(seed: u64) -> Self {
        let spec = GridSpec::cps_1990_2017();
        let (a, p) = (spec.age_groups(), spec.periods());
        let centered = |n: usize| -> Vec<f64> {
            let mid = (n as f64 + 1.0) / 2.0;
            let half = (n as f64 - 1.0) / 2.0;
            (1..=n).map(|k| (k as f64 - mid) / half).collect()
        };
        let u = centered(a);
        let v = centered(p);
        let age = u.iter().map(|x| 0.3 * x).collect();
        let period = v.iter().map(|x| -0.15 * x).collect();
        // linear-by-linear interaction: later periods favour older ages
        let interaction = u.iter().map(|ui| v.iter().map(|vj| 0.2 * ui * vj).collect()).collect();
        Self {
            grid: spec,
            family: Family::BinomialLogit,
            intercept: 0.2,
            age,
            period,
            interaction,
            covariates: Vec::new(),
            cell_size: 2000,
            weights: WeightDist::default(),
            noise_sd: 1.0,
            seed,
        }
    }
}

/// Generated records with the covariate definitions they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct SimData {
    pub records: Vec<MicroRecord>,
    pub covariates: Vec<Covariate>,
}

fn uniform_in_bin(rng: &mut ChaCha8Rng, breaks: &[i64], idx: usize) -> i64 {
    let lo = breaks[idx - 1];
    let hi = breaks[idx];
    // the last bin is closed at its upper break
    if idx == breaks.len() - 1 {
        rng.random_range(lo..=hi)
    } else {
        rng.random_range(lo..hi)
    }
}

/// Draws `cell_size` records per cell. Deterministic in `effects.seed`.
pub fn generate(effects: &TrueEffects) -> Result<SimData, SimError> {
    effects.validate()?;
    let spec = &effects.grid;
    let pickers = effects
        .covariates
        .iter()
        .map(|c| {
            let probs = c.probabilities.clone().unwrap_or_else(|| vec![1.0; c.levels.len()]);
            WeightedIndex::new(probs).map_err(|e| SimError::Invalid(format!("covariate '{}': {e}", c.name)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let noise = Normal::new(0.0, effects.noise_sd).map_err(|e| SimError::Invalid(e.to_string()))?;
    let cells: Vec<_> = spec.iter_cells().collect();
    let per_cell = cells
        .par_iter()
        .map(|&cell| {
            let mut rng = ChaCha8Rng::seed_from_u64(effects.seed);
            rng.set_stream(spec.cell_offset(cell) as u64);
            let mut out = Vec::with_capacity(effects.cell_size);
            let mut levels = vec![0; pickers.len()];
            for _ in 0..effects.cell_size {
                let age = uniform_in_bin(&mut rng, spec.age_breaks(), cell.age);
                let year = uniform_in_bin(&mut rng, spec.period_breaks(), cell.period);
                for (l, pick) in levels.iter_mut().zip(&pickers) {
                    *l = pick.sample(&mut rng);
                }
                let eta = effects.linear_predictor(cell.age, cell.period, &levels);
                let outcome = match effects.family {
                    Family::BinomialLogit => {
                        let mu = effects.family.inverse_link(eta);
                        if !(mu > 0.0 && mu < 1.0) {
                            return Err(SimError::BadMean {
                                age: cell.age,
                                period: cell.period,
                                eta,
                            });
                        }
                        if rng.random::<f64>() < mu {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Family::GaussianIdentity => eta + noise.sample(&mut rng),
                };
                let weight = effects.weights.draw(&mut rng);
                out.push(MicroRecord {
                    id: 0,
                    outcome,
                    age,
                    year,
                    weight,
                    covariates: levels.clone(),
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let mut records: Vec<MicroRecord> = per_cell.into_iter().flatten().collect();
    for (n, r) in records.iter_mut().enumerate() {
        r.id = n as u64 + 1;
    }
    Ok(SimData {
        records,
        covariates: effects.design_covariates(),
    })
}

/// Two parameter vectors of the accounting model that fit every cell
/// identically.
#[derive(Debug, Clone, Serialize)]
pub struct AccountingDemo {
    pub age_groups: usize,
    pub periods: usize,
    pub columns: usize,
    pub rank: usize,
    pub column_names: Vec<String>,
    /// Unit-norm basis vector of the design's null space.
    pub null_vector: Vec<f64>,
    pub lambda: f64,
    pub solution_a: Vec<f64>,
    pub solution_b: Vec<f64>,
    pub fitted_a: Vec<f64>,
    pub fitted_b: Vec<f64>,
    pub max_abs_diff: f64,
    /// Rank and width of the APC-I design on the same grid.
    pub apci_rank: usize,
    pub apci_columns: usize,
}

/// Builds the effect-coded accounting design on `spec`, finds its null
/// vector, and evaluates `beta` and `beta + lambda v` over every cell.
pub fn accounting_demo(spec: &GridSpec) -> Result<AccountingDemo, SimError> {
    let cells: Vec<_> = spec.iter_cells().collect();
    let x = build_accounting_design(&cells, spec, &Coding::Effect)?;
    let info = rank_and_nullspace(&x);
    let n = x.ncols();
    let mut v = info.null_space.first().cloned().unwrap_or_else(|| DVector::zeros(n));
    if let Some(first) = v.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            v = -v;
        }
    }
    let beta_a = DVector::from_fn(n, |k, _| 0.5 * ((k + 1) as f64).sin());
    let lambda = 1.0;
    let beta_b = &beta_a + &v * lambda;
    let fitted_a = &x.x * &beta_a;
    let fitted_b = &x.x * &beta_b;
    let max_abs_diff = (&fitted_a - &fitted_b).amax();
    let apci = build_apci_design(&grid_rows(spec), spec, &Coding::Effect, &[])?;
    let apci_info = rank_and_nullspace(&apci);
    Ok(AccountingDemo {
        age_groups: spec.age_groups(),
        periods: spec.periods(),
        columns: n,
        rank: info.rank,
        column_names: (0..n).map(|c| x.layout.column_name(c)).collect(),
        null_vector: v.iter().copied().collect(),
        lambda,
        solution_a: beta_a.iter().copied().collect(),
        solution_b: beta_b.iter().copied().collect(),
        fitted_a: fitted_a.iter().copied().collect(),
        fitted_b: fitted_b.iter().copied().collect(),
        max_abs_diff,
        apci_rank: apci_info.rank,
        apci_columns: apci.ncols(),
    })
}

impl AccountingDemo {
    /// Entries of the null vector on each term block: (age, period, cohort).
    pub fn null_vector_blocks(&self, spec: &GridSpec) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), SimError> {
        let cells: Vec<_> = spec.iter_cells().collect();
        let x = build_accounting_design(&cells, spec, &Coding::Effect)?;
        let mut blocks = (Vec::new(), Vec::new(), Vec::new());
        for (c, tag) in x.layout.columns.iter().enumerate() {
            match tag {
                ColumnTag::Age { .. } => blocks.0.push(self.null_vector[c]),
                ColumnTag::Period { .. } => blocks.1.push(self.null_vector[c]),
                ColumnTag::Cohort { .. } => blocks.2.push(self.null_vector[c]),
                _ => {}
            }
        }
        Ok(blocks)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "accounting model on a {}x{} grid ({} cohorts)\n",
            self.age_groups,
            self.periods,
            self.age_groups + self.periods - 1
        ));
        s.push_str(&format!("rank {} of {}\n", self.rank, self.columns));
        s.push_str(&format!(
            "APC-I design: rank {} of {}\n",
            self.apci_rank, self.apci_columns
        ));
        s.push_str(&format!("{:<14} {:>12} {:>12} {:>12}\n", "column", "null v", "solution A", "solution B"));
        for (k, name) in self.column_names.iter().enumerate() {
            s.push_str(&format!(
                "{:<14} {:>12.6} {:>12.6} {:>12.6}\n",
                name, self.null_vector[k], self.solution_a[k], self.solution_b[k]
            ));
        }
        s.push_str(&format!("lambda {}\n", self.lambda));
        s.push_str(&format!("max fitted-mean discrepancy {:.3e}\n", self.max_abs_diff));
        s
    }
}

/// Coefficients of the polynomial accounting model
/// `b0 + b1 a + b2 a^2 + b3 p + b4 p^2 + b5 c + b6 c^2` with `c = p - a`,
/// evaluated at the given (age, period) points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyDemoSpec {
    pub coefficients: [f64; 7],
    pub points: Vec<(f64, f64)>,
}

impl Default for PolyDemoSpec {
    fn default() -> Self {
        let points = (1..=5).flat_map(|a| (1..=5).map(move |p| (a as f64, p as f64))).collect();
        Self {
            coefficients: [0.4, -0.3, 0.05, 0.2, -0.02, 0.15, 0.01],
            points,
        }
    }
}

/// The same surface written without cohort terms: the cohort polynomial
/// folds into age, period, and an age-by-period product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AgePeriodPolynomial {
    pub intercept: f64,
    pub age: f64,
    pub age_sq: f64,
    pub period: f64,
    pub period_sq: f64,
    pub age_period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolyDemoRow {
    pub age: f64,
    pub period: f64,
    pub cohort: f64,
    /// Cohort contribution `b5 c + b6 c^2`.
    pub cohort_terms: f64,
    /// Its expansion `b5 p - b5 a + b6 (a^2 + p^2 - 2 a p)`.
    pub cohort_terms_expanded: f64,
    pub with_cohort: f64,
    pub without_cohort: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolyDemo {
    pub reexpressed: AgePeriodPolynomial,
    pub rows: Vec<PolyDemoRow>,
    pub max_abs_diff: f64,
}

pub fn poly_demo(spec: &PolyDemoSpec) -> Result<PolyDemo, SimError> {
    if spec.coefficients.iter().any(|c| !c.is_finite()) {
        return Err(SimError::Invalid("polynomial coefficients must be finite".into()));
    }
    let [b0, b1, b2, b3, b4, b5, b6] = spec.coefficients;
    let re = AgePeriodPolynomial {
        intercept: b0,
        age: b1 - b5,
        age_sq: b2 + b6,
        period: b3 + b5,
        period_sq: b4 + b6,
        age_period: -2.0 * b6,
    };
    let rows: Vec<PolyDemoRow> = spec
        .points
        .iter()
        .map(|&(a, p)| {
            let c = p - a;
            let cohort_terms = b5 * c + b6 * c * c;
            let cohort_terms_expanded = b5 * p - b5 * a + b6 * (a * a + p * p - 2.0 * a * p);
            PolyDemoRow {
                age: a,
                period: p,
                cohort: c,
                cohort_terms,
                cohort_terms_expanded,
                with_cohort: b0 + b1 * a + b2 * a * a + b3 * p + b4 * p * p + cohort_terms,
                without_cohort: re.intercept
                    + re.age * a
                    + re.age_sq * a * a
                    + re.period * p
                    + re.period_sq * p * p
                    + re.age_period * a * p,
            }
        })
        .collect();
    let max_abs_diff = rows
        .iter()
        .flat_map(|r| [(r.with_cohort - r.without_cohort).abs(), (r.cohort_terms - r.cohort_terms_expanded).abs()])
        .fold(0.0, f64::max);
    Ok(PolyDemo {
        reexpressed: re,
        rows,
        max_abs_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{aggregate, bin_record};

    fn small(family: Family, seed: u64) -> TrueEffects {
        let mut e = TrueEffects::null(GridSpec::uniform(3, 3).unwrap(), family, 50, seed);
        e.age = vec![-0.2, 0.0, 0.2];
        e
    }

    #[test]
    fn same_seed_same_records() {
        let e = small(Family::BinomialLogit, 7);
        assert_eq!(generate(&e).unwrap(), generate(&e).unwrap());
        let mut other = e.clone();
        other.seed = 8;
        assert_ne!(generate(&e).unwrap().records, generate(&other).unwrap().records);
    }

    #[test]
    fn records_land_in_their_cells() {
        let e = TrueEffects::default_scenario(3);
        let mut small = e.clone();
        small.cell_size = 20;
        let data = generate(&small).unwrap();
        assert_eq!(data.records.len(), 54 * 20);
        let table = aggregate(data.records.iter(), &small.grid);
        assert!(table.empty_cells().is_empty());
        for (n, r) in data.records.iter().enumerate() {
            let cell = bin_record(r, &small.grid).unwrap();
            assert_eq!(small.grid.cell_offset(cell), n / 20);
        }
    }

    #[test]
    fn default_scenario_is_valid_and_bounded() {
        let e = TrueEffects::default_scenario(1);
        e.validate().unwrap();
        assert_eq!((e.grid.age_groups(), e.grid.periods(), e.grid.cohorts()), (9, 6, 14));
        let max = e
            .age
            .iter()
            .chain(&e.period)
            .chain(e.interaction.iter().flatten())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max <= 0.3 + 1e-12);
    }

    #[test]
    fn zero_sum_violation_names_margin() {
        let mut e = small(Family::GaussianIdentity, 1);
        e.age[0] += 0.1;
        let err = e.validate().unwrap_err();
        assert!(matches!(&err, SimError::ZeroSum { margin, .. } if margin == "age effects"), "{err}");
        let mut e = small(Family::GaussianIdentity, 1);
        e.interaction[1][2] = 0.5;
        e.interaction[1][0] = -0.5;
        let err = e.validate().unwrap_err().to_string();
        assert!(err.contains("interaction column 1"), "{err}");
    }

    #[test]
    fn null_logit_grand_mean_near_half() {
        let e = TrueEffects::null(GridSpec::uniform(3, 3).unwrap(), Family::BinomialLogit, 1000, 11);
        let data = generate(&e).unwrap();
        let n = data.records.len() as f64;
        let mean = data.records.iter().map(|r| r.outcome).sum::<f64>() / n;
        assert!((mean - 0.5).abs() < 3.0 / n.sqrt());
    }

    #[test]
    fn cell_means_converge() {
        let mut e = TrueEffects::default_scenario(5);
        e.grid = GridSpec::uniform(3, 2).unwrap();
        // means near 0.75: 2% relative error is over 3 sampling SEs at N = 10^4
        e.intercept = 1.1;
        e.age = vec![-0.3, 0.1, 0.2];
        e.period = vec![0.25, -0.25];
        e.interaction = vec![vec![0.1, -0.1], vec![-0.3, 0.3], vec![0.2, -0.2]];
        e.cell_size = 10_000;
        let data = generate(&e).unwrap();
        let table = aggregate(data.records.iter(), &e.grid);
        for cell in e.grid.iter_cells() {
            let want = e.family.inverse_link(e.linear_predictor(cell.age, cell.period, &[]));
            let got = table.get(cell).mean().unwrap();
            assert!(((got - want) / want).abs() <= 0.02, "{cell}: {got} vs {want}");
        }
    }

    #[test]
    fn covariates_and_weights() {
        let mut e = small(Family::GaussianIdentity, 2);
        e.covariates = vec![SimCovariate {
            name: "sex".into(),
            levels: vec!["f".into(), "m".into()],
            effects: vec![0.5, -0.5],
            probabilities: Some(vec![1.0, 0.0]),
        }];
        e.weights = WeightDist::Uniform { low: 0.5, high: 2.0 };
        let data = generate(&e).unwrap();
        assert!(data.records.iter().all(|r| r.covariates == vec![0]));
        assert!(data.records.iter().all(|r| (0.5..2.0).contains(&r.weight)));
        assert_eq!(data.covariates[0].levels, vec!["f", "m"]);
    }

    #[test]
    fn accounting_demo_ranks() {
        for (a, p, cols) in [(2, 2, 5), (5, 5, 17), (9, 6, 27)] {
            let spec = GridSpec::uniform(a, p).unwrap();
            let demo = accounting_demo(&spec).unwrap();
            assert_eq!(demo.columns, cols);
            assert_eq!(demo.rank, cols - 1);
            assert!(demo.max_abs_diff <= 1e-10);
            assert_eq!(demo.apci_rank, demo.apci_columns);
            let diff: f64 = demo
                .solution_a
                .iter()
                .zip(&demo.solution_b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(diff > 0.01);
        }
        let text = accounting_demo(&GridSpec::uniform(5, 5).unwrap()).unwrap().render();
        assert!(text.contains("rank 16 of 17"));
    }

    #[test]
    fn null_vector_touches_all_three_linear_components() {
        let spec = GridSpec::uniform(5, 5).unwrap();
        let demo = accounting_demo(&spec).unwrap();
        let (age, period, cohort) = demo.null_vector_blocks(&spec).unwrap();
        // linear component: projection on centered positions
        let linear = |v: &[f64]| {
            let n = v.len() as f64;
            v.iter().enumerate().map(|(k, x)| (k as f64 - (n - 1.0) / 2.0) * x).sum::<f64>()
        };
        assert!(linear(&age).abs() > 1e-6);
        assert!(linear(&period).abs() > 1e-6);
        assert!(linear(&cohort).abs() > 1e-6);
    }

    #[test]
    fn poly_demo_identity() {
        let demo = poly_demo(&PolyDemoSpec::default()).unwrap();
        assert!(demo.max_abs_diff <= 1e-12);
        assert_eq!(demo.rows.len(), 25);
        let mut bad = PolyDemoSpec::default();
        bad.coefficients[3] = f64::NAN;
        assert!(poly_demo(&bad).is_err());
    }

    #[test]
    fn effects_json_round_trip() {
        let e = TrueEffects::default_scenario(42);
        let text = serde_json::to_string(&e).unwrap();
        assert_eq!(TrueEffects::from_json(&text).unwrap(), e);
        assert!(TrueEffects::from_json("{").is_err());
    }
}

//! The APC-I model and its cohort inference procedure.
//!
//! 1. Global test: main-effects model against the full age-by-period
//!    interaction model, `(a-1)(p-1)` numerator df.
//! 2. Per-cohort deviation magnitude: main-effects model against main effects
//!    plus one free indicator per cell of the cohort, `o` numerator df.
//! 3. Per-cohort contrasts on the full model's sum-to-zero interactions: the
//!    average over the cohort's cells, and unit-norm orthogonal-polynomial
//!    trends over the cohort's life course.
//!
//! Average and linear trend signs are mapped to the life-course hypotheses by
//! [`classify_cohort`].

use std::collections::BTreeMap;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::design::{
    build_design, cell_contrast, covariate_contrast, ContrastPart, Coding, Covariate, DesignError, DesignRow,
    MeanContrasts, ModelTerms,
};
use crate::glm::{
    contrast_t_test, deviance_f_test, f_sf, fit_observations, ContrastTest, Family, FitResult, GlmError,
    GlmOptions, Observations, TestKind, TestResult,
};
use crate::grid::{
    bin_record, diagonal_cells, CellIndex, CellTable, CohortId, CohortScheme, GridError, GridSpec, MicroRecord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApciError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error(transparent)]
    Glm(#[from] GlmError),
    #[error("grid cells with no weighted observations: {}", format_cells(.0))]
    EmptyCells(Vec<CellIndex>),
    #[error("record {id}: outcome {outcome} must lie in [0, 1] for the logit family")]
    InvalidOutcome { id: u64, outcome: f64 },
    #[error("record {id}: {reason}")]
    InvalidRecord { id: u64, reason: String },
    #[error("cohort {cohort} has {cells} cells; at least {required} are needed for this contrast")]
    CohortTooShort {
        cohort: CohortId,
        cells: usize,
        required: usize,
    },
    #[error("cohort {cohort}: augmented design is rank deficient ({source})")]
    AugmentedRankDeficient { cohort: CohortId, source: GlmError },
    #[error("invalid table: {0}")]
    InvalidTable(String),
}

fn format_cells(cells: &[CellIndex]) -> String {
    cells.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
}

/// Order of the orthogonal-polynomial life-course contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolyOrder {
    Linear,
    Quadratic,
}

impl PolyOrder {
    fn degree(self) -> usize {
        match self {
            PolyOrder::Linear => 1,
            PolyOrder::Quadratic => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApciConfig {
    pub family: Family,
    pub coding: Coding,
    pub scheme: CohortScheme,
    /// Significance level for sign classification.
    pub alpha: f64,
    pub glm: GlmOptions,
    /// Also report quadratic life-course contrasts (never used to classify).
    pub quadratic: bool,
}

impl Default for ApciConfig {
    fn default() -> Self {
        Self {
            family: Family::BinomialLogit,
            coding: Coding::Effect,
            scheme: CohortScheme::Diagonal,
            alpha: 0.05,
            glm: GlmOptions::default(),
            quadratic: true,
        }
    }
}

#[derive(Default)]
struct GroupAcc {
    weight: f64,
    mean: f64,
    m2: f64,
    pos_weight: f64,
    count_pos: u64,
    count_neg: u64,
}

/// Records grouped by design row, ready for repeated model fits.
///
/// Logit data become two rows per (cell, covariate pattern) group, one for
/// successes and one for failures, so the grouped binomial deviance equals
/// the record-level `-2 log L`. Gaussian data keep one row per group with the
/// within-group sum of squares pooled into the deviance.
#[derive(Debug, Clone)]
pub struct ApciData {
    pub spec: GridSpec,
    pub covariates: Vec<Covariate>,
    pub family: Family,
    pub rows: Vec<DesignRow>,
    pub obs: Observations,
    pub table: CellTable,
}

impl ApciData {
    pub fn from_records(
        records: &[MicroRecord],
        spec: &GridSpec,
        covariates: &[Covariate],
        family: Family,
    ) -> Result<Self, ApciError> {
        let mut table = CellTable::empty(spec);
        let mut groups: BTreeMap<DesignRow, GroupAcc> = BTreeMap::new();
        for rec in records {
            let cell = bin_record(rec, spec)?;
            if !(rec.weight >= 0.0 && rec.weight.is_finite()) {
                return Err(ApciError::InvalidRecord {
                    id: rec.id,
                    reason: format!("weight {} must be finite and >= 0", rec.weight),
                });
            }
            if !rec.outcome.is_finite() {
                return Err(ApciError::InvalidRecord {
                    id: rec.id,
                    reason: "outcome is not finite".into(),
                });
            }
            if family == Family::BinomialLogit && !(0.0..=1.0).contains(&rec.outcome) {
                return Err(ApciError::InvalidOutcome {
                    id: rec.id,
                    outcome: rec.outcome,
                });
            }
            if rec.covariates.len() != covariates.len() {
                return Err(ApciError::InvalidRecord {
                    id: rec.id,
                    reason: format!("{} covariate levels, expected {}", rec.covariates.len(), covariates.len()),
                });
            }
            for (cov, &l) in covariates.iter().zip(&rec.covariates) {
                if l >= cov.levels.len() {
                    return Err(ApciError::InvalidRecord {
                        id: rec.id,
                        reason: format!("level {l} out of range for covariate '{}'", cov.name),
                    });
                }
            }
            table.add(cell, rec.outcome, rec.weight);
            if rec.weight == 0.0 {
                continue;
            }
            let g = groups
                .entry(DesignRow {
                    cell,
                    covariates: rec.covariates.clone(),
                })
                .or_default();
            g.weight += rec.weight;
            let delta = rec.outcome - g.mean;
            g.mean += rec.weight / g.weight * delta;
            g.m2 += rec.weight * delta * (rec.outcome - g.mean);
            g.pos_weight += rec.weight * rec.outcome;
            if rec.outcome > 0.5 {
                g.count_pos += 1;
            } else {
                g.count_neg += 1;
            }
        }
        let empty = table.empty_cells();
        if !empty.is_empty() {
            return Err(ApciError::EmptyCells(empty));
        }

        let mut rows = Vec::new();
        let mut obs = Observations::new(Vec::new(), Vec::new());
        obs.counts.clear();
        for (row, g) in groups {
            match family {
                Family::BinomialLogit => {
                    let neg_weight = (g.weight - g.pos_weight).max(0.0);
                    for (y, w, n) in [(1.0, g.pos_weight, g.count_pos), (0.0, neg_weight, g.count_neg)] {
                        if w > 0.0 {
                            rows.push(row.clone());
                            obs.y.push(y);
                            obs.weights.push(w);
                            obs.counts.push(n);
                        }
                    }
                }
                Family::GaussianIdentity => {
                    rows.push(row);
                    obs.y.push(g.mean);
                    obs.weights.push(g.weight);
                    obs.counts.push(g.count_pos + g.count_neg);
                    obs.pooled_ss += g.m2.max(0.0);
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            covariates: covariates.to_vec(),
            family,
            rows,
            obs,
            table,
        })
    }

    /// Records with positive weight.
    pub fn n_obs(&self) -> u64 {
        self.obs.effective_n()
    }

    pub fn fit_terms(&self, config: &ApciConfig, terms: ModelTerms) -> Result<FitResult, ApciError> {
        let x = build_design(&self.rows, &self.spec, &config.coding, &self.covariates, terms)?;
        Ok(fit_observations(&x, &self.obs, self.family, &config.glm)?)
    }
}

/// A contrast estimate with its t test; the building block of every reported
/// effect.
pub type Estimate = ContrastTest;

/// The full-model fit with the sum-to-zero decomposition of its cell means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApciFit {
    pub fit: FitResult,
    pub grid: GridSpec,
    pub scheme: CohortScheme,
    /// Grand mean of the cell linear predictors (covariates at their level average).
    pub intercept: Estimate,
    pub age_effects: Vec<Estimate>,
    pub period_effects: Vec<Estimate>,
    /// Sum-to-zero effects per covariate level.
    pub covariate_effects: Vec<Vec<Estimate>>,
    /// `a x p` sum-to-zero interactions, implied cells included.
    pub interaction_matrix: Vec<Vec<Estimate>>,
    pub warnings: Vec<String>,
}

impl ApciFit {
    pub fn interaction_values(&self) -> Vec<Vec<f64>> {
        self.interaction_matrix
            .iter()
            .map(|row| row.iter().map(|e| e.estimate).collect())
            .collect()
    }

    pub fn cohort_cells(&self, k: CohortId) -> Result<Vec<CellIndex>, ApciError> {
        Ok(diagonal_cells(k, &self.grid, &self.scheme)?)
    }

    fn interaction_contrast(&self, cell: CellIndex) -> DVector<f64> {
        cell_contrast(cell, &self.fit.layout, ContrastPart::InteractionOnly)
    }
}

fn estimate(fit: &FitResult, c: &DVector<f64>) -> Result<Estimate, ApciError> {
    match contrast_t_test(fit, c) {
        Ok(e) => Ok(e),
        // exactly determined contrasts (e.g. zero by construction) report se 0
        Err(GlmError::DegenerateContrast(_)) => {
            let est = fit.beta().dot(c);
            Ok(ContrastTest {
                estimate: est,
                se: 0.0,
                test: TestResult {
                    kind: TestKind::T,
                    statistic: f64::NAN,
                    df1: fit.residual_df,
                    df2: None,
                    p_value: f64::NAN,
                },
            })
        }
        Err(e) => Err(e.into()),
    }
}

/// Fits the full APC-I model and expands its interactions to every cell.
pub fn fit_apci(data: &ApciData, config: &ApciConfig) -> Result<ApciFit, ApciError> {
    config.scheme.check(&data.spec)?;
    let fit = data.fit_terms(config, ModelTerms::Interaction)?;
    decompose(fit, &data.spec, &config.scheme)
}

/// Builds the sum-to-zero decomposition from an existing full-model fit.
pub fn decompose(fit: FitResult, spec: &GridSpec, scheme: &CohortScheme) -> Result<ApciFit, ApciError> {
    let layout = &fit.layout;
    let means = MeanContrasts::new(layout);
    let intercept = estimate(&fit, &means.grand)?;
    let age_effects = means.age.iter().map(|c| estimate(&fit, c)).collect::<Result<Vec<_>, _>>()?;
    let period_effects = means.period.iter().map(|c| estimate(&fit, c)).collect::<Result<Vec<_>, _>>()?;
    let covariate_effects = layout
        .covariates
        .iter()
        .enumerate()
        .map(|(f, cov)| {
            (0..cov.levels.len())
                .map(|l| estimate(&fit, &covariate_contrast(layout, f, l)))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let interaction_matrix = (1..=spec.age_groups())
        .map(|i| {
            (1..=spec.periods())
                .map(|j| {
                    let c = cell_contrast(CellIndex { age: i, period: j }, layout, ContrastPart::InteractionOnly);
                    estimate(&fit, &c)
                })
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = ApciFit {
        fit,
        grid: spec.clone(),
        scheme: scheme.clone(),
        intercept,
        age_effects,
        period_effects,
        covariate_effects,
        interaction_matrix,
        warnings: Vec::new(),
    };
    out.warnings = crossover_warnings(&out);
    Ok(out)
}

/// Flags period-to-period steps whose direction for some age group opposes
/// the majority of age groups (a crossover interaction).
fn crossover_warnings(fit: &ApciFit) -> Vec<String> {
    let spec = &fit.grid;
    let eta = |i: usize, j: usize| {
        fit.intercept.estimate
            + fit.age_effects[i].estimate
            + fit.period_effects[j].estimate
            + fit.interaction_matrix[i][j].estimate
    };
    let mut out = Vec::new();
    for j in 0..spec.periods() - 1 {
        let diffs: Vec<f64> = (0..spec.age_groups()).map(|i| eta(i, j + 1) - eta(i, j)).collect();
        let up = diffs.iter().filter(|&&d| d > 1e-12).count();
        let down = diffs.iter().filter(|&&d| d < -1e-12).count();
        if up == 0 || down == 0 || up == down {
            continue;
        }
        let majority_up = up > down;
        let against: Vec<String> = diffs
            .iter()
            .enumerate()
            .filter(|(_, &d)| if majority_up { d < -1e-12 } else { d > 1e-12 })
            .map(|(i, _)| spec.age_label(i + 1))
            .collect();
        out.push(format!(
            "period trend {} -> {} {} for most ages but reverses for ages {}; interpret period main effects with care",
            spec.period_label(j + 1),
            spec.period_label(j + 2),
            if majority_up { "rises" } else { "falls" },
            against.join(", ")
        ));
    }
    out
}

/// Step 1 from prepared data.
pub fn step1_global_test(data: &ApciData, config: &ApciConfig) -> Result<TestResult, ApciError> {
    let main = data.fit_terms(config, ModelTerms::MainEffects)?;
    let full = data.fit_terms(config, ModelTerms::Interaction)?;
    Ok(deviance_f_test(&main, &full)?)
}

/// Step 2 from prepared data.
pub fn step2_cohort_test(data: &ApciData, config: &ApciConfig, k: CohortId) -> Result<TestResult, ApciError> {
    let main = data.fit_terms(config, ModelTerms::MainEffects)?;
    step2_against(data, config, &main, k)
}

fn step2_against(
    data: &ApciData,
    config: &ApciConfig,
    main: &FitResult,
    k: CohortId,
) -> Result<TestResult, ApciError> {
    let cells = diagonal_cells(k, &data.spec, &config.scheme)?;
    let alt = match data.fit_terms(config, ModelTerms::CellIndicators { cells }) {
        Err(ApciError::Glm(e @ GlmError::RankDeficient { .. })) => {
            return Err(ApciError::AugmentedRankDeficient { cohort: k, source: e })
        }
        other => other?,
    };
    Ok(deviance_f_test(main, &alt)?)
}

/// Unit-norm orthogonal polynomial contrast of the given degree over the
/// positions (Gram-Schmidt on `1, x, x^2`). Returns `None` when there are too
/// few distinct positions.
pub fn orthogonal_poly_contrast(positions: &[f64], order: PolyOrder) -> Option<Vec<f64>> {
    let n = positions.len();
    let degree = order.degree();
    let mut distinct = positions.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() <= degree {
        return None;
    }
    let mean = positions.iter().sum::<f64>() / n as f64;
    let spread = positions.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
    let xs: Vec<f64> = positions.iter().map(|x| (x - mean) / spread).collect();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(degree + 1);
    for d in 0..=degree {
        let mut v: Vec<f64> = xs.iter().map(|x| x.powi(d as i32)).collect();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for b in &basis {
                let proj: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return None;
        }
        basis.push(v.into_iter().map(|a| a / norm).collect());
    }
    basis.pop()
}

/// Life-course positions of a cohort's cells: the period index, which along a
/// diagonal advances with age.
pub fn life_course_positions(cells: &[CellIndex]) -> Vec<f64> {
    cells.iter().map(|c| c.period as f64).collect()
}

/// Cohort values read from an `a x p` interaction table.
pub fn cohort_values(
    matrix: &[Vec<f64>],
    spec: &GridSpec,
    scheme: &CohortScheme,
    k: CohortId,
) -> Result<Vec<f64>, ApciError> {
    if matrix.len() != spec.age_groups() || matrix.iter().any(|r| r.len() != spec.periods()) {
        return Err(ApciError::InvalidTable(format!(
            "expected a {}x{} table",
            spec.age_groups(),
            spec.periods()
        )));
    }
    Ok(diagonal_cells(k, spec, scheme)?
        .iter()
        .map(|c| matrix[c.age - 1][c.period - 1])
        .collect())
}

/// Step 3 arithmetic on raw values: the mean of a cohort's interactions.
pub fn average_deviation(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Step 3 arithmetic on raw values: `c . v` for the unit-norm polynomial
/// contrast over the given positions.
pub fn life_course_trend(values: &[f64], positions: &[f64], order: PolyOrder) -> Option<f64> {
    let c = orthogonal_poly_contrast(positions, order)?;
    Some(c.iter().zip(values).map(|(a, b)| a * b).sum())
}

/// Step 3.1: mean of cohort `k`'s interaction terms with its t test.
pub fn step3_average_deviation(fit: &ApciFit, k: CohortId) -> Result<Estimate, ApciError> {
    let cells = fit.cohort_cells(k)?;
    let w = 1.0 / cells.len() as f64;
    let c = cells
        .iter()
        .fold(DVector::zeros(fit.fit.ncols()), |acc, &cell| acc + fit.interaction_contrast(cell) * w);
    estimate(&fit.fit, &c)
}

/// Step 3.2: unit-norm orthogonal-polynomial trend of cohort `k`'s
/// interaction terms with its t test.
pub fn step3_life_course_contrast(fit: &ApciFit, k: CohortId, order: PolyOrder) -> Result<Estimate, ApciError> {
    let cells = fit.cohort_cells(k)?;
    let weights = orthogonal_poly_contrast(&life_course_positions(&cells), order).ok_or(
        ApciError::CohortTooShort {
            cohort: k,
            cells: cells.len(),
            required: order.degree() + 1,
        },
    )?;
    let c = cells
        .iter()
        .zip(&weights)
        .fold(DVector::zeros(fit.fit.ncols()), |acc, (&cell, &w)| acc + fit.interaction_contrast(cell) * w);
    estimate(&fit.fit, &c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    Zero,
    Negative,
}

impl Sign {
    /// Significant sign at level `alpha` (two-sided `p < alpha`), else zero.
    pub fn of(estimate: &Estimate, alpha: f64) -> Sign {
        if estimate.p_value() < alpha {
            if estimate.estimate > 0.0 {
                Sign::Positive
            } else if estimate.estimate < 0.0 {
                Sign::Negative
            } else {
                Sign::Zero
            }
        } else {
            Sign::Zero
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    CumulativeAdvantage,
    CumulativeDisadvantage,
    Leveling,
    Constant,
    NoClearPattern,
}

impl Classification {
    pub fn label(self) -> &'static str {
        match self {
            Classification::CumulativeAdvantage => "cumulative advantage",
            Classification::CumulativeDisadvantage => "cumulative disadvantage",
            Classification::Leveling => "leveling",
            Classification::Constant => "constant",
            Classification::NoClearPattern => "no clear pattern",
        }
    }
}

/// Life-course hypothesis supported by the (average, linear trend) signs.
pub fn classify_cohort(average: Sign, slope: Sign) -> Classification {
    use Sign::*;
    match (average, slope) {
        (Positive, Positive) => Classification::CumulativeAdvantage,
        (Negative, Negative) => Classification::CumulativeDisadvantage,
        (Positive, Negative) | (Negative, Positive) => Classification::Leveling,
        (Zero, Positive) | (Zero, Negative) => Classification::Leveling,
        (Positive, Zero) | (Negative, Zero) => Classification::Constant,
        (Zero, Zero) => Classification::NoClearPattern,
    }
}

/// Everything computed for one cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortReport {
    pub cohort: CohortId,
    pub label: String,
    /// Number of interaction cells in the cohort.
    pub cells: usize,
    pub cell_list: Vec<CellIndex>,
    /// Step 2 deviation-magnitude test; absent if the augmented fit failed.
    pub magnitude: Option<TestResult>,
    pub average: Estimate,
    pub slope: Option<Estimate>,
    pub quadratic: Option<Estimate>,
    pub classification: Option<Classification>,
    /// Two or fewer cells: trends rest on very little information.
    pub short_cohort: bool,
    /// A single cell: no life-course trend exists.
    pub no_slope: bool,
    pub notes: Vec<String>,
}

/// Fixed facts about how the statistics were produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metadata {
    pub family: Family,
    pub coding: Coding,
    pub alpha: f64,
    pub n_obs: u64,
    pub weighted_n: f64,
    pub notes: Vec<String>,
}

/// Complete output of the three-step procedure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApciResults {
    #[serde(flatten)]
    pub model: ApciFit,
    pub main_effects_fit: FitResult,
    pub global_test: TestResult,
    pub cohorts: Vec<CohortReport>,
    pub metadata: Metadata,
}

fn cohort_report(
    data: &ApciData,
    config: &ApciConfig,
    fit: &ApciFit,
    main: &FitResult,
    k: CohortId,
) -> Result<CohortReport, ApciError> {
    let cells = fit.cohort_cells(k)?;
    let o = cells.len();
    let mut notes = Vec::new();
    let magnitude = match step2_against(data, config, main, k) {
        Ok(t) => Some(t),
        Err(e @ ApciError::AugmentedRankDeficient { .. }) => {
            notes.push(e.to_string());
            None
        }
        Err(e) => return Err(e),
    };
    let average = step3_average_deviation(fit, k)?;
    let slope = match step3_life_course_contrast(fit, k, PolyOrder::Linear) {
        Ok(s) => Some(s),
        Err(ApciError::CohortTooShort { .. }) => None,
        Err(e) => return Err(e),
    };
    let quadratic = if config.quadratic {
        match step3_life_course_contrast(fit, k, PolyOrder::Quadratic) {
            Ok(s) => Some(s),
            Err(ApciError::CohortTooShort { .. }) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    let no_slope = slope.is_none();
    let short_cohort = o <= 2;
    if no_slope {
        notes.push("single interaction cell: no life-course slope".into());
    } else if short_cohort {
        notes.push("two or fewer interaction cells: interpret the slope with caution".into());
    }
    let classification = match (&magnitude, &slope) {
        (Some(_), Some(s)) => Some(classify_cohort(Sign::of(&average, config.alpha), Sign::of(s, config.alpha))),
        _ => None,
    };
    Ok(CohortReport {
        cohort: k,
        label: config.scheme.label(&data.spec, k),
        cells: o,
        cell_list: cells,
        magnitude,
        average,
        slope,
        quadratic,
        classification,
        short_cohort,
        no_slope,
        notes,
    })
}

/// Runs Steps 1-3 for every cohort. Per-cohort refits run on the current
/// rayon pool.
pub fn run_procedure(data: &ApciData, config: &ApciConfig) -> Result<ApciResults, ApciError> {
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(ApciError::InvalidTable(format!("alpha {} outside (0, 1)", config.alpha)));
    }
    config.scheme.check(&data.spec)?;
    let main = data.fit_terms(config, ModelTerms::MainEffects)?;
    let full = data.fit_terms(config, ModelTerms::Interaction)?;
    let global_test = deviance_f_test(&main, &full)?;
    let model = decompose(full, &data.spec, &config.scheme)?;
    let cohorts = config
        .scheme
        .cohort_ids(&data.spec)
        .into_par_iter()
        .map(|k| cohort_report(data, config, &model, &main, k))
        .collect::<Result<Vec<_>, _>>()?;
    let mut notes = vec![
        "weights enter as precision weights; design-based (replicate) variance is not estimated".to_string(),
        "F = ((D0 - D1) / df1) / (D1 / df2) with df2 the residual df of the larger model".to_string(),
        "step 3 contrasts use the full APC-I model covariance".to_string(),
        "life-course contrasts use equally spaced positions along each cohort".to_string(),
    ];
    if data.family == Family::BinomialLogit {
        notes.push("binomial dispersion fixed at 1; p-values from F and t reference distributions".into());
    }
    Ok(ApciResults {
        metadata: Metadata {
            family: data.family,
            coding: config.coding.clone(),
            alpha: config.alpha,
            n_obs: data.n_obs(),
            weighted_n: data.obs.weighted_n(),
            notes,
        },
        model,
        main_effects_fit: main,
        global_test,
        cohorts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternMode {
    /// One curve per period over ages: intercept + age effect + interaction.
    AgeByPeriod,
    /// One curve per age group over periods: intercept + period effect + interaction.
    PeriodByAge,
    /// Intercept plus one main-effect set, for both axes.
    MainsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Age,
    Period,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternPoint {
    pub mode: PatternMode,
    /// What the x position indexes.
    pub axis: Axis,
    /// Conditioning group label, or "main" for main-effect curves.
    pub curve: String,
    pub x: usize,
    pub x_label: String,
    pub linear_predictor: f64,
    pub value: f64,
}

/// Plot-ready predicted patterns on the linear-predictor and response scales.
pub fn extract_patterns(fit: &ApciFit, mode: PatternMode) -> Vec<PatternPoint> {
    let spec = &fit.grid;
    let mu = fit.intercept.estimate;
    let family = fit.fit.family;
    let point = |axis, curve: String, x: usize, eta: f64| PatternPoint {
        mode,
        axis,
        curve,
        x,
        x_label: match axis {
            Axis::Age => spec.age_label(x),
            Axis::Period => spec.period_label(x),
        },
        linear_predictor: eta,
        value: family.inverse_link(eta),
    };
    let ab = |i: usize, j: usize| fit.interaction_matrix[i - 1][j - 1].estimate;
    let mut out = Vec::new();
    match mode {
        PatternMode::AgeByPeriod => {
            for j in 1..=spec.periods() {
                for i in 1..=spec.age_groups() {
                    let eta = mu + fit.age_effects[i - 1].estimate + ab(i, j);
                    out.push(point(Axis::Age, spec.period_label(j), i, eta));
                }
            }
        }
        PatternMode::PeriodByAge => {
            for i in 1..=spec.age_groups() {
                for j in 1..=spec.periods() {
                    let eta = mu + fit.period_effects[j - 1].estimate + ab(i, j);
                    out.push(point(Axis::Period, spec.age_label(i), j, eta));
                }
            }
        }
        PatternMode::MainsOnly => {
            for i in 1..=spec.age_groups() {
                out.push(point(Axis::Age, "main".into(), i, mu + fit.age_effects[i - 1].estimate));
            }
            for j in 1..=spec.periods() {
                out.push(point(Axis::Period, "main".into(), j, mu + fit.period_effects[j - 1].estimate));
            }
        }
    }
    out
}

/// Tukey's one-degree-of-freedom test for non-additivity on a table with one
/// observation per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyResult {
    pub test: TestResult,
    pub ss_nonadditivity: f64,
    pub ss_residual: f64,
    pub warning: Option<String>,
}

pub fn tukey_additivity_test(table: &[Vec<f64>]) -> Result<TukeyResult, ApciError> {
    let a = table.len();
    let p = table.first().map_or(0, Vec::len);
    if a < 2 || p < 2 || table.iter().any(|r| r.len() != p) {
        return Err(ApciError::InvalidTable("need a rectangular table with at least 2 rows and 2 columns".into()));
    }
    if table.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ApciError::InvalidTable("table has non-finite entries".into()));
    }
    let df_resid = (a - 1) * (p - 1);
    if df_resid < 2 {
        return Err(ApciError::InvalidTable("2x2 tables leave no residual df after the 1-df term".into()));
    }
    let df2 = (df_resid - 1) as f64;
    let grand = table.iter().flatten().sum::<f64>() / (a * p) as f64;
    let r: Vec<f64> = table.iter().map(|row| row.iter().sum::<f64>() / p as f64 - grand).collect();
    let c: Vec<f64> = (0..p)
        .map(|j| table.iter().map(|row| row[j]).sum::<f64>() / a as f64 - grand)
        .collect();
    let mut ss_resid = 0.0;
    let mut cross = 0.0;
    for i in 0..a {
        for j in 0..p {
            let e = table[i][j] - grand - r[i] - c[j];
            ss_resid += e * e;
            cross += e * r[i] * c[j];
        }
    }
    let rr: f64 = r.iter().map(|x| x * x).sum();
    let cc: f64 = c.iter().map(|x| x * x).sum();
    let scale = table.iter().flatten().map(|v| (v - grand).powi(2)).sum::<f64>();
    let tiny = 1e-24 * (1.0 + scale);
    let result = |stat: f64, ss_nonadd: f64, warning: Option<String>| TukeyResult {
        test: TestResult {
            kind: TestKind::F,
            statistic: stat,
            df1: 1.0,
            df2: Some(df2),
            p_value: f_sf(stat, 1.0, df2),
        },
        ss_nonadditivity: ss_nonadd,
        ss_residual: ss_resid,
        warning,
    };
    if rr <= tiny || cc <= tiny {
        return Ok(result(
            0.0,
            0.0,
            Some("all row or all column effects are zero; the non-additivity term is undefined".into()),
        ));
    }
    let ss_nonadd = cross * cross / (rr * cc);
    if ss_nonadd <= 1e-12 * (scale + tiny) || ss_resid <= tiny {
        return Ok(result(0.0, ss_nonadd, None));
    }
    let remainder = ss_resid - ss_nonadd;
    if remainder <= 1e-12 * ss_resid {
        return Ok(result(
            f64::INFINITY,
            ss_nonadd,
            Some("residuals are exactly multiplicative in the row and column effects; F is unbounded".into()),
        ));
    }
    Ok(result(ss_nonadd / (remainder / df2), ss_nonadd, None))
}

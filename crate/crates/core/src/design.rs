//! Coded regression designs for the APC-I, main-effects, accounting, and
//! per-cohort augmented models.
//!
//! Column order is fixed: intercept, age, period, covariates (in the order
//! given), then whichever of the age-by-period interaction, cohort, or
//! cell-indicator blocks the model uses. Interaction columns are elementwise
//! products of the coded age and period columns, so under effect coding the
//! implied last-row and last-column cells come out as negative sums of the free
//! parameters without extra bookkeeping.

use std::fmt;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{diagonal_of, CellIndex, GridSpec};
use crate::linalg::{svd_rank, RankInfo};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DesignError {
    #[error("covariate '{0}' has a single level; no contrast is possible")]
    SingleLevelCovariate(String),
    #[error("row {row}: expected {expected} covariate levels, got {got}")]
    CovariateArity { row: usize, expected: usize, got: usize },
    #[error("row {row}: level {level} out of range for covariate '{name}' ({levels} levels)")]
    LevelOutOfRange {
        row: usize,
        name: String,
        level: usize,
        levels: usize,
    },
    #[error("row {row}: cell {cell} is outside the grid")]
    CellOutOfRange { row: usize, cell: CellIndex },
    #[error("dummy reference level {reference} out of range for factor '{factor}'")]
    BadReference { factor: String, reference: usize },
}

/// Reference levels (0-based) for dummy coding. Missing covariate entries
/// default to the first level.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DummyReferences {
    pub age: usize,
    pub period: usize,
    pub cohort: usize,
    #[serde(default)]
    pub covariates: Vec<usize>,
}

/// Categorical coding scheme applied to every factor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Coding {
    /// Sum-to-zero: the last level is coded -1 in every column of its factor.
    #[default]
    Effect,
    /// Treatment coding against a reference level.
    Dummy(DummyReferences),
}

impl Coding {
    pub fn dummy() -> Self {
        Coding::Dummy(DummyReferences::default())
    }

    fn factor(&self, which: FactorKind) -> FactorCoding {
        match self {
            Coding::Effect => FactorCoding::Effect,
            Coding::Dummy(r) => FactorCoding::Dummy(match which {
                FactorKind::Age => r.age,
                FactorKind::Period => r.period,
                FactorKind::Cohort => r.cohort,
                FactorKind::Covariate(f) => r.covariates.get(f).copied().unwrap_or(0),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum FactorKind {
    Age,
    Period,
    Cohort,
    Covariate(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorCoding {
    Effect,
    Dummy(usize),
}

impl FactorCoding {
    /// Levels (0-based) that get their own column.
    pub fn kept_levels(self, levels: usize) -> Vec<usize> {
        match self {
            FactorCoding::Effect => (0..levels - 1).collect(),
            FactorCoding::Dummy(r) => (0..levels).filter(|&l| l != r).collect(),
        }
    }

    /// Coded row for a 0-based level.
    pub fn code(self, level: usize, levels: usize) -> Vec<f64> {
        match self {
            FactorCoding::Effect if level == levels - 1 => vec![-1.0; levels - 1],
            _ => self
                .kept_levels(levels)
                .into_iter()
                .map(|l| if l == level { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    /// Average of the coded rows over all levels.
    pub fn mean_code(self, levels: usize) -> Vec<f64> {
        match self {
            FactorCoding::Effect => vec![0.0; levels - 1],
            FactorCoding::Dummy(_) => vec![1.0 / levels as f64; levels - 1],
        }
    }
}

/// A categorical covariate entering as a main effect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub levels: Vec<String>,
}

impl Covariate {
    pub fn new(name: impl Into<String>, levels: Vec<String>) -> Self {
        Self {
            name: name.into(),
            levels,
        }
    }
}

/// Which structured terms follow the main effects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelTerms {
    /// Age and period mains only.
    MainEffects,
    /// Mains plus the full coded age-by-period interaction.
    Interaction,
    /// Mains plus coded cohort effects (the additive accounting model).
    Accounting,
    /// Mains plus one free indicator per listed cell.
    CellIndicators { cells: Vec<CellIndex> },
}

/// What a design column represents. Age, period, and cohort levels are
/// 1-based grid indices; covariate levels are 0-based indices into
/// [`Covariate::levels`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "term")]
pub enum ColumnTag {
    Intercept,
    Age { level: usize },
    Period { level: usize },
    Covariate { factor: usize, level: usize },
    AgePeriod { age: usize, period: usize },
    Cohort { level: usize },
    CellIndicator { age: usize, period: usize },
}

impl fmt::Display for ColumnTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ColumnTag::Intercept => write!(f, "intercept"),
            ColumnTag::Age { level } => write!(f, "age[{level}]"),
            ColumnTag::Period { level } => write!(f, "period[{level}]"),
            ColumnTag::Covariate { factor, level } => write!(f, "cov{factor}[{level}]"),
            ColumnTag::AgePeriod { age, period } => write!(f, "age[{age}]:period[{period}]"),
            ColumnTag::Cohort { level } => write!(f, "cohort[{level}]"),
            ColumnTag::CellIndicator { age, period } => write!(f, "cell[{age},{period}]"),
        }
    }
}

/// Column map of a coded design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermLayout {
    pub a: usize,
    pub p: usize,
    pub coding: Coding,
    pub covariates: Vec<Covariate>,
    pub terms: ModelTerms,
    pub columns: Vec<ColumnTag>,
    pub age: Range<usize>,
    pub period: Range<usize>,
    pub covariate_blocks: Vec<Range<usize>>,
    /// Interaction, cohort, or indicator block, depending on `terms`.
    pub extra: Range<usize>,
}

impl TermLayout {
    pub fn new(
        spec: &GridSpec,
        coding: &Coding,
        covariates: &[Covariate],
        terms: ModelTerms,
    ) -> Result<Self, DesignError> {
        let a = spec.age_groups();
        let p = spec.periods();
        let check_ref = |name: &str, kind: FactorKind, levels: usize| match coding.factor(kind) {
            FactorCoding::Dummy(r) if r >= levels => Err(DesignError::BadReference {
                factor: name.to_string(),
                reference: r,
            }),
            _ => Ok(()),
        };
        check_ref("age", FactorKind::Age, a)?;
        check_ref("period", FactorKind::Period, p)?;
        if terms == ModelTerms::Accounting {
            check_ref("cohort", FactorKind::Cohort, a + p - 1)?;
        }
        for (f, cov) in covariates.iter().enumerate() {
            if cov.levels.len() < 2 {
                return Err(DesignError::SingleLevelCovariate(cov.name.clone()));
            }
            check_ref(&cov.name, FactorKind::Covariate(f), cov.levels.len())?;
        }

        let mut columns = vec![ColumnTag::Intercept];
        let age_levels = coding.factor(FactorKind::Age).kept_levels(a);
        let period_levels = coding.factor(FactorKind::Period).kept_levels(p);
        let start = columns.len();
        columns.extend(age_levels.iter().map(|&l| ColumnTag::Age { level: l + 1 }));
        let age = start..columns.len();
        let start = columns.len();
        columns.extend(period_levels.iter().map(|&l| ColumnTag::Period { level: l + 1 }));
        let period = start..columns.len();
        let mut covariate_blocks = Vec::with_capacity(covariates.len());
        for (f, cov) in covariates.iter().enumerate() {
            let start = columns.len();
            let kept = coding.factor(FactorKind::Covariate(f)).kept_levels(cov.levels.len());
            columns.extend(kept.into_iter().map(|level| ColumnTag::Covariate { factor: f, level }));
            covariate_blocks.push(start..columns.len());
        }
        let start = columns.len();
        match &terms {
            ModelTerms::MainEffects => {}
            ModelTerms::Interaction => {
                for &i in &age_levels {
                    for &j in &period_levels {
                        columns.push(ColumnTag::AgePeriod {
                            age: i + 1,
                            period: j + 1,
                        });
                    }
                }
            }
            ModelTerms::Accounting => {
                let kept = coding.factor(FactorKind::Cohort).kept_levels(a + p - 1);
                columns.extend(kept.into_iter().map(|l| ColumnTag::Cohort { level: l + 1 }));
            }
            ModelTerms::CellIndicators { cells } => {
                columns.extend(cells.iter().map(|c| ColumnTag::CellIndicator {
                    age: c.age,
                    period: c.period,
                }));
            }
        }
        let extra = start..columns.len();
        Ok(Self {
            a,
            p,
            coding: coding.clone(),
            covariates: covariates.to_vec(),
            terms,
            columns,
            age,
            period,
            covariate_blocks,
            extra,
        })
    }

    pub fn ncols(&self) -> usize {
        self.columns.len()
    }

    /// Human-readable column name using covariate and level labels.
    pub fn column_name(&self, col: usize) -> String {
        match self.columns[col] {
            ColumnTag::Covariate { factor, level } => {
                let cov = &self.covariates[factor];
                format!("{}[{}]", cov.name, cov.levels[level])
            }
            tag => tag.to_string(),
        }
    }

    fn age_coding(&self) -> FactorCoding {
        self.coding.factor(FactorKind::Age)
    }

    fn period_coding(&self) -> FactorCoding {
        self.coding.factor(FactorKind::Period)
    }

    fn fill_structure(&self, cell: CellIndex, out: &mut [f64]) {
        out[0] = 1.0;
        let ac = self.age_coding().code(cell.age - 1, self.a);
        let pc = self.period_coding().code(cell.period - 1, self.p);
        out[self.age.clone()].copy_from_slice(&ac);
        out[self.period.clone()].copy_from_slice(&pc);
        let extra = &mut out[self.extra.clone()];
        match &self.terms {
            ModelTerms::MainEffects => {}
            ModelTerms::Interaction => {
                let np = pc.len();
                for (x, &av) in ac.iter().enumerate() {
                    for (y, &pv) in pc.iter().enumerate() {
                        extra[x * np + y] = av * pv;
                    }
                }
            }
            ModelTerms::Accounting => {
                let k = diagonal_of(cell, self.a).0;
                let cc = self.coding.factor(FactorKind::Cohort).code(k - 1, self.a + self.p - 1);
                extra.copy_from_slice(&cc);
            }
            ModelTerms::CellIndicators { cells } => {
                for (slot, c) in extra.iter_mut().zip(cells) {
                    *slot = if *c == cell { 1.0 } else { 0.0 };
                }
            }
        }
    }

    /// The coded design row for a cell with the given covariate levels.
    pub fn row(&self, cell: CellIndex, covariates: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols()];
        self.fill_structure(cell, &mut out);
        for (f, block) in self.covariate_blocks.iter().enumerate() {
            let code = self.coding.factor(FactorKind::Covariate(f)).code(covariates[f], self.covariates[f].levels.len());
            out[block.clone()].copy_from_slice(&code);
        }
        out
    }

    /// The cell's design row with each covariate averaged over its levels.
    fn mean_row(&self, cell: CellIndex) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols()];
        self.fill_structure(cell, &mut out);
        for (f, block) in self.covariate_blocks.iter().enumerate() {
            let code = self.coding.factor(FactorKind::Covariate(f)).mean_code(self.covariates[f].levels.len());
            out[block.clone()].copy_from_slice(&code);
        }
        out
    }

    fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        let p = self.p;
        (1..=self.a).flat_map(move |i| (1..=p).map(move |j| CellIndex { age: i, period: j }))
    }
}

/// A single design row: the grid cell plus covariate levels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DesignRow {
    pub cell: CellIndex,
    pub covariates: Vec<usize>,
}

impl DesignRow {
    pub fn cell(cell: CellIndex) -> Self {
        Self {
            cell,
            covariates: Vec::new(),
        }
    }
}

/// A coded design with its column map.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub x: DMatrix<f64>,
    pub layout: TermLayout,
}

impl DesignMatrix {
    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }
}

/// Builds a design for any model on the given rows.
pub fn build_design(
    rows: &[DesignRow],
    spec: &GridSpec,
    coding: &Coding,
    covariates: &[Covariate],
    terms: ModelTerms,
) -> Result<DesignMatrix, DesignError> {
    let layout = TermLayout::new(spec, coding, covariates, terms)?;
    let mut x = DMatrix::zeros(rows.len(), layout.ncols());
    for (r, row) in rows.iter().enumerate() {
        if row.cell.age == 0 || row.cell.period == 0 || row.cell.age > layout.a || row.cell.period > layout.p {
            return Err(DesignError::CellOutOfRange { row: r, cell: row.cell });
        }
        if row.covariates.len() != covariates.len() {
            return Err(DesignError::CovariateArity {
                row: r,
                expected: covariates.len(),
                got: row.covariates.len(),
            });
        }
        for (cov, &level) in covariates.iter().zip(&row.covariates) {
            if level >= cov.levels.len() {
                return Err(DesignError::LevelOutOfRange {
                    row: r,
                    name: cov.name.clone(),
                    level,
                    levels: cov.levels.len(),
                });
            }
        }
        let values = layout.row(row.cell, &row.covariates);
        x.row_mut(r).copy_from_slice(&values);
    }
    Ok(DesignMatrix { x, layout })
}

/// APC-I design: mains, covariates, and the full age-by-period interaction.
pub fn build_apci_design(
    rows: &[DesignRow],
    spec: &GridSpec,
    coding: &Coding,
    covariates: &[Covariate],
) -> Result<DesignMatrix, DesignError> {
    build_design(rows, spec, coding, covariates, ModelTerms::Interaction)
}

/// The additive age + period + cohort design, one row per given cell.
pub fn build_accounting_design(
    cells: &[CellIndex],
    spec: &GridSpec,
    coding: &Coding,
) -> Result<DesignMatrix, DesignError> {
    let rows: Vec<DesignRow> = cells.iter().copied().map(DesignRow::cell).collect();
    build_design(&rows, spec, coding, &[], ModelTerms::Accounting)
}

/// One row per grid cell, row-major.
pub fn grid_rows(spec: &GridSpec) -> Vec<DesignRow> {
    spec.iter_cells().map(DesignRow::cell).collect()
}

/// Numerical rank and orthonormal null-space basis of a design.
pub fn rank_and_nullspace(x: &DesignMatrix) -> RankInfo {
    svd_rank(&x.x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastPart {
    /// The sum-to-zero age-by-period interaction of the cell.
    InteractionOnly,
    /// The cell's full linear predictor, covariates at their level average.
    FullMean,
}

/// Contrast vector `c` over the layout's columns such that `c . beta` is the
/// requested cell quantity.
///
/// Under effect coding with an interaction block, the interaction part is read
/// directly off the product columns. Otherwise it is the double-centred
/// full-mean contrast, which is the same sum-to-zero estimand for any coding.
pub fn cell_contrast(cell: CellIndex, layout: &TermLayout, part: ContrastPart) -> DVector<f64> {
    match part {
        ContrastPart::FullMean => DVector::from_vec(layout.mean_row(cell)),
        ContrastPart::InteractionOnly
            if layout.coding == Coding::Effect && layout.terms == ModelTerms::Interaction =>
        {
            let full = layout.mean_row(cell);
            let mut c = DVector::zeros(layout.ncols());
            for col in layout.extra.clone() {
                c[col] = full[col];
            }
            c
        }
        ContrastPart::InteractionOnly => {
            let means = MeanContrasts::new(layout);
            let full = DVector::from_vec(layout.mean_row(cell));
            full - &means.age[cell.age - 1] - &means.period[cell.period - 1] - &means.grand
        }
    }
}

/// Contrasts for the balanced sum-to-zero decomposition of cell means:
/// grand mean, age effects (row mean minus grand mean), and period effects.
#[derive(Debug, Clone)]
pub struct MeanContrasts {
    pub grand: DVector<f64>,
    pub age: Vec<DVector<f64>>,
    pub period: Vec<DVector<f64>>,
}

impl MeanContrasts {
    pub fn new(layout: &TermLayout) -> Self {
        let n = layout.ncols();
        let (a, p) = (layout.a, layout.p);
        let rows: Vec<DVector<f64>> = layout
            .cells()
            .map(|c| DVector::from_vec(layout.mean_row(c)))
            .collect();
        let mut grand = DVector::zeros(n);
        let mut age = vec![DVector::zeros(n); a];
        let mut period = vec![DVector::zeros(n); p];
        for (idx, r) in rows.iter().enumerate() {
            let (i, j) = (idx / p, idx % p);
            grand += r;
            age[i] += r;
            period[j] += r;
        }
        grand /= (a * p) as f64;
        for v in &mut age {
            *v /= p as f64;
            *v -= &grand;
        }
        for v in &mut period {
            *v /= a as f64;
            *v -= &grand;
        }
        Self { grand, age, period }
    }
}

/// Sum-to-zero effect contrast of one covariate level: its coded row minus
/// the average coded row of the factor.
pub fn covariate_contrast(layout: &TermLayout, factor: usize, level: usize) -> DVector<f64> {
    let mut c = DVector::zeros(layout.ncols());
    let levels = layout.covariates[factor].levels.len();
    let fc = layout.coding.factor(FactorKind::Covariate(factor));
    let code = fc.code(level, levels);
    let mean = fc.mean_code(levels);
    for (k, col) in layout.covariate_blocks[factor].clone().enumerate() {
        c[col] = code[k] - mean[k];
    }
    c
}

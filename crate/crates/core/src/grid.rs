//! Age-by-period grids, record binning, and diagonal cohort indexing.
//!
//! Age groups are indexed `1..=a` and periods `1..=p`. A cell `(i, j)` lies on
//! the cohort diagonal `k = a - i + j`, so `k = 1` is the oldest age group in
//! the first period and `k = a + p - 1` the youngest group in the last period.
//!
//! Bins are half-open `[lo, hi)` except the last bin of each axis, which is
//! closed at its upper break so a short terminal period (e.g. 2015-2017) can be
//! expressed by its last year.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("{axis} breaks must be strictly increasing, got {breaks:?}")]
    BreaksNotIncreasing { axis: &'static str, breaks: Vec<i64> },
    #[error("{axis} needs at least 2 groups (3 breaks), got {groups} groups")]
    TooFewGroups { axis: &'static str, groups: usize },
    #[error("expected {expected} cohort labels (a + p - 1), got {got}")]
    CohortLabelCount { expected: usize, got: usize },
    #[error("record {id}: age {age} outside the grid range [{lo}, {hi}]")]
    AgeOutOfRange { id: u64, age: i64, lo: i64, hi: i64 },
    #[error("record {id}: year {year} outside the grid range [{lo}, {hi}]")]
    YearOutOfRange { id: u64, year: i64, lo: i64, hi: i64 },
    #[error("cell (age {age}, period {period}) is outside a {a}x{p} grid")]
    InvalidCell { age: usize, period: usize, a: usize, p: usize },
    #[error("unknown cohort {0}")]
    UnknownCohort(usize),
    #[error("custom cohort scheme: {0}")]
    InvalidScheme(String),
    #[error("invalid grid json: {0}")]
    Json(String),
}

/// Age and period binning plus the labels of the `a + p - 1` diagonal cohorts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGridSpec")]
pub struct GridSpec {
    age_breaks: Vec<i64>,
    period_breaks: Vec<i64>,
    #[serde(serialize_with = "serialize_labels")]
    cohort_labels: Vec<String>,
}

#[derive(Deserialize)]
struct RawGridSpec {
    age_breaks: Vec<i64>,
    period_breaks: Vec<i64>,
    #[serde(default, deserialize_with = "deserialize_labels")]
    cohort_labels: Option<Vec<String>>,
}

impl TryFrom<RawGridSpec> for GridSpec {
    type Error = GridError;

    fn try_from(raw: RawGridSpec) -> Result<Self, Self::Error> {
        match raw.cohort_labels {
            Some(labels) => GridSpec::new(raw.age_breaks, raw.period_breaks, labels),
            None => GridSpec::with_default_labels(raw.age_breaks, raw.period_breaks),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Label {
    Int(i64),
    Float(f64),
    Text(String),
}

fn deserialize_labels<'de, D>(d: D) -> Result<Option<Vec<String>>, D::Error>
where
    D: Deserializer<'de>,
{
    let raw: Option<Vec<Label>> = Option::deserialize(d)?;
    Ok(raw.map(|v| {
        v.into_iter()
            .map(|l| match l {
                Label::Int(i) => i.to_string(),
                Label::Float(f) => f.to_string(),
                Label::Text(s) => s,
            })
            .collect()
    }))
}

// Numeric labels round-trip as numbers.
fn serialize_labels<S: serde::Serializer>(labels: &[String], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(labels.len()))?;
    for l in labels {
        match l.parse::<i64>() {
            Ok(i) if i.to_string() == *l => seq.serialize_element(&i)?,
            _ => seq.serialize_element(l)?,
        }
    }
    seq.end()
}

fn check_breaks(axis: &'static str, breaks: &[i64]) -> Result<(), GridError> {
    if breaks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(GridError::BreaksNotIncreasing {
            axis,
            breaks: breaks.to_vec(),
        });
    }
    let groups = breaks.len().saturating_sub(1);
    if groups < 2 {
        return Err(GridError::TooFewGroups { axis, groups });
    }
    Ok(())
}

fn locate(breaks: &[i64], value: i64) -> Option<usize> {
    let n = breaks.len() - 1;
    if value < breaks[0] || value > breaks[n] {
        return None;
    }
    if value == breaks[n] {
        return Some(n);
    }
    // partition_point gives the number of breaks <= value
    Some(breaks.partition_point(|&b| b <= value))
}

fn bin_label(breaks: &[i64], idx: usize) -> String {
    let n = breaks.len() - 1;
    let lo = breaks[idx - 1];
    let hi = if idx == n { breaks[idx] } else { breaks[idx] - 1 };
    if hi <= lo {
        lo.to_string()
    } else {
        format!("{lo}-{hi}")
    }
}

impl GridSpec {
    pub fn new(
        age_breaks: Vec<i64>,
        period_breaks: Vec<i64>,
        cohort_labels: Vec<String>,
    ) -> Result<Self, GridError> {
        check_breaks("age", &age_breaks)?;
        check_breaks("period", &period_breaks)?;
        let expected = age_breaks.len() + period_breaks.len() - 3;
        if cohort_labels.len() != expected {
            return Err(GridError::CohortLabelCount {
                expected,
                got: cohort_labels.len(),
            });
        }
        Ok(Self {
            age_breaks,
            period_breaks,
            cohort_labels,
        })
    }

    /// Labels each cohort by its central birth year: the first period's start
    /// minus the oldest age group's start, stepping by the first age-bin width.
    pub fn with_default_labels(
        age_breaks: Vec<i64>,
        period_breaks: Vec<i64>,
    ) -> Result<Self, GridError> {
        check_breaks("age", &age_breaks)?;
        check_breaks("period", &period_breaks)?;
        let a = age_breaks.len() - 1;
        let p = period_breaks.len() - 1;
        let first = period_breaks[0] - age_breaks[a - 1];
        let step = age_breaks[1] - age_breaks[0];
        let labels = (0..(a + p - 1) as i64)
            .map(|k| (first + step * k).to_string())
            .collect();
        Self::new(age_breaks, period_breaks, labels)
    }

    /// An `a x p` grid of unit-width bins starting at zero; handy for tests
    /// and demonstrations where only the shape matters.
    pub fn uniform(a: usize, p: usize) -> Result<Self, GridError> {
        let age = (0..=a as i64).collect();
        let period = (0..=p as i64).collect();
        let labels = (1..a + p).map(|k| k.to_string()).collect();
        Self::new(age, period, labels)
    }

    /// Nine five-year age groups 20-64 by six periods 1990-2017, with
    /// fourteen cohorts labelled 1930 through 1995.
    pub fn cps_1990_2017() -> Self {
        Self::new(
            vec![20, 25, 30, 35, 40, 45, 50, 55, 60, 64],
            vec![1990, 1995, 2000, 2005, 2010, 2015, 2017],
            (0..14).map(|k| (1930 + 5 * k).to_string()).collect(),
        )
        .expect("static grid is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, GridError> {
        serde_json::from_str(text).map_err(|e| GridError::Json(e.to_string()))
    }

    pub fn age_groups(&self) -> usize {
        self.age_breaks.len() - 1
    }

    pub fn periods(&self) -> usize {
        self.period_breaks.len() - 1
    }

    pub fn cohorts(&self) -> usize {
        self.age_groups() + self.periods() - 1
    }

    pub fn cells(&self) -> usize {
        self.age_groups() * self.periods()
    }

    pub fn age_breaks(&self) -> &[i64] {
        &self.age_breaks
    }

    pub fn period_breaks(&self) -> &[i64] {
        &self.period_breaks
    }

    pub fn cohort_labels(&self) -> &[String] {
        &self.cohort_labels
    }

    pub fn cohort_label(&self, k: CohortId) -> Option<&str> {
        self.cohort_labels.get(k.0.wrapping_sub(1)).map(String::as_str)
    }

    pub fn age_label(&self, i: usize) -> String {
        bin_label(&self.age_breaks, i)
    }

    pub fn period_label(&self, j: usize) -> String {
        bin_label(&self.period_breaks, j)
    }

    pub fn cell(&self, age: usize, period: usize) -> Result<CellIndex, GridError> {
        if age == 0 || period == 0 || age > self.age_groups() || period > self.periods() {
            return Err(GridError::InvalidCell {
                age,
                period,
                a: self.age_groups(),
                p: self.periods(),
            });
        }
        Ok(CellIndex { age, period })
    }

    /// All cells in row-major order (age outer, period inner).
    pub fn iter_cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        let p = self.periods();
        (1..=self.age_groups())
            .flat_map(move |i| (1..=p).map(move |j| CellIndex { age: i, period: j }))
    }

    /// Row-major position of a cell, `0..a*p`.
    pub fn cell_offset(&self, cell: CellIndex) -> usize {
        (cell.age - 1) * self.periods() + (cell.period - 1)
    }

    pub fn bin_age(&self, age: i64) -> Option<usize> {
        locate(&self.age_breaks, age)
    }

    pub fn bin_year(&self, year: i64) -> Option<usize> {
        locate(&self.period_breaks, year)
    }
}

/// A grid cell, 1-based on both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellIndex {
    pub age: usize,
    pub period: usize,
}

impl fmt::Display for CellIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.age, self.period)
    }
}

/// Cohort (or custom band) identifier, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CohortId(pub usize);

impl fmt::Display for CohortId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// The diagonal cohort of a cell: `k = a - i + j`.
pub fn diagonal_of(cell: CellIndex, a: usize) -> CohortId {
    CohortId(a - cell.age + cell.period)
}

/// How cells are grouped into cohorts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum CohortScheme {
    /// One cohort per diagonal.
    #[default]
    Diagonal,
    /// Bands of adjacent whole diagonals, e.g. ten-year cohorts on a five-year grid.
    Custom(CustomBands),
}

/// Maps every diagonal to a band id. Each band is a run of consecutive
/// diagonals, so each band's cells are contiguous along the diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomBands {
    /// `band_of_diagonal[k - 1]` is the band of diagonal `k`.
    band_of_diagonal: Vec<usize>,
    labels: Vec<String>,
}

impl CustomBands {
    /// Builds bands from an explicit cell assignment (`assignment[cell_offset]`).
    /// Every diagonal must lie wholly within one band and each band must cover a
    /// consecutive run of diagonals. Band ids are 1-based and dense.
    pub fn from_cells(
        spec: &GridSpec,
        assignment: &BTreeMap<CellIndex, usize>,
        labels: Vec<String>,
    ) -> Result<Self, GridError> {
        let a = spec.age_groups();
        let mut band_of_diagonal = vec![0usize; spec.cohorts()];
        for cell in spec.iter_cells() {
            let band = *assignment.get(&cell).ok_or_else(|| {
                GridError::InvalidScheme(format!("cell {cell} has no band"))
            })?;
            if band == 0 {
                return Err(GridError::InvalidScheme("band ids start at 1".into()));
            }
            let k = diagonal_of(cell, a).0;
            let slot = &mut band_of_diagonal[k - 1];
            if *slot != 0 && *slot != band {
                return Err(GridError::InvalidScheme(format!(
                    "diagonal {k} is split between bands {slot} and {band}"
                )));
            }
            *slot = band;
        }
        Self::from_diagonals(band_of_diagonal, labels)
    }

    pub fn from_diagonals(band_of_diagonal: Vec<usize>, labels: Vec<String>) -> Result<Self, GridError> {
        let bands = band_of_diagonal.iter().copied().max().unwrap_or(0);
        if labels.len() != bands {
            return Err(GridError::InvalidScheme(format!(
                "{bands} bands but {} labels",
                labels.len()
            )));
        }
        for band in 1..=bands {
            let pos: Vec<usize> = band_of_diagonal
                .iter()
                .enumerate()
                .filter(|(_, &b)| b == band)
                .map(|(k, _)| k)
                .collect();
            if pos.is_empty() {
                return Err(GridError::InvalidScheme(format!("band {band} is empty")));
            }
            if pos.last().unwrap() - pos[0] + 1 != pos.len() {
                return Err(GridError::InvalidScheme(format!(
                    "band {band} covers non-adjacent diagonals"
                )));
            }
        }
        if band_of_diagonal.contains(&0) {
            return Err(GridError::InvalidScheme("band ids start at 1".into()));
        }
        Ok(Self {
            band_of_diagonal,
            labels,
        })
    }

    pub fn bands(&self) -> usize {
        self.labels.len()
    }
}

impl CohortScheme {
    pub fn cohort_count(&self, spec: &GridSpec) -> usize {
        match self {
            CohortScheme::Diagonal => spec.cohorts(),
            CohortScheme::Custom(b) => b.bands(),
        }
    }

    pub fn cohort_ids(&self, spec: &GridSpec) -> Vec<CohortId> {
        (1..=self.cohort_count(spec)).map(CohortId).collect()
    }

    pub fn label(&self, spec: &GridSpec, k: CohortId) -> String {
        match self {
            CohortScheme::Diagonal => spec.cohort_label(k).unwrap_or_default().to_string(),
            CohortScheme::Custom(b) => b.labels.get(k.0 - 1).cloned().unwrap_or_default(),
        }
    }

    pub fn check(&self, spec: &GridSpec) -> Result<(), GridError> {
        match self {
            CohortScheme::Diagonal => Ok(()),
            CohortScheme::Custom(b) if b.band_of_diagonal.len() != spec.cohorts() => {
                Err(GridError::InvalidScheme(format!(
                    "scheme covers {} diagonals, grid has {}",
                    b.band_of_diagonal.len(),
                    spec.cohorts()
                )))
            }
            CohortScheme::Custom(_) => Ok(()),
        }
    }
}

/// Cohort id of a cell under the given scheme.
pub fn cohort_index(cell: CellIndex, spec: &GridSpec, scheme: &CohortScheme) -> CohortId {
    let k = diagonal_of(cell, spec.age_groups());
    match scheme {
        CohortScheme::Diagonal => k,
        CohortScheme::Custom(b) => CohortId(b.band_of_diagonal[k.0 - 1]),
    }
}

/// Cells of cohort `k`, ordered by period (and by age within a period for
/// multi-diagonal bands). Along one diagonal this is also increasing age.
pub fn diagonal_cells(
    k: CohortId,
    spec: &GridSpec,
    scheme: &CohortScheme,
) -> Result<Vec<CellIndex>, GridError> {
    if k.0 == 0 || k.0 > scheme.cohort_count(spec) {
        return Err(GridError::UnknownCohort(k.0));
    }
    let mut cells: Vec<CellIndex> = spec
        .iter_cells()
        .filter(|&c| cohort_index(c, spec, scheme) == k)
        .collect();
    cells.sort_by_key(|c| (c.period, c.age));
    Ok(cells)
}

/// One individual observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroRecord {
    /// Source identifier (e.g. CSV line number) used in rejection messages.
    pub id: u64,
    pub outcome: f64,
    pub age: i64,
    pub year: i64,
    pub weight: f64,
    /// Level index (0-based) for each covariate, in covariate order.
    pub covariates: Vec<usize>,
}

impl MicroRecord {
    pub fn new(id: u64, outcome: f64, age: i64, year: i64) -> Self {
        Self {
            id,
            outcome,
            age,
            year,
            weight: 1.0,
            covariates: Vec::new(),
        }
    }
}

pub fn bin_record(rec: &MicroRecord, spec: &GridSpec) -> Result<CellIndex, GridError> {
    let age = spec.bin_age(rec.age).ok_or(GridError::AgeOutOfRange {
        id: rec.id,
        age: rec.age,
        lo: spec.age_breaks[0],
        hi: *spec.age_breaks.last().unwrap(),
    })?;
    let period = spec.bin_year(rec.year).ok_or(GridError::YearOutOfRange {
        id: rec.id,
        year: rec.year,
        lo: spec.period_breaks[0],
        hi: *spec.period_breaks.last().unwrap(),
    })?;
    Ok(CellIndex { age, period })
}

/// Weighted totals for one cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    /// Records seen, including zero-weight ones.
    pub records: u64,
    pub weight: f64,
    pub outcome_sum: f64,
}

impl CellStats {
    pub fn is_empty(&self) -> bool {
        self.weight <= 0.0
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.is_empty()).then(|| self.outcome_sum / self.weight)
    }

    fn merge(&mut self, other: &CellStats) {
        self.records += other.records;
        self.weight += other.weight;
        self.outcome_sum += other.outcome_sum;
    }
}

/// Mergeable `a x p` aggregation of micro records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTable {
    a: usize,
    p: usize,
    cells: Vec<CellStats>,
    /// Records rejected because they fell outside the grid.
    pub dropped: u64,
}

impl CellTable {
    pub fn empty(spec: &GridSpec) -> Self {
        Self {
            a: spec.age_groups(),
            p: spec.periods(),
            cells: vec![CellStats::default(); spec.cells()],
            dropped: 0,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a, self.p)
    }

    pub fn get(&self, cell: CellIndex) -> &CellStats {
        &self.cells[(cell.age - 1) * self.p + (cell.period - 1)]
    }

    pub fn add(&mut self, cell: CellIndex, outcome: f64, weight: f64) {
        let s = &mut self.cells[(cell.age - 1) * self.p + (cell.period - 1)];
        s.records += 1;
        if weight > 0.0 {
            s.weight += weight;
            s.outcome_sum += weight * outcome;
        }
    }

    /// Combines two partial aggregations of the same grid.
    pub fn merge(&mut self, other: &CellTable) {
        assert_eq!(self.dims(), other.dims(), "merging tables of different grids");
        for (s, o) in self.cells.iter_mut().zip(&other.cells) {
            s.merge(o);
        }
        self.dropped += other.dropped;
    }

    pub fn empty_cells(&self) -> Vec<CellIndex> {
        let p = self.p;
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_empty())
            .map(|(n, _)| CellIndex {
                age: n / p + 1,
                period: n % p + 1,
            })
            .collect()
    }

    /// Weighted cell means as an `a x p` row-major table; `None` for empty cells.
    pub fn means(&self) -> Vec<Vec<Option<f64>>> {
        self.cells.chunks(self.p).map(|row| row.iter().map(CellStats::mean).collect()).collect()
    }
}

/// Aggregates records into cells. Out-of-range records are counted in
/// [`CellTable::dropped`] rather than aborting the stream.
pub fn aggregate<'a, I>(records: I, spec: &GridSpec) -> CellTable
where
    I: IntoIterator<Item = &'a MicroRecord>,
{
    let mut table = CellTable::empty(spec);
    for rec in records {
        match bin_record(rec, spec) {
            Ok(cell) => table.add(cell, rec.outcome, rec.weight),
            Err(_) => table.dropped += 1,
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cps() -> GridSpec {
        GridSpec::cps_1990_2017()
    }

    #[test]
    fn bins_age_30_in_1996() {
        let rec = MicroRecord::new(1, 1.0, 30, 1996);
        assert_eq!(bin_record(&rec, &cps()).unwrap(), CellIndex { age: 3, period: 2 });
    }

    #[test]
    fn lowest_breaks_map_to_first_cell() {
        let rec = MicroRecord::new(1, 1.0, 20, 1990);
        assert_eq!(bin_record(&rec, &cps()).unwrap(), CellIndex { age: 1, period: 1 });
    }

    #[test]
    fn terminal_bins_are_closed() {
        let spec = cps();
        let rec = MicroRecord::new(1, 1.0, 64, 2017);
        assert_eq!(bin_record(&rec, &spec).unwrap(), CellIndex { age: 9, period: 6 });
        assert_eq!(spec.bin_year(2014), Some(5));
        assert_eq!(spec.bin_year(2015), Some(6));
        assert_eq!(spec.period_label(6), "2015-2017");
        assert_eq!(spec.period_label(1), "1990-1994");
        assert_eq!(spec.age_label(9), "60-64");
    }

    #[test]
    fn out_of_range_is_rejected_with_id() {
        let spec = cps();
        let err = bin_record(&MicroRecord::new(42, 1.0, 19, 2000), &spec).unwrap_err();
        assert!(matches!(err, GridError::AgeOutOfRange { id: 42, .. }));
        let err = bin_record(&MicroRecord::new(7, 1.0, 30, 2018), &spec).unwrap_err();
        assert!(matches!(err, GridError::YearOutOfRange { id: 7, .. }));
    }

    #[test]
    fn every_age_year_maps_to_exactly_one_cell() {
        let spec = cps();
        let mut hits = vec![0usize; spec.cells()];
        for age in 20..=64 {
            for year in 1990..=2017 {
                let cell = bin_record(&MicroRecord::new(0, 0.0, age, year), &spec).unwrap();
                // brute-force: count bins whose interval contains the value
                let age_hits = (1..=9)
                    .filter(|&i| {
                        let (lo, hi) = (spec.age_breaks[i - 1], spec.age_breaks[i]);
                        age >= lo && (age < hi || (i == 9 && age == hi))
                    })
                    .collect::<Vec<_>>();
                assert_eq!(age_hits, vec![cell.age]);
                hits[spec.cell_offset(cell)] += 1;
            }
        }
        assert!(hits.iter().all(|&h| h > 0));
        assert_eq!(hits.iter().sum::<usize>(), 45 * 28);
    }

    #[test]
    fn cohort_indices_match_birth_years() {
        let spec = cps();
        let s = CohortScheme::Diagonal;
        let k = cohort_index(CellIndex { age: 9, period: 1 }, &spec, &s);
        assert_eq!((k, spec.cohort_label(k).unwrap()), (CohortId(1), "1930"));
        let k = cohort_index(CellIndex { age: 1, period: 1 }, &spec, &s);
        assert_eq!((k, spec.cohort_label(k).unwrap()), (CohortId(9), "1970"));
        let k = cohort_index(CellIndex { age: 1, period: 6 }, &spec, &s);
        assert_eq!((k, spec.cohort_label(k).unwrap()), (CohortId(14), "1995"));
    }

    #[test]
    fn default_labels_follow_central_birth_year() {
        let spec = GridSpec::with_default_labels(
            vec![20, 25, 30, 35, 40, 45, 50, 55, 60, 64],
            vec![1990, 1995, 2000, 2005, 2010, 2015, 2017],
        )
        .unwrap();
        assert_eq!(spec, cps());
    }

    #[test]
    fn diagonal_cells_of_1950_and_1930() {
        let spec = cps();
        let s = CohortScheme::Diagonal;
        let cells = diagonal_cells(CohortId(5), &spec, &s).unwrap();
        let want: Vec<_> = [(5, 1), (6, 2), (7, 3), (8, 4), (9, 5)]
            .iter()
            .map(|&(age, period)| CellIndex { age, period })
            .collect();
        assert_eq!(cells, want);
        assert_eq!(
            diagonal_cells(CohortId(1), &spec, &s).unwrap(),
            vec![CellIndex { age: 9, period: 1 }]
        );
        assert!(diagonal_cells(CohortId(15), &spec, &s).is_err());
        assert!(diagonal_cells(CohortId(0), &spec, &s).is_err());
    }

    #[test]
    fn diagonal_lengths_follow_table_pattern() {
        let spec = cps();
        let lens: Vec<usize> = (1..=14)
            .map(|k| diagonal_cells(CohortId(k), &spec, &CohortScheme::Diagonal).unwrap().len())
            .collect();
        assert_eq!(lens, vec![1, 2, 3, 4, 5, 6, 6, 6, 6, 5, 4, 3, 2, 1]);
    }

    #[test]
    fn custom_bands_group_adjacent_diagonals() {
        let spec = cps();
        // pairs of diagonals: ten-year cohorts
        let band_of: Vec<usize> = (0..14).map(|k| k / 2 + 1).collect();
        let labels = (0..7).map(|b| format!("{}s", 1930 + 10 * b)).collect();
        let bands = CustomBands::from_diagonals(band_of, labels).unwrap();
        let scheme = CohortScheme::Custom(bands);
        scheme.check(&spec).unwrap();
        assert_eq!(scheme.cohort_count(&spec), 7);
        let cells = diagonal_cells(CohortId(1), &spec, &scheme).unwrap();
        assert_eq!(cells.len(), 3);
        let total: usize = (1..=7)
            .map(|b| diagonal_cells(CohortId(b), &spec, &scheme).unwrap().len())
            .sum();
        assert_eq!(total, 54);
    }

    #[test]
    fn custom_bands_reject_split_or_gapped_bands() {
        let spec = GridSpec::uniform(2, 2).unwrap();
        let mut m = BTreeMap::new();
        for c in spec.iter_cells() {
            m.insert(c, 1);
        }
        m.insert(CellIndex { age: 1, period: 1 }, 2);
        // diagonal 2 holds (1,1) and (2,2): now split across bands
        let err = CustomBands::from_cells(&spec, &m, vec!["x".into(), "y".into()]).unwrap_err();
        assert!(matches!(err, GridError::InvalidScheme(_)));
        let err = CustomBands::from_diagonals(vec![1, 2, 1], vec!["x".into(), "y".into()]);
        assert!(err.is_err());
        let mut m = BTreeMap::new();
        m.insert(CellIndex { age: 1, period: 1 }, 1);
        assert!(CustomBands::from_cells(&spec, &m, vec!["x".into()]).is_err());
    }

    #[test]
    fn aggregate_weighted_mean() {
        let spec = cps();
        let recs: Vec<MicroRecord> = [(1.0, 1.0), (0.0, 2.0), (1.0, 3.0)]
            .iter()
            .map(|&(y, w)| MicroRecord {
                weight: w,
                ..MicroRecord::new(0, y, 30, 1996)
            })
            .collect();
        let t = aggregate(&recs, &spec);
        let s = t.get(CellIndex { age: 3, period: 2 });
        assert_eq!(s.weight, 6.0);
        assert!((s.mean().unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(t.empty_cells().len(), 53);
    }

    #[test]
    fn aggregate_empty_stream() {
        let spec = cps();
        let t = aggregate(&[], &spec);
        assert_eq!(t.empty_cells().len(), 54);
        assert_eq!(t.dropped, 0);
    }

    #[test]
    fn zero_weight_records_are_seen_but_not_summed() {
        let spec = cps();
        let rec = MicroRecord {
            weight: 0.0,
            ..MicroRecord::new(0, 1.0, 30, 1996)
        };
        let t = aggregate([&rec], &spec);
        let s = t.get(CellIndex { age: 3, period: 2 });
        assert_eq!((s.records, s.weight, s.outcome_sum), (1, 0.0, 0.0));
        assert!(s.is_empty());
    }

    #[test]
    fn aggregate_counts_dropped_records() {
        let spec = cps();
        let recs = vec![
            MicroRecord::new(1, 1.0, 30, 1996),
            MicroRecord::new(2, 1.0, 70, 1996),
            MicroRecord::new(3, 1.0, 30, 1980),
        ];
        assert_eq!(aggregate(&recs, &spec).dropped, 2);
    }

    #[test]
    fn grid_json_roundtrip_and_validation() {
        let spec = GridSpec::from_json(
            r#"{"age_breaks":[20,25,30],"period_breaks":[1990,1995,2000],"cohort_labels":[1965,1970,1975]}"#,
        )
        .unwrap();
        assert_eq!(spec.cohort_labels(), &["1965", "1970", "1975"]);
        let again = GridSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
        assert!(GridSpec::from_json(r#"{"age_breaks":[20,25],"period_breaks":[1,2,3]}"#).is_err());
        assert!(GridSpec::from_json(r#"{"age_breaks":[20,25,25],"period_breaks":[1,2,3]}"#).is_err());
        assert!(GridSpec::from_json(
            r#"{"age_breaks":[20,25,30],"period_breaks":[1,2,3],"cohort_labels":["a"]}"#
        )
        .is_err());
    }

    fn arb_record() -> impl Strategy<Value = MicroRecord> {
        (0.0f64..=1.0, 18i64..70, 1985i64..2020, 0.0f64..5.0).prop_map(|(y, age, year, w)| {
            MicroRecord {
                weight: w,
                ..MicroRecord::new(0, y, age, year)
            }
        })
    }

    fn tables_close(x: &CellTable, y: &CellTable) -> bool {
        x.dropped == y.dropped
            && x.cells.iter().zip(&y.cells).all(|(a, b)| {
                a.records == b.records
                    && (a.weight - b.weight).abs() <= 1e-9 * (1.0 + a.weight.abs())
                    && (a.outcome_sum - b.outcome_sum).abs() <= 1e-9 * (1.0 + a.outcome_sum.abs())
            })
    }

    proptest! {
        #[test]
        fn cohort_index_round_trips_through_diagonal_cells(a in 2usize..10, p in 2usize..10) {
            let spec = GridSpec::uniform(a, p).unwrap();
            let s = CohortScheme::Diagonal;
            let mut seen = 0;
            for k in 1..=a + p - 1 {
                let cells = diagonal_cells(CohortId(k), &spec, &s).unwrap();
                prop_assert!(!cells.is_empty() && cells.len() <= a.min(p));
                for c in &cells {
                    prop_assert_eq!(cohort_index(*c, &spec, &s), CohortId(k));
                }
                prop_assert!(cells.windows(2).all(|w| w[0].period < w[1].period && w[0].age < w[1].age));
                seen += cells.len();
            }
            prop_assert_eq!(seen, a * p);
        }

        #[test]
        fn aggregate_is_order_independent(recs in prop::collection::vec(arb_record(), 0..200), seed in any::<u64>()) {
            let spec = cps();
            let base = aggregate(&recs, &spec);
            let mut sorted = recs.clone();
            sorted.sort_by(|x, y| (x.age, x.year).cmp(&(y.age, y.year)).then(x.outcome.total_cmp(&y.outcome)));
            let mut shuffled = recs.clone();
            let n = shuffled.len();
            for i in (1..n).rev() {
                let j = (seed.wrapping_mul(i as u64 + 1).rotate_left(17) % (i as u64 + 1)) as usize;
                shuffled.swap(i, j);
            }
            prop_assert!(tables_close(&base, &aggregate(&sorted, &spec)));
            prop_assert!(tables_close(&base, &aggregate(&shuffled, &spec)));
        }

        #[test]
        fn aggregate_merges_chunks(recs in prop::collection::vec(arb_record(), 0..200), cut in 0usize..200) {
            let spec = cps();
            let cut = cut.min(recs.len());
            let mut left = aggregate(&recs[..cut], &spec);
            left.merge(&aggregate(&recs[cut..], &spec));
            prop_assert!(tables_close(&left, &aggregate(&recs, &spec)));
        }
    }
}

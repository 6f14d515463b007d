//! CSV micro data: `outcome,age,year[,weight][,covariate...]`.
//!
//! Rows with an empty or unparseable required field are dropped and counted
//! per column. Covariate levels are the distinct observed strings, ordered
//! numerically when every level parses as a number and lexically otherwise.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use thiserror::Error;

use crate::design::Covariate;
use crate::grid::MicroRecord;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column '{0}' in CSV header")]
    MissingColumn(String),
    #[error("duplicate column '{0}' in CSV header")]
    DuplicateColumn(String),
    #[error("CSV: {0}")]
    Csv(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::Csv(e.to_string())
    }
}

/// Parsed records plus bookkeeping about what was discarded.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub records: Vec<MicroRecord>,
    pub covariates: Vec<Covariate>,
    /// Whether the file carried a weight column.
    pub weighted: bool,
    pub rows_read: u64,
    /// Dropped rows keyed by the first offending column.
    pub dropped: BTreeMap<String, u64>,
}

impl LoadedData {
    pub fn dropped_total(&self) -> u64 {
        self.dropped.values().sum()
    }
}

const REQUIRED: [&str; 3] = ["outcome", "age", "year"];

fn parse_f64(s: &str) -> Option<f64> {
    let v: f64 = s.trim().parse().ok()?;
    v.is_finite().then_some(v)
}

fn parse_int(s: &str) -> Option<i64> {
    let t = s.trim();
    if let Ok(v) = t.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = t.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

/// Orders level strings numerically if all are numbers, else lexically.
pub fn sort_levels(levels: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = levels.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    let numeric: Option<Vec<f64>> = out.iter().map(|l| l.trim().parse::<f64>().ok()).collect();
    if let Some(keys) = numeric {
        let mut paired: Vec<(f64, String)> = keys.into_iter().zip(out).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        out = paired.into_iter().map(|(_, s)| s).collect();
    }
    out
}

/// Reads records from CSV, keeping the named covariate columns.
pub fn read_records<R: Read>(reader: R, covariate_columns: &[String]) -> Result<LoadedData, DataError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut seen = BTreeSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(DataError::DuplicateColumn(h.clone()));
        }
    }
    let find = |name: &str| header.iter().position(|h| h == name);
    let req: Vec<usize> = REQUIRED
        .iter()
        .map(|n| find(n).ok_or_else(|| DataError::MissingColumn(n.to_string())))
        .collect::<Result<_, _>>()?;
    let weight_col = find("weight");
    let cov_cols: Vec<usize> = covariate_columns
        .iter()
        .map(|n| find(n).ok_or_else(|| DataError::MissingColumn(n.clone())))
        .collect::<Result<_, _>>()?;

    let mut dropped: BTreeMap<String, u64> = BTreeMap::new();
    let mut parsed: Vec<(MicroRecord, Vec<String>)> = Vec::new();
    let mut rows_read = 0u64;
    for row in rdr.records() {
        let row = row?;
        rows_read += 1;
        let field = |c: usize| row.get(c).unwrap_or("");
        let outcome = parse_f64(field(req[0]));
        let age = parse_int(field(req[1]));
        let year = parse_int(field(req[2]));
        let weight = match weight_col {
            Some(c) => parse_f64(field(c)).filter(|w| *w >= 0.0),
            None => Some(1.0),
        };
        let covs: Vec<String> = cov_cols.iter().map(|&c| field(c).to_string()).collect();
        let bad = if outcome.is_none() {
            Some("outcome")
        } else if age.is_none() {
            Some("age")
        } else if year.is_none() {
            Some("year")
        } else if weight.is_none() {
            Some("weight")
        } else {
            covs.iter().position(String::is_empty).map(|k| covariate_columns[k].as_str())
        };
        if let Some(col) = bad {
            *dropped.entry(col.to_string()).or_default() += 1;
            continue;
        }
        let mut rec = MicroRecord::new(rows_read, outcome.unwrap(), age.unwrap(), year.unwrap());
        rec.weight = weight.unwrap();
        parsed.push((rec, covs));
    }

    let covariates: Vec<Covariate> = covariate_columns
        .iter()
        .enumerate()
        .map(|(k, name)| Covariate::new(name.clone(), sort_levels(parsed.iter().map(|(_, c)| c[k].clone()))))
        .collect();
    let index: Vec<BTreeMap<&str, usize>> = covariates
        .iter()
        .map(|c| c.levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect())
        .collect();
    let records = parsed
        .iter()
        .map(|(rec, covs)| {
            let mut r = rec.clone();
            r.covariates = covs.iter().zip(&index).map(|(v, ix)| ix[v.as_str()]).collect();
            r
        })
        .collect();
    Ok(LoadedData {
        records,
        covariates,
        weighted: weight_col.is_some(),
        rows_read,
        dropped,
    })
}

/// Writes records in the same schema `read_records` accepts, with an explicit
/// weight column.
pub fn write_records<W: Write>(writer: W, records: &[MicroRecord], covariates: &[Covariate]) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["outcome".to_string(), "age".into(), "year".into(), "weight".into()];
    header.extend(covariates.iter().map(|c| c.name.clone()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.outcome.to_string(), r.age.to_string(), r.year.to_string(), r.weight.to_string()];
        row.extend(r.covariates.iter().zip(covariates).map(|(&l, c)| c.levels[l].clone()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

//! Artifact writing: every file is staged in the output directory under a
//! temporary name and only renamed into place once all of them are written.

use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use apci::apci::{PatternMode, PatternPoint};

use crate::Failure;

pub struct Staged {
    dir: PathBuf,
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let io = |e: std::io::Error| Failure::config(format!("writing {name}: {e}"));
        let mut tmp = NamedTempFile::new_in(&self.dir).map_err(io)?;
        tmp.write_all(bytes).map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        self.files.push((tmp, self.dir.join(name)));
        Ok(())
    }

    pub fn commit(self) -> Result<(), Failure> {
        for (tmp, path) in self.files {
            tmp.persist(&path)
                .map_err(|e| Failure::config(format!("writing {}: {}", path.display(), e.error)))?;
        }
        Ok(())
    }
}

/// One row per curve point: `pattern,curve,x,x_label,linear_predictor,value`.
pub fn patterns_csv(points: &[PatternPoint]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Failure::config(format!("patterns: {e}"));
    w.write_record(["pattern", "curve", "x", "x_label", "linear_predictor", "value"]).map_err(err)?;
    for p in points {
        let pattern = match p.mode {
            PatternMode::AgeByPeriod => "age_by_period",
            PatternMode::PeriodByAge => "period_by_age",
            PatternMode::MainsOnly => "mains_only",
        };
        w.write_record([
            pattern.to_string(),
            p.curve.clone(),
            p.x.to_string(),
            p.x_label.clone(),
            p.linear_predictor.to_string(),
            p.value.to_string(),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| Failure::config(format!("patterns: {e}")))
}

//! Fixed-layout text rendering of [`ApciResults`].

use std::fmt::Write;

use crate::apci::{ApciResults, Estimate};
use crate::glm::TestResult;

/// `***` for p < 0.001, `**` for p < 0.01, `*` for p < 0.05.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

fn est_cell(e: &Estimate) -> String {
    format!("{:.3}{:<3}", e.estimate, stars(e.p_value()))
}

fn opt_cell(e: Option<&Estimate>) -> String {
    e.map_or_else(|| format!("{:>9}", "NA"), |e| format!("{:>9}", est_cell(e)))
}

fn opt_se(e: Option<&Estimate>) -> String {
    e.map_or_else(|| format!("{:>7}", "NA"), |e| format!("{:>7.3}", e.se))
}

fn f_line(t: &TestResult) -> String {
    format!(
        "F = {:.3}{} on ({}, {}) df, p = {}",
        t.statistic,
        stars(t.p_value),
        t.df1,
        t.df2.unwrap_or(f64::NAN),
        format_p(t.p_value)
    )
}

fn format_p(p: f64) -> String {
    if p < 1e-4 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

pub fn render_report(r: &ApciResults) -> String {
    let m = &r.model;
    let grid = &m.grid;
    let mut s = String::new();
    let _ = writeln!(s, "APC-I model ({:?}, {:?} coding)", r.metadata.family, r.metadata.coding);
    let _ = writeln!(
        s,
        "records {}  weighted n {:.1}  deviance {:.3}  residual df {}",
        r.metadata.n_obs, r.metadata.weighted_n, m.fit.deviance, m.fit.residual_df
    );
    let _ = writeln!(s);

    let _ = writeln!(s, "Main effects");
    let _ = writeln!(s, "{:<22} {:>10} {:>8}", "term", "estimate", "se");
    let mut effect = |name: String, e: &Estimate| {
        let _ = writeln!(s, "{:<22} {:>10} {:>8.3}", name, est_cell(e), e.se);
    };
    effect("intercept".into(), &m.intercept);
    for (i, e) in m.age_effects.iter().enumerate() {
        effect(format!("age {}", grid.age_label(i + 1)), e);
    }
    for (j, e) in m.period_effects.iter().enumerate() {
        effect(format!("period {}", grid.period_label(j + 1)), e);
    }
    for (cov, effects) in m.fit.layout.covariates.iter().zip(&m.covariate_effects) {
        for (level, e) in cov.levels.iter().zip(effects) {
            effect(format!("{} {}", cov.name, level), e);
        }
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "Age-by-period interactions");
    let _ = write!(s, "{:<8}", "age");
    for j in 1..=grid.periods() {
        let _ = write!(s, " {:>10}", grid.period_label(j));
    }
    let _ = writeln!(s);
    for (i, row) in m.interaction_matrix.iter().enumerate() {
        let _ = write!(s, "{:<8}", grid.age_label(i + 1));
        for e in row {
            let _ = write!(s, " {:>10}", est_cell(e));
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "Step 1: global test of age-by-period interactions");
    let _ = writeln!(s, "{}", f_line(&r.global_test));
    let _ = writeln!(s);

    let _ = writeln!(s, "Step 2: cohort deviation magnitude");
    let _ = writeln!(s, "{:<8} {:>3} {:>10} {:>5} {:>10} {:>10}", "cohort", "o", "F", "df1", "df2", "p");
    for c in &r.cohorts {
        match &c.magnitude {
            Some(t) => {
                let _ = writeln!(
                    s,
                    "{:<8} {:>3} {:>10} {:>5} {:>10} {:>10.4}",
                    c.label,
                    c.cells,
                    format!("{:.3}{:<3}", t.statistic, stars(t.p_value)),
                    t.df1,
                    t.df2.unwrap_or(f64::NAN),
                    t.p_value
                );
            }
            None => {
                let _ = writeln!(s, "{:<8} {:>3} {:>10}", c.label, c.cells, "NA");
            }
        }
    }
    let _ = writeln!(s);

    let _ = writeln!(s, "Step 3: inter-cohort average and intra-cohort life-course trend");
    let _ = writeln!(
        s,
        "{:<8} {:>9} {:>7} {:>9} {:>7} {:>9} {:>7}  {}",
        "cohort", "average", "se", "slope", "se", "quad", "se", "pattern"
    );
    for c in &r.cohorts {
        let pattern = match c.classification {
            Some(k) => k.label().to_string(),
            None => "NA".into(),
        };
        let flag = if c.short_cohort && !c.no_slope { " (short cohort)" } else { "" };
        let _ = writeln!(
            s,
            "{:<8} {:>9} {:>7.3} {} {} {} {}  {}{}",
            c.label,
            est_cell(&c.average),
            c.average.se,
            opt_cell(c.slope.as_ref()),
            opt_se(c.slope.as_ref()),
            opt_cell(c.quadratic.as_ref()),
            opt_se(c.quadratic.as_ref()),
            pattern,
            flag
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "*** p<0.001; ** p<0.01; * p<0.05; classification at alpha = {}", r.metadata.alpha);

    if !m.warnings.is_empty() || r.cohorts.iter().any(|c| !c.notes.is_empty()) {
        let _ = writeln!(s);
        let _ = writeln!(s, "Warnings");
        for w in &m.warnings {
            let _ = writeln!(s, "- {w}");
        }
        for c in &r.cohorts {
            for n in &c.notes {
                let _ = writeln!(s, "- cohort {}: {n}", c.label);
            }
        }
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "Notes");
    for n in &r.metadata.notes {
        let _ = writeln!(s, "- {n}");
    }
    s
}

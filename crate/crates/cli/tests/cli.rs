use std::path::Path;
use std::process::{Command, Output};

fn apci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apci")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn simulate(dir: &Path, seed: &str, cell_size: &str) -> Output {
    apci(&["simulate", "--seed", seed, "--cell-size", cell_size, "--out", dir.to_str().unwrap()])
}

#[test]
fn simulate_then_fit_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let sim = simulate(dir.path(), "7", "150");
    assert!(sim.status.success(), "{}", text(&sim));
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 7);

    let out = dir.path().join("results");
    let input = dir.path().join("data.csv");
    let fit = apci(&["fit", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(fit.status.success(), "{}", text(&fit));
    for name in ["fit.json", "report.txt", "patterns_age.csv", "patterns_period.csv"] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    for key in ["fit", "interaction_matrix", "global_test", "cohorts", "metadata"] {
        assert!(json.get(key).is_some(), "fit.json lacks {key}");
    }
    assert_eq!(json["interaction_matrix"].as_array().unwrap().len(), 9);
    assert_eq!(json["cohorts"].as_array().unwrap().len(), 14);
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("*** p<0.001; ** p<0.01; * p<0.05"));
    let age = std::fs::read_to_string(out.join("patterns_age.csv")).unwrap();
    let mut lines = age.lines();
    assert_eq!(lines.next().unwrap(), "pattern,curve,x,x_label,linear_predictor,value");
    // 54 period-specific points plus 9 main-effect points
    assert_eq!(lines.count(), 54 + 9);
    let period = std::fs::read_to_string(out.join("patterns_period.csv")).unwrap();
    assert_eq!(period.lines().count(), 1 + 54 + 6);
    // no temporary files left behind
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 4);
}

#[test]
fn simulate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(simulate(a.path(), "11", "20").status.success());
    assert!(simulate(b.path(), "11", "20").status.success());
    let read = |d: &Path| std::fs::read(d.join("data.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let csv = String::from_utf8(read(a.path())).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "outcome,age,year,weight");
    assert_eq!(csv.lines().count(), 1 + 54 * 20);
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate(dir.path(), "3", "40").status.success());
    let input = dir.path().join("data.csv");
    let mut outputs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = Command::new(env!("CARGO_BIN_EXE_apci"))
            .env("APCI_THREADS", threads)
            .args(["fit", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", text(&o));
        outputs.push(std::fs::read(out.join("fit.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let bad = Command::new(env!("CARGO_BIN_EXE_apci"))
        .env("APCI_THREADS", "zero")
        .args(["fit", "--input", input.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn missing_outcome_column_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.csv");
    std::fs::write(&input, "age,year\n30,1995\n").unwrap();
    let out = dir.path().join("out");
    let o = apci(&["fit", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("outcome"), "{}", text(&o));
    assert!(!out.join("fit.json").exists());
}

#[test]
fn empty_cell_exits_3_naming_the_cell() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("d.csv");
    let mut csv = String::from("outcome,age,year\n");
    for (age, year) in [(20, 2000), (20, 2010), (30, 2000), (30, 2010)] {
        for y in [0, 1, 1] {
            if !(age == 30 && year == 2010) {
                csv.push_str(&format!("{y},{age},{year}\n"));
            }
        }
    }
    std::fs::write(&input, csv).unwrap();
    let grid = r#"{"age_breaks":[20,30,40],"period_breaks":[2000,2010,2020],"cohort_labels":["old","mid","young"]}"#;
    let o = apci(&["fit", "--input", input.to_str().unwrap(), "--grid", grid, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("(2, 2) age 30-40 period 2010-2020"), "{}", text(&o));
}

#[test]
fn invalid_alpha_and_grid_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("d.csv");
    std::fs::write(&input, "outcome,age,year\n1,30,1995\n").unwrap();
    let o = apci(&["fit", "--input", input.to_str().unwrap(), "--alpha", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = apci(&["fit", "--input", input.to_str().unwrap(), "--grid", "{\"age_breaks\":[1]}"]);
    assert_eq!(o.status.code(), Some(2));
    let o = apci(&["fit", "--input", input.to_str().unwrap(), "--family", "poisson"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_sum_violation_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = serde_json::json!({
        "grid": {"age_breaks": [20, 30, 40], "period_breaks": [2000, 2010, 2020], "cohort_labels": [1, 2, 3]},
        "family": "logit",
        "intercept": 0.0,
        "age": [0.2, 0.1],
        "period": [0.0, 0.0],
        "interaction": [[0.0, 0.0], [0.0, 0.0]],
        "cell_size": 5
    });
    let path = dir.path().join("effects.json");
    std::fs::write(&path, scenario.to_string()).unwrap();
    let o = apci(&["simulate", "--input", path.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("age effects"), "{}", text(&o));
    assert!(!dir.path().join("data.csv").exists());
}

#[test]
fn demo_reports_rank_and_discrepancy() {
    let o = apci(&["demo"]);
    assert!(o.status.success());
    let t = text(&o);
    assert!(t.contains("rank 16 of 17"), "{t}");
    let line = t.lines().find(|l| l.starts_with("max fitted-mean discrepancy")).unwrap();
    let value: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(value <= 1e-10);
    let o = apci(&["demo", "--grid", "2x2"]);
    assert!(text(&o).contains("rank 4 of 5"));
    let dir = tempfile::tempdir().unwrap();
    let o = apci(&["demo", "--grid", "9x6", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    assert!(text(&o).contains("rank 26 of 27"));
    assert!(dir.path().join("demo.json").is_file());
}

#[test]
fn covariates_flag_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("d.csv");
    let mut csv = String::from("outcome,age,year,weight,edu\n");
    let mut n = 0u32;
    for age in [20, 30] {
        for year in [2000, 2010] {
            for k in 0..12 {
                n += 1;
                let y = f64::from((n * 7919 + k) % 10) / 3.0;
                csv.push_str(&format!("{y},{age},{year},1.5,{}\n", ["hs", "ba", "ma"][(k % 3) as usize]));
            }
        }
    }
    std::fs::write(&input, csv).unwrap();
    let grid = r#"{"age_breaks":[20,30,40],"period_breaks":[2000,2010,2020],"cohort_labels":[1,2,3]}"#;
    let out = dir.path().join("o");
    let o = apci(&[
        "fit", "--input", input.to_str().unwrap(), "--grid", grid, "--family", "gaussian", "--coding", "dummy",
        "--covariates", "edu", "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("edu ba"));
    let o = apci(&["fit", "--input", input.to_str().unwrap(), "--grid", grid, "--covariates", "edu,kids"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("kids"));
}

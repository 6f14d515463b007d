//! Replays the checked-in fuzz seeds through the parser entry points so a
//! regression shows up without a nightly toolchain.

use std::path::PathBuf;

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn records_seeds_parse_without_panicking() {
    let covs = ["edu".to_string()];
    let mut accepted = 0;
    for (_, bytes) in seeds("records_csv") {
        if let Ok(loaded) = apci::data::read_records(bytes.as_slice(), &covs) {
            accepted += 1;
            assert!(loaded.records.iter().all(|r| r.outcome.is_finite() && r.weight >= 0.0));
        }
    }
    assert!(accepted > 0);
}

#[test]
fn grid_seeds_parse_without_panicking() {
    let mut accepted = 0;
    for (_, bytes) in seeds("grid_json") {
        let Ok(text) = std::str::from_utf8(&bytes) else { continue };
        if let Ok(spec) = apci::grid::GridSpec::from_json(text) {
            accepted += 1;
            for cell in spec.iter_cells() {
                assert!(!spec.age_label(cell.age).is_empty());
                assert!(!spec.period_label(cell.period).is_empty());
            }
        }
    }
    assert!(accepted > 0);
}

#[test]
fn effects_seeds_parse_without_panicking() {
    let mut valid = 0;
    for (path, bytes) in seeds("effects_json") {
        let text = std::str::from_utf8(&bytes).unwrap();
        match apci::sim::TrueEffects::from_json(text) {
            Ok(effects) => valid += usize::from(effects.validate().is_ok()),
            Err(e) => eprintln!("{}: {e}", path.display()),
        }
    }
    assert!(valid > 0);
}

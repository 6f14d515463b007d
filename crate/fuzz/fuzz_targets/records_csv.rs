#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let covs = ["edu".to_string()];
    if let Ok(loaded) = apci::data::read_records(data, &covs) {
        // every surviving record has a finite outcome and a non-negative weight
        for r in &loaded.records {
            assert!(r.outcome.is_finite());
            assert!(r.weight >= 0.0);
        }
    }
});

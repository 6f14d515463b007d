#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = apci::grid::GridSpec::from_json(text) {
        for cell in spec.iter_cells() {
            let _ = spec.age_label(cell.age);
            let _ = spec.period_label(cell.period);
        }
    }
});

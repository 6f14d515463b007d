#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(effects) = apci::sim::TrueEffects::from_json(text) {
        let _ = effects.validate();
    }
});

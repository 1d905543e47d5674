#![no_main]

use flowforge::pipeline::BuildConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = BuildConfig::from_json(text) {
        let _ = cfg.validate();
        let _ = cfg.to_json();
    }
});

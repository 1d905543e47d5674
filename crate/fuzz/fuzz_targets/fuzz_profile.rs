#![no_main]

use flowforge::costmodel::TargetProfile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = TargetProfile::from_json(text) {
        let _ = p.bram_bits_total();
    }
});

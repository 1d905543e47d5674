#![no_main]

use flowforge::rtlgen::lint_text;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (name, body) = text.split_once('\n').unwrap_or(("x.vhd", text));
    let _ = lint_text(name, body);
});

#![no_main]

use flowforge::rtlgen::{parse_hex_lines, to_hex_lines};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(bytes) = parse_hex_lines(text) {
        assert_eq!(parse_hex_lines(&to_hex_lines(&bytes)).expect("own output parses"), bytes);
    }
});

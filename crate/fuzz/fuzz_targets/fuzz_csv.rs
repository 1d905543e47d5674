#![no_main]

use flowforge::dataset::{parse_csv, to_csv_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = parse_csv(text) {
        let once = to_csv_string(&d);
        let again = parse_csv(&once).expect("own output parses");
        assert_eq!(to_csv_string(&again), once);
    }
});

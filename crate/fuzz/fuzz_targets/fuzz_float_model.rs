#![no_main]

use flowforge::mlp::FloatMlp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = FloatMlp::from_json(text) {
        let x = vec![0.5; m.spec.input_dim];
        let _ = m.forward(&x);
        let back = FloatMlp::from_json(&m.to_json().expect("serializes")).expect("own output parses");
        assert_eq!(back, m);
    }
});

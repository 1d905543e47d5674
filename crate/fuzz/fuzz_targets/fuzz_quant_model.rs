#![no_main]

use flowforge::emu::{emulate, Schedule};
use flowforge::quant::QuantizedMlp;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(q) = QuantizedMlp::from_json(text) {
        if q.layers.iter().map(|l| l.n_in * l.n_out).sum::<usize>() > 1 << 16 {
            return;
        }
        let x = vec![0.5; q.spec.input_dim];
        let reference = q.qforward(&x).expect("validated model runs");
        let emulated = emulate(&q, &Schedule::pipelined(3, 1e8), &x).expect("validated model emulates");
        assert_eq!(reference.layers, emulated.layers);
    }
});

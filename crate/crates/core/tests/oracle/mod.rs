//! Reference implementations written independently of the library code.
//! Shared by the core integration tests and the CLI acceptance suite.
#![allow(dead_code)]

use flowforge::dataset::Scaler;
use flowforge::mlp::MlpSpec;
use flowforge::quant::{FixedMultiplier, QuantLayer, QuantParams, QuantizedMlp};
use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive};
use rand::Rng;

fn pow2(e: u32) -> BigInt {
    BigInt::one() << e
}

fn saturate(v: BigInt) -> i8 {
    v.max(BigInt::from(-128)).min(BigInt::from(127)).to_i8().unwrap()
}

/// floor((acc·m0 + 2^(rshift−1)) / 2^rshift) + zp, saturated, in unbounded
/// integers.
pub fn requantize(acc: &BigInt, m0: i32, rshift: u32, zp: i32) -> i8 {
    let t = acc * BigInt::from(m0) + pow2(rshift - 1);
    saturate(t.div_floor(&pow2(rshift)) + BigInt::from(zp))
}

/// Quantizes with round-half-away-from-zero, zero-point offset, saturation.
pub fn quantize_input(x: f64, qp: &QuantParams) -> i8 {
    let r = (x / qp.scale).round() as i64 + qp.zero_point as i64;
    r.clamp(-128, 127) as i8
}

/// Integer inference with unbounded accumulators.
pub fn infer(q: &QuantizedMlp, x_q: &[i8]) -> Vec<Vec<i8>> {
    let mut outs: Vec<Vec<i8>> = Vec::new();
    let n = q.layers.len();
    for (k, l) in q.layers.iter().enumerate() {
        let x: Vec<i8> = outs.last().cloned().unwrap_or_else(|| x_q.to_vec());
        let z_in = BigInt::from(l.input.zero_point);
        let mut y = Vec::with_capacity(l.n_out);
        for j in 0..l.n_out {
            let mut acc = BigInt::from(l.bias[j]);
            for i in 0..l.n_in {
                acc += BigInt::from(l.weights[j * l.n_in + i]) * (BigInt::from(x[i]) - &z_in);
            }
            let mut v = requantize(&acc, l.multiplier.m0, l.multiplier.rshift, l.output.zero_point);
            if k + 1 < n {
                v = v.max(l.output.zero_point as i8);
            }
            y.push(v);
        }
        outs.push(y);
    }
    outs
}

/// Exact |real_m − m0·2^−rshift| as a rational.
pub fn multiplier_error(real_m: f64, fm: FixedMultiplier) -> BigRational {
    let exact = BigRational::from_float(real_m).unwrap();
    let approx = BigRational::new(BigInt::from(fm.m0), pow2(fm.rshift));
    (exact - approx).abs()
}

pub fn pow2_rational(e: i32) -> BigRational {
    if e >= 0 {
        BigRational::from_integer(pow2(e as u32))
    } else {
        BigRational::new(BigInt::one(), pow2((-e) as u32))
    }
}

/// ROM bytes assembled by explicit address arithmetic.
pub fn rom_bytes(q: &QuantizedMlp) -> Vec<u8> {
    let total: usize = q.layers.iter().map(|l| l.n_in * l.n_out + 4 * l.n_out).sum();
    let mut rom = vec![0u8; total];
    let mut base = 0;
    for l in &q.layers {
        for j in 0..l.n_out {
            for i in 0..l.n_in {
                rom[base + j * l.n_in + i] = l.weights[j * l.n_in + i] as u8;
            }
        }
        let bias_base = base + l.n_in * l.n_out;
        for (j, b) in l.bias.iter().enumerate() {
            let u = *b as u32;
            for byte in 0..4 {
                rom[bias_base + 4 * j + byte] = (u >> (8 * byte)) as u8;
            }
        }
        base = bias_base + 4 * l.n_out;
    }
    rom
}

pub fn sequential_cycles(n_in: u64, n_out: u64) -> u64 {
    n_out * (n_in + 2) + 4
}

pub fn pipelined_cycles(n_in: u64, n_out: u64, p: u64) -> u64 {
    let pipe = (n_in * n_out + p - 1) / p + 3 + 4;
    pipe.min(sequential_cycles(n_in, n_out))
}

fn random_params<R: Rng>(rng: &mut R) -> QuantParams {
    QuantParams {
        scale: rng.random_range(1e-4..0.1),
        zero_point: if rng.random_bool(0.2) { -128 } else { rng.random_range(-128..=127) },
        symmetric: false,
    }
}

/// A random model satisfying every `QuantizedMlp` invariant. A share of
/// layers uses extreme weights, biases and shifts to reach saturation.
pub fn random_qmodel<R: Rng>(rng: &mut R, widths: &[usize]) -> QuantizedMlp {
    let spec = MlpSpec::new(widths[0], &widths[1..widths.len() - 1], widths[widths.len() - 1]);
    let input = random_params(rng);
    let mut prev = input;
    let mut layers = Vec::new();
    for w in widths.windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let extreme = rng.random_bool(0.15);
        let weights = (0..n_in * n_out)
            .map(|_| {
                if extreme && rng.random_bool(0.5) {
                    if rng.random_bool(0.5) { 127 } else { -127 }
                } else {
                    rng.random_range(-127..=127)
                }
            })
            .collect();
        let bias_limit = i32::MAX as i64 - n_in as i64 * 255 * 127;
        let bias = (0..n_out)
            .map(|_| {
                if extreme {
                    rng.random_range(-bias_limit..=bias_limit) as i32
                } else {
                    rng.random_range(-40_000..=40_000)
                }
            })
            .collect();
        let rshift = if extreme {
            rng.random_range(1..=62)
        } else {
            rng.random_range(31..=46)
        };
        let output = random_params(rng);
        layers.push(QuantLayer {
            n_in,
            n_out,
            weights,
            bias,
            weight_scale: rng.random_range(1e-3..1.0),
            input: prev,
            output,
            multiplier: FixedMultiplier {
                m0: rng.random_range(1 << 30..=i32::MAX),
                rshift,
            },
        });
        prev = output;
    }
    let q = QuantizedMlp {
        scaler: Scaler::identity(spec.input_dim),
        spec,
        input,
        output: prev,
        layers,
    };
    q.validate().expect("generated model is valid");
    q
}

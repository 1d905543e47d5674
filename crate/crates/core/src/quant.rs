//! Post-training int8 quantization and the reference integer inference
//! semantics.
//!
//! Weights are symmetric int8 in [-127, 127] with zero-point 0. Activations
//! are asymmetric int8. Each layer computes
//!
//! ```text
//! acc_j = bias_j + Σ_i w_ji · (x_i − z_in)          (int32)
//! y_j   = sat8(((acc_j · m0 + 2^(rshift−1)) >> rshift) + z_out)
//! y_j   = max(y_j, z_out)                          (hidden layers only)
//! ```
//!
//! where `m0 · 2^-rshift ≈ s_in · s_w / s_out`. The product and shift use
//! 64-bit two's-complement arithmetic; nothing between the input quantizer
//! and the output dequantizer touches floating point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{MinMax, Scaler};
use crate::error::{Error, Result};
use crate::mlp::{FloatMlp, MlpSpec};

pub const QMIN: i32 = -128;
pub const QMAX: i32 = 127;
/// Weights exclude -128 so the code range is symmetric.
pub const WEIGHT_QMIN: i32 = -127;

/// Widest layer the static accumulator bound is proven for.
pub const MAX_LAYER_WIDTH: usize = 1024;
/// Largest `rshift` whose rounding constant and product fit in an i64.
pub const MAX_RSHIFT: u32 = 62;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub symmetric: bool,
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Range(format!("scale must be positive, got {}", self.scale)));
        }
        if !(QMIN..=QMAX).contains(&self.zero_point) {
            return Err(Error::Range(format!("zero-point {} outside int8", self.zero_point)));
        }
        if self.symmetric && self.zero_point != 0 {
            return Err(Error::Range("symmetric params need zero-point 0".into()));
        }
        Ok(())
    }

    pub fn quantize(&self, x: f64) -> i8 {
        quantize_value(x, self.scale, self.zero_point, QMIN)
    }

    pub fn dequantize(&self, q: i8) -> f64 {
        (q as i32 - self.zero_point) as f64 * self.scale
    }
}

fn quantize_value(x: f64, scale: f64, zero_point: i32, qmin: i32) -> i8 {
    // f64::round is half-away-from-zero
    let q = (x / scale).round() + zero_point as f64;
    q.clamp(qmin as f64, QMAX as f64) as i8
}

/// Derives int8 parameters for a real range containing zero.
pub fn derive_qparams(min: f64, max: f64, symmetric: bool) -> Result<QuantParams> {
    if !(min.is_finite() && max.is_finite()) {
        return Err(Error::Argument(format!("non-finite range [{min}, {max}]")));
    }
    if min == max {
        return Err(Error::Degenerate(format!("range [{min}, {max}] has zero width")));
    }
    if !(min <= 0.0 && 0.0 <= max && min < max) {
        return Err(Error::Argument(format!(
            "range [{min}, {max}] must satisfy min <= 0 <= max"
        )));
    }
    if symmetric {
        return Ok(QuantParams {
            scale: min.abs().max(max) / 127.0,
            zero_point: 0,
            symmetric: true,
        });
    }
    let scale = (max - min) / 255.0;
    let zero_point = ((QMIN as f64 - min / scale).round() as i32).clamp(QMIN, QMAX);
    Ok(QuantParams {
        scale,
        zero_point,
        symmetric: false,
    })
}

pub fn quantize_tensor(xs: &[f64], qp: &QuantParams) -> Vec<i8> {
    xs.iter().map(|&x| qp.quantize(x)).collect()
}

/// Symmetric weight quantization; codes are clamped to [-127, 127].
pub fn quantize_weights(ws: &[f64], scale: f64) -> Vec<i8> {
    ws.iter()
        .map(|&w| quantize_value(w, scale, 0, WEIGHT_QMIN))
        .collect()
}

/// Fixed-point representation `m0 · 2^-rshift` of a real multiplier in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedMultiplier {
    pub m0: i32,
    pub rshift: u32,
}

impl FixedMultiplier {
    pub const M0_MIN: i32 = 1 << 30;

    pub fn validate(&self) -> Result<()> {
        if self.m0 < Self::M0_MIN {
            return Err(Error::Range(format!("m0 {} below 2^30", self.m0)));
        }
        if !(1..=MAX_RSHIFT).contains(&self.rshift) {
            return Err(Error::Range(format!("rshift {} outside [1, {MAX_RSHIFT}]", self.rshift)));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> f64 {
        self.m0 as f64 * (-(self.rshift as f64)).exp2()
    }
}

pub fn quantize_multiplier(real_m: f64) -> Result<FixedMultiplier> {
    if !(real_m > 0.0 && real_m < 1.0) {
        return Err(Error::Range(format!(
            "requantization multiplier {real_m} outside (0, 1)"
        )));
    }
    let mut k: i32 = 0;
    let mut normalized = real_m;
    while normalized < 0.5 {
        normalized *= 2.0;
        k += 1;
    }
    let mut m0 = (normalized * 2f64.powi(31)).round() as i64;
    if m0 == 1i64 << 31 {
        m0 = 1 << 30;
        k -= 1;
    }
    let rshift = 31 + k;
    if rshift > MAX_RSHIFT as i32 {
        return Err(Error::Range(format!(
            "multiplier {real_m} needs rshift {rshift} > {MAX_RSHIFT}"
        )));
    }
    Ok(FixedMultiplier {
        m0: m0 as i32,
        rshift: rshift as u32,
    })
}

/// `floor((acc · m0 + 2^(rshift−1)) / 2^rshift)`, before zero-point and saturation.
pub fn scale_accumulator(acc: i32, fm: FixedMultiplier) -> i64 {
    let product = acc as i64 * fm.m0 as i64;
    (product + (1i64 << (fm.rshift - 1))) >> fm.rshift
}

/// Scales an int32 accumulator back to int8 with round-half-up.
pub fn requantize(acc: i32, fm: FixedMultiplier, zp_out: i32) -> i8 {
    (scale_accumulator(acc, fm) + zp_out as i64).clamp(QMIN as i64, QMAX as i64) as i8
}

/// Observed real range of a layer's input and (post-activation) output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerRange {
    pub input: MinMax,
    pub output: MinMax,
}

/// Runs the float model over `calib` (normalized inputs) and records
/// per-layer ranges, each widened to include 0.
pub fn calibrate(mlp: &FloatMlp, calib: &[Vec<f64>]) -> Result<Vec<LayerRange>> {
    if calib.is_empty() {
        return Err(Error::Argument("calibration set is empty".into()));
    }
    let zero = MinMax { min: 0.0, max: 0.0 };
    let mut ranges = vec![
        LayerRange {
            input: zero,
            output: zero,
        };
        mlp.layers.len()
    ];
    let widen = |r: &mut MinMax, values: &[f64]| {
        for &v in values {
            r.min = r.min.min(v);
            r.max = r.max.max(v);
        }
    };
    for x in calib {
        let acts = mlp.activations(x)?;
        for (k, range) in ranges.iter_mut().enumerate() {
            widen(&mut range.input, &acts[k]);
            widen(&mut range.output, &acts[k + 1]);
        }
    }
    Ok(ranges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out × n_in`.
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
    pub weight_scale: f64,
    pub input: QuantParams,
    pub output: QuantParams,
    pub multiplier: FixedMultiplier,
}

impl QuantLayer {
    pub fn row(&self, j: usize) -> &[i8] {
        &self.weights[j * self.n_in..(j + 1) * self.n_in]
    }

    /// Worst-case |accumulator| over all int8 inputs.
    pub fn accumulator_bound(&self) -> i64 {
        let max_bias = self.bias.iter().map(|b| (*b as i64).abs()).max().unwrap_or(0);
        self.n_in as i64 * 255 * 127 + max_bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMlp {
    pub spec: MlpSpec,
    pub scaler: Scaler,
    pub input: QuantParams,
    pub output: QuantParams,
    pub layers: Vec<QuantLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename = "quantized_mlp")]
struct QuantizedMlpFile {
    version: u32,
    #[serde(flatten)]
    model: QuantizedMlp,
}

const FILE_VERSION: u32 = 1;

/// Result of integer inference for one input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QForward {
    pub input: Vec<i8>,
    /// int8 output of every layer.
    pub layers: Vec<Vec<i8>>,
    /// Dequantized final output (normalized units).
    pub output: Vec<f64>,
    pub flow_m3s: f64,
}

pub fn quantize_model(mlp: &FloatMlp, ranges: &[LayerRange]) -> Result<QuantizedMlp> {
    mlp.validate()?;
    if ranges.len() != mlp.layers.len() {
        return Err(Error::Argument(format!(
            "{} calibration ranges for {} layers",
            ranges.len(),
            mlp.layers.len()
        )));
    }
    let calib_err = |layer: usize| move |e: Error| Error::Calibration {
        layer,
        message: e.to_string(),
    };
    let input = derive_qparams(ranges[0].input.min, ranges[0].input.max, false)
        .map_err(calib_err(0))?;
    let mut in_qp = input;
    let mut layers = Vec::with_capacity(mlp.layers.len());
    for (k, (layer, range)) in mlp.layers.iter().zip(ranges).enumerate() {
        if layer.n_in > MAX_LAYER_WIDTH || layer.n_out > MAX_LAYER_WIDTH {
            return Err(Error::Calibration {
                layer: k,
                message: format!("layer wider than {MAX_LAYER_WIDTH}"),
            });
        }
        let w_max = layer.weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let weight_scale = if w_max > 0.0 { w_max / 127.0 } else { 1.0 };
        let mut out_qp =
            derive_qparams(range.output.min, range.output.max, false).map_err(calib_err(k))?;
        let acc_scale = in_qp.scale * weight_scale;
        let mut real_m = acc_scale / out_qp.scale;
        while real_m >= 1.0 {
            out_qp.scale *= 2.0;
            real_m = acc_scale / out_qp.scale;
        }
        let multiplier = quantize_multiplier(real_m).map_err(calib_err(k))?;
        let bias = layer
            .bias
            .iter()
            .map(|&b| {
                let q = (b / acc_scale).round();
                if q.abs() >= i32::MAX as f64 {
                    Err(Error::Calibration {
                        layer: k,
                        message: format!("bias {b} overflows int32 at scale {acc_scale}"),
                    })
                } else {
                    Ok(q as i32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let qlayer = QuantLayer {
            n_in: layer.n_in,
            n_out: layer.n_out,
            weights: quantize_weights(&layer.weights, weight_scale),
            bias,
            weight_scale,
            input: in_qp,
            output: out_qp,
            multiplier,
        };
        if qlayer.accumulator_bound() > i32::MAX as i64 {
            return Err(Error::Calibration {
                layer: k,
                message: "accumulator may overflow int32".into(),
            });
        }
        layers.push(qlayer);
        in_qp = out_qp;
    }
    Ok(QuantizedMlp {
        spec: mlp.spec.clone(),
        scaler: mlp.scaler.clone(),
        input,
        output: in_qp,
        layers,
    })
}

impl QuantizedMlp {
    pub fn is_hidden(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let dims = self.spec.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(Error::config("layers", "layer count does not match spec"));
        }
        self.input.validate()?;
        self.output.validate()?;
        let mut prev = self.input;
        for (k, (l, &(n_in, n_out))) in self.layers.iter().zip(&dims).enumerate() {
            let field = format!("layers[{k}]");
            if l.n_in != n_in || l.n_out != n_out || l.weights.len() != n_in * n_out || l.bias.len() != n_out {
                return Err(Error::config(field, "shape does not match spec"));
            }
            if n_in > MAX_LAYER_WIDTH || n_out > MAX_LAYER_WIDTH {
                return Err(Error::config(field, format!("wider than {MAX_LAYER_WIDTH}")));
            }
            if l.weights.iter().any(|&w| (w as i32) < WEIGHT_QMIN) {
                return Err(Error::config(field, "weight code -128 is not allowed"));
            }
            if !(l.weight_scale > 0.0 && l.weight_scale.is_finite()) {
                return Err(Error::config(field, "weight scale must be positive"));
            }
            let wrap = |e: Error| Error::config(format!("layers[{k}]"), e.to_string());
            l.input.validate().map_err(wrap)?;
            l.output.validate().map_err(wrap)?;
            l.multiplier.validate().map_err(wrap)?;
            if l.input != prev {
                return Err(Error::config(field, "input params differ from previous layer output"));
            }
            if l.accumulator_bound() > i32::MAX as i64 {
                return Err(Error::config(field, "accumulator may overflow int32"));
            }
            prev = l.output;
        }
        if prev != self.output {
            return Err(Error::config("output", "differs from last layer output params"));
        }
        if self.scaler.features.len() != self.spec.input_dim {
            return Err(Error::config("scaler", "feature count does not match input_dim"));
        }
        self.scaler.validate()
    }

    /// Integer-only forward pass over quantized inputs; returns every layer's output.
    pub fn infer_int(&self, x_q: &[i8]) -> Result<Vec<Vec<i8>>> {
        if x_q.len() != self.spec.input_dim {
            return Err(Error::Argument(format!(
                "expected {} inputs, got {}",
                self.spec.input_dim,
                x_q.len()
            )));
        }
        let mut outs: Vec<Vec<i8>> = Vec::with_capacity(self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            let x = outs.last().map_or(x_q, Vec::as_slice);
            let z_in = l.input.zero_point;
            let z_out = l.output.zero_point;
            let floor = if self.is_hidden(k) { z_out } else { QMIN };
            let y = (0..l.n_out)
                .map(|j| {
                    let acc = l
                        .row(j)
                        .iter()
                        .zip(x)
                        .fold(l.bias[j], |acc, (&w, &v)| acc + w as i32 * (v as i32 - z_in));
                    let q = requantize(acc, l.multiplier, z_out);
                    (q as i32).max(floor) as i8
                })
                .collect();
            outs.push(y);
        }
        Ok(outs)
    }

    /// Quantizes a normalized feature vector, runs integer inference and
    /// dequantizes the result.
    pub fn qforward(&self, x: &[f64]) -> Result<QForward> {
        if x.len() != self.spec.input_dim {
            return Err(Error::Argument(format!(
                "expected {} inputs, got {}",
                self.spec.input_dim,
                x.len()
            )));
        }
        let input = quantize_tensor(x, &self.input);
        let layers = self.infer_int(&input)?;
        let output: Vec<f64> = layers
            .last()
            .expect("model has at least one layer")
            .iter()
            .map(|&q| self.output.dequantize(q))
            .collect();
        let flow_m3s = self.scaler.denormalize_target(output[0]);
        Ok(QForward {
            input,
            layers,
            output,
            flow_m3s,
        })
    }

    pub fn predict_flow(&self, levels_m: &[f64]) -> Result<f64> {
        Ok(self.qforward(&self.scaler.normalize_features(levels_m))?.flow_m3s)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = QuantizedMlpFile {
            version: FILE_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: QuantizedMlpFile = serde_json::from_str(text)?;
        if file.version != FILE_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported model file version {}", file.version),
            ));
        }
        file.model.validate()?;
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::artifact::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn evaluate_quantized(q: &QuantizedMlp, dataset: &crate::dataset::Dataset) -> Result<crate::mlp::Metrics> {
    if dataset.is_empty() {
        return Err(Error::Argument("evaluation set is empty".into()));
    }
    let pred = dataset
        .samples
        .iter()
        .map(|s| q.predict_flow(&s.levels_m))
        .collect::<Result<Vec<_>>>()?;
    crate::mlp::Metrics::from_predictions(&pred, &dataset.targets())
}

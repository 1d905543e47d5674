//! VHDL-93 bundle generation: ROM images, constants, the layer engine,
//! control FSM, top level, a golden-vector testbench and a hashed manifest.
//!
//! The emitted datapath is the one [`crate::emu`] models cycle for cycle;
//! golden vectors come straight from the emulator.

mod lint;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::{sha256_hex, write_atomic};
use crate::costmodel::{check_fit, estimate_resources, TargetProfile};
use crate::emu::{emulate, layer_timing, plan, Datapath, Mode, Schedule};
use crate::error::{Error, Result};
use crate::quant::QuantizedMlp;

pub use lint::{lint_bundle, lint_text, Finding};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

const TPL_CONSTANTS: &str = include_str!("templates/mlp_constants_pkg.vhd");
const TPL_ROM: &str = include_str!("templates/mlp_rom_pkg.vhd");
const TPL_LAYER_UNIT: &str = include_str!("templates/mlp_layer_unit.vhd");
const TPL_CONTROL: &str = include_str!("templates/mlp_control.vhd");
const TPL_TOP: &str = include_str!("templates/mlp_top.vhd");
const TPL_TB: &str = include_str!("templates/mlp_tb.vhd");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRegion {
    pub n_in: usize,
    pub n_out: usize,
    pub weight_base: usize,
    pub bias_base: usize,
}

impl LayerRegion {
    pub fn end(&self) -> usize {
        self.bias_base + 4 * self.n_out
    }
}

/// Byte-addressed ROM map: per layer, int8 weights row-major by output
/// neuron, then int32 little-endian biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryLayout {
    pub layers: Vec<LayerRegion>,
    pub total_bytes: usize,
}

impl MemoryLayout {
    pub fn from_dims(dims: &[(usize, usize)]) -> Self {
        let mut next = 0;
        let layers = dims
            .iter()
            .map(|&(n_in, n_out)| {
                let r = LayerRegion {
                    n_in,
                    n_out,
                    weight_base: next,
                    bias_base: next + n_in * n_out,
                };
                next = r.end();
                r
            })
            .collect();
        MemoryLayout {
            layers,
            total_bytes: next,
        }
    }
}

pub fn layout_memory(qmlp: &QuantizedMlp) -> MemoryLayout {
    MemoryLayout::from_dims(&qmlp.spec.layer_dims())
}

pub fn rom_image(qmlp: &QuantizedMlp) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(layout_memory(qmlp).total_bytes);
    for l in &qmlp.layers {
        bytes.extend(l.weights.iter().map(|&w| w as u8));
        for b in &l.bias {
            bytes.extend_from_slice(&b.to_le_bytes());
        }
    }
    bytes
}

/// Weights and biases of one layer read back from a ROM image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRom {
    pub weights: Vec<i8>,
    pub bias: Vec<i32>,
}

pub fn unpack_rom(layout: &MemoryLayout, bytes: &[u8]) -> Result<Vec<LayerRom>> {
    if bytes.len() != layout.total_bytes {
        return Err(Error::Argument(format!(
            "ROM image has {} bytes, layout needs {}",
            bytes.len(),
            layout.total_bytes
        )));
    }
    Ok(layout
        .layers
        .iter()
        .map(|r| LayerRom {
            weights: bytes[r.weight_base..r.bias_base].iter().map(|&b| b as i8).collect(),
            bias: bytes[r.bias_base..r.end()]
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        })
        .collect())
}

/// One byte per line, two lowercase hex digits, LF endings.
pub fn to_hex_lines(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 3);
    for b in bytes {
        let _ = writeln!(s, "{b:02x}");
    }
    s
}

pub fn parse_hex_lines(text: &str) -> Result<Vec<u8>> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let ok = line.len() == 2 && line.bytes().all(|c| matches!(c, b'0'..=b'9' | b'a'..=b'f'));
            if !ok {
                return Err(Error::parse(i + 1, format!("expected two lowercase hex digits, got {line:?}")));
            }
            Ok(u8::from_str_radix(line, 16).expect("checked digits"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParameters {
    pub n_in: usize,
    pub n_out: usize,
    pub weight_base: usize,
    pub bias_base: usize,
    pub m0: i32,
    pub rshift: u32,
    pub z_in: i32,
    pub z_out: i32,
    pub relu: bool,
    pub datapath: Datapath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleParameters {
    pub target: String,
    pub widths: Vec<usize>,
    pub mode: Mode,
    pub parallelism: usize,
    pub pipeline_depth: usize,
    pub clock_hz: f64,
    pub rom_bytes: usize,
    pub total_cycles: u64,
    pub layers: Vec<LayerParameters>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub generator: String,
    pub files: Vec<ManifestEntry>,
    pub parameters: BundleParameters,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn hash_of(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.name == name).map(|f| f.sha256.as_str())
    }
}

/// Generated files keyed by file name. Text only, LF endings.
#[derive(Debug, Clone, PartialEq)]
pub struct RtlBundle {
    pub files: BTreeMap<String, String>,
    pub parameters: BundleParameters,
}

impl RtlBundle {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            generator: generator(),
            files: self
                .files
                .iter()
                .map(|(name, text)| ManifestEntry {
                    name: name.clone(),
                    bytes: text.len(),
                    sha256: sha256_hex(text.as_bytes()),
                })
                .collect(),
            parameters: self.parameters.clone(),
        }
    }

    pub fn add_testbench(&mut self, tb: Testbench) {
        self.files.insert("mlp_tb.vhd".into(), tb.vhdl);
        self.files.insert("inputs.hex".into(), tb.inputs_hex);
        self.files.insert("golden.hex".into(), tb.golden_hex);
    }

    /// Writes every file and `manifest.json` into `dir`, each atomically.
    pub fn write_to(&self, dir: &Path) -> Result<Manifest> {
        for (name, text) in &self.files {
            write_atomic(&dir.join(name), text.as_bytes())?;
        }
        let manifest = self.manifest();
        write_atomic(&dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
        Ok(manifest)
    }
}

fn generator() -> String {
    format!("forge {}", env!("CARGO_PKG_VERSION"))
}

fn header(params: &BundleParameters) -> String {
    let widths: Vec<String> = params.widths.iter().map(|w| w.to_string()).collect();
    format!(
        "Generated by {} for {} ({} network, {} P={}). Do not edit.",
        generator(),
        params.target,
        widths.join("-"),
        params.mode,
        params.parallelism
    )
}

/// Replaces every `{{key}}`. Unknown placeholders are left in place for
/// the linter to report.
fn render(template: &str, vars: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

pub fn bundle_parameters(qmlp: &QuantizedMlp, schedule: &Schedule, target: &str) -> BundleParameters {
    let layout = layout_memory(qmlp);
    let n_layers = qmlp.layers.len();
    let layers = qmlp
        .layers
        .iter()
        .zip(&layout.layers)
        .enumerate()
        .map(|(k, (l, r))| LayerParameters {
            n_in: l.n_in,
            n_out: l.n_out,
            weight_base: r.weight_base,
            bias_base: r.bias_base,
            m0: l.multiplier.m0,
            rshift: l.multiplier.rshift,
            z_in: l.input.zero_point,
            z_out: l.output.zero_point,
            relu: k + 1 < n_layers,
            datapath: layer_timing(l.n_in, l.n_out, schedule).0,
        })
        .collect();
    let mut widths = vec![qmlp.spec.input_dim];
    widths.extend(qmlp.layers.iter().map(|l| l.n_out));
    BundleParameters {
        target: target.to_string(),
        widths,
        mode: schedule.mode,
        parallelism: schedule.parallelism,
        pipeline_depth: schedule.pipeline_depth,
        clock_hz: schedule.clock_hz,
        rom_bytes: layout.total_bytes,
        total_cycles: plan(qmlp, schedule).total_cycles,
        layers,
    }
}

fn vhdl_list<T>(n: usize, f: impl Fn(usize) -> T) -> String
where
    T: std::fmt::Display,
{
    (0..n).map(|k| format!("{k} => {}", f(k))).collect::<Vec<_>>().join(", ")
}

fn constants_package(p: &BundleParameters) -> String {
    let mut layer_constants = String::new();
    for (k, l) in p.layers.iter().enumerate() {
        let lines = [
            format!("L{k}_N_IN      : integer range 1 to 1024 := {}", l.n_in),
            format!("L{k}_N_OUT     : integer range 1 to 1024 := {}", l.n_out),
            format!("L{k}_W_BASE    : integer := {}", l.weight_base),
            format!("L{k}_B_BASE    : integer := {}", l.bias_base),
            format!("L{k}_M0        : integer range 1073741824 to 2147483647 := {}", l.m0),
            format!("L{k}_RSHIFT    : integer range 1 to 62 := {}", l.rshift),
            format!("L{k}_Z_IN      : integer range -128 to 127 := {}", l.z_in),
            format!("L{k}_Z_OUT     : integer range -128 to 127 := {}", l.z_out),
            format!("L{k}_RELU      : boolean := {}", l.relu),
            format!("L{k}_PIPELINED : boolean := {}", l.datapath == Datapath::Pipelined),
        ];
        for line in lines {
            let _ = writeln!(layer_constants, "  constant {line};");
        }
        layer_constants.push('\n');
    }
    let n = p.layers.len();
    let max_width = p.widths.iter().copied().max().unwrap_or(1);
    render(
        TPL_CONSTANTS,
        &[
            ("header", header(p)),
            ("n_layers", n.to_string()),
            ("max_width", max_width.to_string()),
            ("parallelism", p.parallelism.to_string()),
            ("pipeline_depth", p.pipeline_depth.to_string()),
            ("mode_pipelined", (p.mode == Mode::Pipelined).to_string()),
            ("rom_bytes", p.rom_bytes.to_string()),
            ("layer_constants", layer_constants.trim_end_matches('\n').to_string() + "\n"),
            ("output_dim_name", format!("L{}_N_OUT", n - 1)),
            ("n_in_list", vhdl_list(n, |k| format!("L{k}_N_IN"))),
            ("n_out_list", vhdl_list(n, |k| format!("L{k}_N_OUT"))),
            ("w_base_list", vhdl_list(n, |k| format!("L{k}_W_BASE"))),
            ("b_base_list", vhdl_list(n, |k| format!("L{k}_B_BASE"))),
            ("m0_list", vhdl_list(n, |k| format!("L{k}_M0"))),
            ("rshift_list", vhdl_list(n, |k| format!("L{k}_RSHIFT"))),
            ("z_in_list", vhdl_list(n, |k| format!("L{k}_Z_IN"))),
            ("z_out_list", vhdl_list(n, |k| format!("L{k}_Z_OUT"))),
            ("relu_list", vhdl_list(n, |k| format!("L{k}_RELU"))),
            ("pipelined_list", vhdl_list(n, |k| format!("L{k}_PIPELINED"))),
        ],
    )
}

fn rom_package(p: &BundleParameters, rom: &[u8]) -> String {
    let lines: Vec<String> = rom
        .chunks(16)
        .enumerate()
        .map(|(row, chunk)| {
            let items: Vec<String> = chunk
                .iter()
                .enumerate()
                .map(|(i, b)| format!("{} => x\"{b:02x}\"", row * 16 + i))
                .collect();
            format!("    {}", items.join(", "))
        })
        .collect();
    render(
        TPL_ROM,
        &[("header", header(p)), ("rom_entries", lines.join(",\n"))],
    )
}

fn interface_doc(p: &BundleParameters) -> String {
    let mut s = String::new();
    let widths: Vec<String> = p.widths.iter().map(|w| w.to_string()).collect();
    let _ = writeln!(s, "# mlp_top interface\n");
    let _ = writeln!(s, "{}\n", header(p));
    let _ = writeln!(s, "## Ports\n");
    let _ = writeln!(s, "| port | dir | width | meaning |");
    let _ = writeln!(s, "|---|---|---|---|");
    for (port, dir, width, meaning) in [
        ("clk", "in", "1", "rising-edge clock"),
        ("rst", "in", "1", "synchronous reset, active high"),
        ("start", "in", "1", "one-cycle pulse; begins accepting input bytes"),
        ("in_data", "in", "8", "int8 input code (two's complement)"),
        ("in_valid", "in", "1", "in_data is valid"),
        ("in_ready", "out", "1", "accelerator accepts a byte this cycle"),
        ("out_data", "out", "8", "int8 output code (two's complement)"),
        ("out_valid", "out", "1", "out_data is valid"),
        ("out_ready", "in", "1", "consumer accepts a byte this cycle"),
        ("done", "out", "1", "one-cycle pulse after the last output byte"),
    ] {
        let _ = writeln!(s, "| `{port}` | {dir} | {width} | {meaning} |");
    }
    let _ = writeln!(s, "\n## Protocol\n");
    let _ = writeln!(
        s,
        "1. Pulse `start`.\n\
         2. Send {} input byte(s) in feature order; a byte transfers on a rising edge with `in_valid` and `in_ready` both high.\n\
         3. Compute runs for {} cycles ({} at {} Hz).\n\
         4. Read {} output byte(s) with `out_valid`/`out_ready`; `done` pulses after the last one.\n",
        p.widths[0],
        p.total_cycles,
        format_seconds(p.total_cycles as f64 / p.clock_hz),
        p.clock_hz,
        p.widths[p.widths.len() - 1]
    );
    let _ = writeln!(
        s,
        "Input codes are the normalized features quantized with the model's input parameters. \
         Output codes dequantize with the final layer's output parameters.\n"
    );
    let _ = writeln!(s, "## Layers\n");
    let _ = writeln!(s, "| layer | n_in | n_out | datapath | m0 | rshift | z_in | z_out | relu | weights @ | biases @ |");
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|---|");
    for (k, l) in p.layers.iter().enumerate() {
        let dp = match l.datapath {
            Datapath::Sequential => "sequential",
            Datapath::Pipelined => "pipelined",
        };
        let _ = writeln!(
            s,
            "| {k} | {} | {} | {dp} | {} | {} | {} | {} | {} | {} | {} |",
            l.n_in, l.n_out, l.m0, l.rshift, l.z_in, l.z_out, l.relu, l.weight_base, l.bias_base
        );
    }
    let _ = writeln!(
        s,
        "\nROM: {} bytes (`weights.hex`, also embedded in `mlp_rom_pkg.vhd`). Widths: {}.\n",
        p.rom_bytes,
        widths.join("-")
    );
    let _ = writeln!(s, "## Files\n");
    for (f, what) in [
        ("mlp_constants_pkg.vhd", "dimensions, multipliers, zero-points, schedule"),
        ("mlp_rom_pkg.vhd", "weight and bias ROM"),
        ("mlp_layer_unit.vhd", "sequential and pipelined layer engine"),
        ("mlp_control.vhd", "layer sequencing and stream handshake FSM"),
        ("mlp_top.vhd", "top level"),
        ("mlp_tb.vhd", "testbench reading inputs.hex and golden.hex"),
        ("manifest.json", "SHA-256 of every file plus a parameter echo"),
    ] {
        let _ = writeln!(s, "- `{f}`: {what}");
    }
    s
}

fn format_seconds(t: f64) -> String {
    if t >= 1e-3 {
        format!("{:.3} ms", t * 1e3)
    } else {
        format!("{:.3} us", t * 1e6)
    }
}

/// Generates the synthesizable bundle (no testbench). Fails when the design
/// does not fit `target` unless `override_fit` is set.
pub fn generate_rtl(
    qmlp: &QuantizedMlp,
    schedule: &Schedule,
    target: &TargetProfile,
    override_fit: bool,
) -> Result<RtlBundle> {
    qmlp.validate()?;
    schedule.validate()?;
    let fit = check_fit(&estimate_resources(qmlp, schedule, target), target);
    if !fit.fits && !override_fit {
        return Err(Error::Fit {
            target: target.name.clone(),
            violations: fit.violations,
        });
    }
    let params = bundle_parameters(qmlp, schedule, &target.name);
    let rom = rom_image(qmlp);
    let hdr = header(&params);
    let mut files = BTreeMap::new();
    files.insert("mlp_constants_pkg.vhd".to_string(), constants_package(&params));
    files.insert("mlp_rom_pkg.vhd".to_string(), rom_package(&params, &rom));
    for (name, tpl) in [
        ("mlp_layer_unit.vhd", TPL_LAYER_UNIT),
        ("mlp_control.vhd", TPL_CONTROL),
        ("mlp_top.vhd", TPL_TOP),
    ] {
        files.insert(name.to_string(), render(tpl, &[("header", hdr.clone())]));
    }
    files.insert("weights.hex".to_string(), to_hex_lines(&rom));
    files.insert("INTERFACE.md".to_string(), interface_doc(&params));
    Ok(RtlBundle {
        files,
        parameters: params,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Testbench {
    pub vhdl: String,
    pub inputs_hex: String,
    pub golden_hex: String,
    /// Quantized inputs and emulator outputs per vector.
    pub vectors: Vec<(Vec<i8>, Vec<i8>)>,
}

/// Golden vectors for normalized feature vectors `inputs`. Outputs come from
/// the emulator and are cross-checked against the integer reference.
pub fn generate_testbench(qmlp: &QuantizedMlp, schedule: &Schedule, inputs: &[Vec<f64>]) -> Result<Testbench> {
    if inputs.is_empty() {
        return Err(Error::Argument("testbench needs at least one vector".into()));
    }
    let mut vectors = Vec::with_capacity(inputs.len());
    for x in inputs {
        let r = emulate(qmlp, schedule, x)?;
        let reference = qmlp.qforward(x)?;
        let out = r.layers.last().expect("at least one layer").clone();
        if Some(&out) != reference.layers.last() {
            return Err(Error::Argument(format!(
                "emulator output {out:?} differs from integer reference for input {x:?}"
            )));
        }
        vectors.push((r.input, out));
    }
    let inputs_hex = to_hex_lines(&vectors.iter().flat_map(|(i, _)| i.iter().map(|&b| b as u8)).collect::<Vec<_>>());
    let golden_hex = to_hex_lines(&vectors.iter().flat_map(|(_, o)| o.iter().map(|&b| b as u8)).collect::<Vec<_>>());
    let vhdl = render(
        TPL_TB,
        &[
            ("header", format!("Generated by {}. Do not edit.", generator())),
            ("clock_period_ns", format!("{:.3}", 1e9 / schedule.clock_hz)),
            ("n_vectors", vectors.len().to_string()),
        ],
    );
    Ok(Testbench {
        vhdl,
        inputs_hex,
        golden_hex,
        vectors,
    })
}

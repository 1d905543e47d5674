//! Cycle-level emulator of the generated accelerator.
//!
//! Layers run one at a time over a shared activation buffer. Each layer
//! spends `C_LAYER` control cycles (start, config, swap, done) around its
//! datapath phase:
//!
//! * sequential: per neuron one bias load, `n_in` MAC cycles, one writeback;
//! * pipelined: `P` MAC lanes issue `ceil(n_out·n_in / P)` groups through a
//!   three-stage multiply / accumulate / requantize pipeline, then drain.
//!
//! A layer scheduled as pipelined falls back to the sequential datapath when
//! the pipeline fill would make it slower (single-neuron layers).
//!
//! The integer datapath here is written independently of [`crate::quant`]
//! so that equality of the two is a meaningful check.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::QuantizedMlp;

/// Load + writeback overhead per neuron on the sequential datapath.
pub const O_MAC: u64 = 2;
/// Control overhead per layer.
pub const C_LAYER: u64 = 4;
/// Multiply, accumulate, requantize.
pub const PIPELINE_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sequential,
    Pipelined,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sequential => "sequential",
            Mode::Pipelined => "pipelined",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub mode: Mode,
    pub parallelism: usize,
    pub pipeline_depth: usize,
    pub clock_hz: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::pipelined(2, 24e6)
    }
}

impl Schedule {
    pub fn sequential(clock_hz: f64) -> Self {
        Schedule {
            mode: Mode::Sequential,
            parallelism: 1,
            pipeline_depth: PIPELINE_DEPTH,
            clock_hz,
        }
    }

    pub fn pipelined(parallelism: usize, clock_hz: f64) -> Self {
        Schedule {
            mode: Mode::Pipelined,
            parallelism,
            pipeline_depth: PIPELINE_DEPTH,
            clock_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.parallelism == 0 {
            return Err(Error::config("schedule.parallelism", "must be >= 1"));
        }
        if self.mode == Mode::Sequential && self.parallelism != 1 {
            return Err(Error::config(
                "schedule.parallelism",
                "sequential schedules use exactly one MAC unit",
            ));
        }
        if self.pipeline_depth != PIPELINE_DEPTH {
            return Err(Error::config(
                "schedule.pipeline_depth",
                format!("only depth {PIPELINE_DEPTH} is supported"),
            ));
        }
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(Error::config("schedule.clock_hz", "must be positive"));
        }
        Ok(())
    }
}

/// Datapath actually used for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Datapath {
    Sequential,
    Pipelined,
}

pub fn sequential_layer_cycles(n_in: usize, n_out: usize) -> u64 {
    n_out as u64 * (n_in as u64 + O_MAC) + C_LAYER
}

pub fn pipelined_layer_cycles(n_in: usize, n_out: usize, parallelism: usize) -> u64 {
    ((n_out * n_in) as u64).div_ceil(parallelism as u64) + PIPELINE_DEPTH as u64 + C_LAYER
}

/// Datapath and cycle count chosen for a layer under `schedule`.
pub fn layer_timing(n_in: usize, n_out: usize, schedule: &Schedule) -> (Datapath, u64) {
    let seq = sequential_layer_cycles(n_in, n_out);
    match schedule.mode {
        Mode::Sequential => (Datapath::Sequential, seq),
        Mode::Pipelined => {
            let pipe = pipelined_layer_cycles(n_in, n_out, schedule.parallelism);
            if pipe <= seq {
                (Datapath::Pipelined, pipe)
            } else {
                (Datapath::Sequential, seq)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub n_in: usize,
    pub n_out: usize,
    pub datapath: Datapath,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePlan {
    pub mode: Mode,
    pub parallelism: usize,
    pub layers: Vec<LayerPlan>,
    pub total_cycles: u64,
    pub c_layer: u64,
    pub o_mac: u64,
    pub pipeline_depth: usize,
}

impl CyclePlan {
    pub fn per_layer_cycles(&self) -> Vec<u64> {
        self.layers.iter().map(|l| l.cycles).collect()
    }

    pub fn latency_s(&self, clock_hz: f64) -> f64 {
        self.total_cycles as f64 / clock_hz
    }
}

/// Closed-form cycle plan for layers of the given `(n_in, n_out)` shapes.
pub fn plan_dims(dims: &[(usize, usize)], schedule: &Schedule) -> CyclePlan {
    let layers: Vec<LayerPlan> = dims
        .iter()
        .map(|&(n_in, n_out)| {
            let (datapath, cycles) = layer_timing(n_in, n_out, schedule);
            LayerPlan {
                n_in,
                n_out,
                datapath,
                cycles,
            }
        })
        .collect();
    CyclePlan {
        mode: schedule.mode,
        parallelism: schedule.parallelism,
        total_cycles: layers.iter().map(|l| l.cycles).sum(),
        layers,
        c_layer: C_LAYER,
        o_mac: O_MAC,
        pipeline_depth: PIPELINE_DEPTH,
    }
}

pub fn plan(qmlp: &QuantizedMlp, schedule: &Schedule) -> CyclePlan {
    let dims: Vec<_> = qmlp.layers.iter().map(|l| (l.n_in, l.n_out)).collect();
    plan_dims(&dims, schedule)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    /// `total_a / total_b`.
    pub ratio: f64,
    /// `(1 − total_b / total_a) · 100`.
    pub reduction_percent: f64,
}

pub fn speedup(a: &CyclePlan, b: &CyclePlan) -> Speedup {
    let (ta, tb) = (a.total_cycles as f64, b.total_cycles as f64);
    Speedup {
        ratio: ta / tb,
        reduction_percent: (1.0 - tb / ta) * 100.0,
    }
}

/// Hardware unit an event is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Control,
    Mac(usize),
    Requant,
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unit::Control => f.write_str("ctl"),
            Unit::Mac(lane) => write!(f, "mac{lane}"),
            Unit::Requant => f.write_str("rq"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Start,
    Config,
    LoadBias { neuron: usize },
    Mac { neuron: usize, input: usize },
    Accumulate { neuron: usize, input: usize },
    Requantize { neuron: usize },
    Writeback { neuron: usize },
    Swap,
    Done,
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Op::Start => f.write_str("start"),
            Op::Config => f.write_str("config"),
            Op::LoadBias { neuron } => write!(f, "load:{neuron}"),
            Op::Mac { neuron, input } => write!(f, "mac:{neuron}.{input}"),
            Op::Accumulate { neuron, input } => write!(f, "acc:{neuron}.{input}"),
            Op::Requantize { neuron } => write!(f, "rq:{neuron}"),
            Op::Writeback { neuron } => write!(f, "wb:{neuron}"),
            Op::Swap => f.write_str("swap"),
            Op::Done => f.write_str("done"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub cycle: u64,
    pub layer: usize,
    pub unit: Unit,
    pub op: Op,
}

/// Writes a trace as `cycle,layer,unit,op` CSV with a header line.
pub fn write_trace_csv<W: Write>(events: &[TraceEvent], mut out: W) -> std::io::Result<()> {
    writeln!(out, "cycle,layer,unit,op")?;
    for e in events {
        writeln!(out, "{},{},{},{}", e.cycle, e.layer, e.unit, e.op)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmulationResult {
    pub input: Vec<i8>,
    /// int8 output of every layer.
    pub layers: Vec<Vec<i8>>,
    pub output: Vec<f64>,
    pub flow_m3s: f64,
    pub total_cycles: u64,
    pub per_layer_cycles: Vec<u64>,
}

/// Per-layer constants latched in the config cycle.
struct LayerConfig<'a> {
    n_in: usize,
    n_out: usize,
    weights: &'a [i8],
    bias: &'a [i32],
    z_in: i64,
    z_out: i64,
    m0: i64,
    rshift: u32,
    relu: bool,
}

/// 64-bit multiply, add 2^(rshift−1), arithmetic shift, add zero-point,
/// saturate to int8, optional clamp at the zero-point.
fn requant_unit(acc: i32, cfg: &LayerConfig) -> i8 {
    let wide = acc as i64 * cfg.m0;
    let round = 1i64 << (cfg.rshift - 1);
    let shifted = (wide + round) >> cfg.rshift;
    let mut y = shifted + cfg.z_out;
    y = y.clamp(-128, 127);
    if cfg.relu && y < cfg.z_out {
        y = cfg.z_out;
    }
    y as i8
}

fn mac_product(cfg: &LayerConfig, acts: &[i8], neuron: usize, input: usize) -> i32 {
    let w = cfg.weights[neuron * cfg.n_in + input] as i32;
    let x = acts[input] as i32 - cfg.z_in as i32;
    w * x
}

struct Recorder<'t> {
    cycle: u64,
    layer: usize,
    trace: Option<&'t mut Vec<TraceEvent>>,
}

impl Recorder<'_> {
    fn tick(&mut self) {
        self.cycle += 1;
    }

    fn event(&mut self, unit: Unit, op: Op) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.push(TraceEvent {
                cycle: self.cycle,
                layer: self.layer,
                unit,
                op,
            });
        }
    }
}

fn run_sequential(cfg: &LayerConfig, acts: &[i8], rec: &mut Recorder) -> Vec<i8> {
    enum State {
        Load(usize),
        Mac(usize, usize),
        Writeback(usize),
        Finished,
    }
    let mut out = vec![0i8; cfg.n_out];
    let mut acc: i32 = 0;
    let mut state = State::Load(0);
    while !matches!(state, State::Finished) {
        rec.tick();
        state = match state {
            State::Load(j) => {
                rec.event(Unit::Mac(0), Op::LoadBias { neuron: j });
                acc = cfg.bias[j];
                if cfg.n_in == 0 {
                    State::Writeback(j)
                } else {
                    State::Mac(j, 0)
                }
            }
            State::Mac(j, i) => {
                rec.event(Unit::Mac(0), Op::Mac { neuron: j, input: i });
                acc += mac_product(cfg, acts, j, i);
                if i + 1 < cfg.n_in {
                    State::Mac(j, i + 1)
                } else {
                    State::Writeback(j)
                }
            }
            State::Writeback(j) => {
                rec.event(Unit::Requant, Op::Writeback { neuron: j });
                out[j] = requant_unit(acc, cfg);
                if j + 1 < cfg.n_out {
                    State::Load(j + 1)
                } else {
                    State::Finished
                }
            }
            State::Finished => unreachable!(),
        };
    }
    out
}

#[derive(Clone, Copy)]
struct InFlight {
    neuron: usize,
    input: usize,
    lane: usize,
    product: i32,
    last_of_neuron: bool,
}

fn run_pipelined(cfg: &LayerConfig, acts: &[i8], parallelism: usize, rec: &mut Recorder) -> Vec<i8> {
    let mut out = vec![0i8; cfg.n_out];
    // Accumulators are preset from the bias ROM during the config cycle.
    let mut accs: Vec<i32> = cfg.bias.to_vec();
    let mut pending: Vec<i8> = vec![0; cfg.n_out];
    let total_ops = cfg.n_out * cfg.n_in;
    let mut next_op = 0usize;
    // stages[0] = just multiplied, stages[1] = accumulated, stages[2] = requantized
    let mut stages: VecDeque<Vec<InFlight>> = VecDeque::from(vec![Vec::new(); PIPELINE_DEPTH]);

    while next_op < total_ops || stages.iter().any(|s| !s.is_empty()) {
        rec.tick();
        // retire: commit requantized neurons to the output buffer
        let retired = stages.pop_back().expect("fixed depth");
        for op in retired.iter().filter(|op| op.last_of_neuron) {
            rec.event(Unit::Requant, Op::Writeback { neuron: op.neuron });
            out[op.neuron] = pending[op.neuron];
        }
        // stage 2: requantize neurons whose final product has been accumulated
        for op in stages[1].iter().filter(|op| op.last_of_neuron) {
            rec.event(Unit::Requant, Op::Requantize { neuron: op.neuron });
            pending[op.neuron] = requant_unit(accs[op.neuron], cfg);
        }
        // stage 1: accumulate products issued last cycle
        for op in &stages[0] {
            rec.event(
                Unit::Mac(op.lane),
                Op::Accumulate {
                    neuron: op.neuron,
                    input: op.input,
                },
            );
            accs[op.neuron] += op.product;
        }
        // stage 0: issue up to P new multiplies
        let mut issued = Vec::with_capacity(parallelism);
        for lane in 0..parallelism {
            if next_op == total_ops {
                break;
            }
            let (neuron, input) = (next_op / cfg.n_in, next_op % cfg.n_in);
            rec.event(Unit::Mac(lane), Op::Mac { neuron, input });
            issued.push(InFlight {
                neuron,
                input,
                lane,
                product: mac_product(cfg, acts, neuron, input),
                last_of_neuron: input + 1 == cfg.n_in,
            });
            next_op += 1;
        }
        stages.push_front(issued);
    }
    out
}

/// Runs integer inference on quantized inputs through the scheduled
/// datapath. Returns every layer's output and the cycles spent per layer.
pub fn emulate_int(
    qmlp: &QuantizedMlp,
    schedule: &Schedule,
    x_q: &[i8],
    trace: Option<&mut Vec<TraceEvent>>,
) -> Result<(Vec<Vec<i8>>, Vec<u64>)> {
    schedule.validate()?;
    if x_q.len() != qmlp.spec.input_dim {
        return Err(Error::Argument(format!(
            "expected {} inputs, got {}",
            qmlp.spec.input_dim,
            x_q.len()
        )));
    }
    let mut rec = Recorder {
        cycle: 0,
        layer: 0,
        trace,
    };
    let n_layers = qmlp.layers.len();
    let mut buffer: Vec<i8> = x_q.to_vec();
    let mut outputs = Vec::with_capacity(n_layers);
    let mut per_layer = Vec::with_capacity(n_layers);
    for (k, l) in qmlp.layers.iter().enumerate() {
        rec.layer = k;
        let start_cycle = rec.cycle;

        rec.tick();
        rec.event(Unit::Control, Op::Start);
        rec.tick();
        rec.event(Unit::Control, Op::Config);
        let cfg = LayerConfig {
            n_in: l.n_in,
            n_out: l.n_out,
            weights: &l.weights,
            bias: &l.bias,
            z_in: l.input.zero_point as i64,
            z_out: l.output.zero_point as i64,
            m0: l.multiplier.m0 as i64,
            rshift: l.multiplier.rshift,
            relu: k + 1 < n_layers,
        };

        let (datapath, _) = layer_timing(l.n_in, l.n_out, schedule);
        let result = match datapath {
            Datapath::Sequential => run_sequential(&cfg, &buffer, &mut rec),
            Datapath::Pipelined => run_pipelined(&cfg, &buffer, schedule.parallelism, &mut rec),
        };

        rec.tick();
        rec.event(Unit::Control, Op::Swap);
        buffer = result.clone();
        rec.tick();
        rec.event(Unit::Control, Op::Done);

        outputs.push(result);
        per_layer.push(rec.cycle - start_cycle);
    }
    Ok((outputs, per_layer))
}

/// Quantizes a normalized feature vector with the model's input parameters,
/// runs the scheduled datapath and dequantizes the output.
pub fn emulate(qmlp: &QuantizedMlp, schedule: &Schedule, x: &[f64]) -> Result<EmulationResult> {
    emulate_traced(qmlp, schedule, x, None)
}

pub fn emulate_traced(
    qmlp: &QuantizedMlp,
    schedule: &Schedule,
    x: &[f64],
    trace: Option<&mut Vec<TraceEvent>>,
) -> Result<EmulationResult> {
    if x.len() != qmlp.spec.input_dim {
        return Err(Error::Argument(format!(
            "expected {} inputs, got {}",
            qmlp.spec.input_dim,
            x.len()
        )));
    }
    let input = crate::quant::quantize_tensor(x, &qmlp.input);
    let (layers, per_layer_cycles) = emulate_int(qmlp, schedule, &input, trace)?;
    let output: Vec<f64> = layers
        .last()
        .expect("model has at least one layer")
        .iter()
        .map(|&q| qmlp.output.dequantize(q))
        .collect();
    Ok(EmulationResult {
        input,
        flow_m3s: qmlp.scaler.denormalize_target(output[0]),
        output,
        total_cycles: per_layer_cycles.iter().sum(),
        per_layer_cycles,
        layers,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::Scaler;
    use crate::mlp::MlpSpec;
    use crate::quant::{FixedMultiplier, QuantLayer, QuantParams};

    pub(crate) fn zero_model(dims: &[usize]) -> QuantizedMlp {
        let qp = QuantParams {
            scale: 0.02,
            zero_point: -128,
            symmetric: false,
        };
        let spec = MlpSpec::new(dims[0], &dims[1..dims.len() - 1], dims[dims.len() - 1]);
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(n_in, n_out)| QuantLayer {
                n_in,
                n_out,
                weights: vec![0; n_in * n_out],
                bias: vec![0; n_out],
                weight_scale: 1.0,
                input: qp,
                output: qp,
                multiplier: FixedMultiplier { m0: 1 << 30, rshift: 31 },
            })
            .collect();
        QuantizedMlp {
            scaler: Scaler::identity(spec.input_dim),
            spec,
            input: qp,
            output: qp,
            layers,
        }
    }

    #[test]
    fn plan_examples() {
        assert_eq!(sequential_layer_cycles(3, 16), 84);
        assert_eq!(pipelined_layer_cycles(3, 16, 4), 19);
        assert_eq!(pipelined_layer_cycles(3, 16, 1), 55);
        let seq = plan_dims(&[(3, 16)], &Schedule::sequential(1e8));
        let pipe = plan_dims(&[(3, 16)], &Schedule::pipelined(4, 1e8));
        assert_eq!((seq.total_cycles, pipe.total_cycles), (84, 19));
        let s = speedup(&seq, &pipe);
        assert!((s.reduction_percent - 77.380_952_380_952_38).abs() < 1e-9);
        assert_eq!(speedup(&seq, &seq).ratio, 1.0);
    }

    #[test]
    fn single_neuron_layer_falls_back() {
        // n_in + 7 pipelined vs n_in + 6 sequential
        assert_eq!(pipelined_layer_cycles(16, 1, 1), 23);
        assert_eq!(sequential_layer_cycles(16, 1), 22);
        let (dp, cycles) = layer_timing(16, 1, &Schedule::pipelined(1, 1e8));
        assert_eq!((dp, cycles), (Datapath::Sequential, 22));
        let (dp, cycles) = layer_timing(16, 1, &Schedule::pipelined(4, 1e8));
        assert_eq!((dp, cycles), (Datapath::Pipelined, 11));
    }

    #[test]
    fn zero_model_outputs_zero_point() {
        let q = zero_model(&[3, 8, 1]);
        for sched in [Schedule::sequential(1e8), Schedule::pipelined(3, 1e8)] {
            let r = emulate(&q, &sched, &[0.0, 0.0, 0.0]).unwrap();
            assert_eq!(r.layers[1], vec![-128]);
            assert_eq!(r.output, vec![0.0]);
            assert_eq!(r.total_cycles, plan(&q, &sched).total_cycles);
        }
    }

    #[test]
    fn trace_counts_match_plan() {
        let q = zero_model(&[3, 5, 2]);
        let sched = Schedule::pipelined(2, 1e8);
        let mut trace = Vec::new();
        let r = emulate_traced(&q, &sched, &[0.1, 0.2, 0.3], Some(&mut trace)).unwrap();
        assert_eq!(trace.last().unwrap().cycle, r.total_cycles);
        let macs = trace.iter().filter(|e| matches!(e.op, Op::Mac { .. })).count();
        assert_eq!(macs, 3 * 5 + 5 * 2);
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cycle,layer,unit,op\n1,0,ctl,start\n2,0,ctl,config\n3,0,mac0,mac:0.0\n3,0,mac1,mac:0.1\n"));
    }

    #[test]
    fn schedule_validation() {
        let mut s = Schedule::sequential(1e8);
        s.parallelism = 2;
        assert!(s.validate().is_err());
        assert!(Schedule::pipelined(0, 1e8).validate().is_err());
        let mut s = Schedule::pipelined(2, 1e8);
        s.pipeline_depth = 4;
        assert!(s.validate().is_err());
        assert!(Schedule::pipelined(2, 0.0).validate().is_err());
    }

    #[test]
    fn dimension_mismatch() {
        let q = zero_model(&[3, 1]);
        assert!(emulate(&q, &Schedule::default(), &[0.0]).is_err());
    }
}

//! One-command orchestration: data → split → train → calibrate → quantize →
//! emulate → HDL bundle → testbench → cost report.
//!
//! Stage seeds derive from the single master `seed`: data `seed`, split
//! `seed + 1`, init/training `seed + 2`, calibration sampling `seed + 3`.
//! Every artifact is written with [`write_atomic`], so an interrupted build
//! never leaves a half-written file behind.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifact::{sha256_hex, write_atomic};
use crate::costmodel::{
    check_fit, compare_targets, estimate_shape, find_profile, load_profiles, DesignShape, FitReport,
    ResourceEstimate, TargetComparison, TargetProfile,
};
use crate::dataset::{load_csv, split, to_csv_string, Dataset, SplitFractions};
use crate::emu::{plan, speedup, CyclePlan, Schedule, Speedup};
use crate::error::{Error, Result};
use crate::hydrosim::{generate, sensor_ablation, FlumeConfig};
use crate::mlp::{evaluate, init_mlp, train, FloatMlp, Metrics, MlpSpec, TrainConfig};
use crate::quant::{calibrate, evaluate_quantized, quantize_model, QuantizedMlp};
use crate::rtlgen::{generate_rtl, generate_testbench, lint_bundle, Finding, ManifestEntry};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synth {
        #[serde(default)]
        flume: FlumeConfig,
        n_samples: usize,
    },
    /// Path relative to the config file's directory.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![16, 16] }
    }
}

/// [`TrainConfig`] without the seed, which derives from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
        }
    }
}

impl TrainSettings {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantOptions {
    /// Training samples used for range calibration (all when larger).
    pub calibration_samples: usize,
}

impl Default for QuantOptions {
    fn default() -> Self {
        QuantOptions {
            calibration_samples: 512,
        }
    }
}

fn default_target() -> String {
    "xc7s15".into()
}

fn default_compare() -> Vec<String> {
    vec!["xc7s15".into(), "ice40up5k".into()]
}

fn default_vectors() -> usize {
    32
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("build")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub quant: QuantOptions,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_target")]
    pub target: String,
    #[serde(default = "default_compare")]
    pub compare_targets: Vec<String>,
    #[serde(default = "default_vectors")]
    pub testbench_vectors: usize,
    /// Sensor subsets for `forge ablate`.
    #[serde(default)]
    pub ablation: Option<Vec<Vec<usize>>>,
    /// Relative to the config file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl BuildConfig {
    /// Synthetic-data config with every other field at its default.
    pub fn synth(n_samples: usize, seed: u64) -> Self {
        BuildConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed,
            dataset: DatasetSource::Synth {
                flume: FlumeConfig::default(),
                n_samples,
            },
            split: SplitFractions::default(),
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            quant: QuantOptions::default(),
            schedule: Schedule::default(),
            target: default_target(),
            compare_targets: default_compare(),
            testbench_vectors: default_vectors(),
            ablation: None,
            output_dir: default_output_dir(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: BuildConfig =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {CONFIG_SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        match &self.dataset {
            DatasetSource::Synth { flume, n_samples } => {
                flume.validate()?;
                if *n_samples < 3 {
                    return Err(Error::config("dataset.synth.n_samples", "need at least 3 samples"));
                }
            }
            DatasetSource::Csv { path } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("dataset.csv.path", "must not be empty"));
                }
            }
        }
        self.split
            .validate()
            .map_err(|e| Error::config("split", e.to_string()))?;
        if self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be >= 1"));
        }
        self.train.with_seed(0).validate()?;
        if self.quant.calibration_samples == 0 {
            return Err(Error::config("quant.calibration_samples", "must be >= 1"));
        }
        self.schedule.validate()?;
        if self.target.is_empty() {
            return Err(Error::config("target", "must not be empty"));
        }
        if self.testbench_vectors == 0 {
            return Err(Error::config("testbench_vectors", "must be >= 1"));
        }
        Ok(())
    }

    pub fn seeds(&self) -> StageSeeds {
        StageSeeds {
            data: self.seed,
            split: self.seed.wrapping_add(1),
            train: self.seed.wrapping_add(2),
            calibration: self.seed.wrapping_add(3),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub data: u64,
    pub split: u64,
    pub train: u64,
    pub calibration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Data,
    Split,
    Train,
    Calibrate,
    Quantize,
    Evaluate,
    Emulate,
    Rtl,
    Testbench,
    Cost,
    Report,
    Ablate,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().expect("unit variant"))
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    /// 2: fit failure, 3: training divergence, 4: configuration or input
    /// error, 1: anything else.
    pub fn exit_code(&self) -> u8 {
        match (&self.source, self.stage) {
            (Error::Fit { .. }, _) => 2,
            (Error::Training { .. }, _) => 3,
            (Error::Config { .. } | Error::UnknownTarget(_), _) => 4,
            (_, Stage::Config | Stage::Data) => 4,
            _ => 1,
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildOptions {
    pub override_fit: bool,
    /// Replaces `output_dir` from the config.
    pub out_dir: Option<PathBuf>,
    /// Replaces the master seed from the config.
    pub seed: Option<u64>,
    /// Extra profile directory; `FORGE_PROFILE_DIR` when absent.
    pub profile_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub source: String,
    pub n_samples: usize,
    pub n_sensors: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub flow_min_m3s: f64,
    pub flow_max_m3s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub final_train_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub sequential: CyclePlan,
    pub configured: CyclePlan,
    pub speedup: Speedup,
    pub latency_s: f64,
}

/// Published figures for a comparable hardware deployment. Quoted for
/// context; this tool does not measure hardware.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalReference {
    pub note: String,
    pub speedup_vs_mcu_x: f64,
    pub precision_gain_percent: f64,
    pub latency_reduction_percent: f64,
    pub energy_overhead_percent: f64,
}

impl Default for ExternalReference {
    fn default() -> Self {
        ExternalReference {
            note: "Hardware measurements reported for a comparable FPGA flow soft sensor against \
                   unpublished baselines. Quoted for context only; not reproduced by this tool."
                .into(),
            speedup_vs_mcu_x: 28.44,
            precision_gain_percent: 9.7,
            latency_reduction_percent: 9.39,
            energy_overhead_percent: 5.71,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub schema_version: u32,
    pub tool_version: String,
    /// The effective config without `output_dir`.
    pub config: serde_json::Value,
    pub seeds: StageSeeds,
    pub dataset: DatasetSummary,
    pub training: TrainingSummary,
    pub float_metrics: Metrics,
    pub quant_metrics: Metrics,
    /// Float accuracy minus quantized accuracy, in MAPE percentage points.
    pub accuracy_delta_pp: f64,
    pub cycles: CycleSummary,
    pub target: String,
    pub resources: ResourceEstimate,
    pub fit: FitReport,
    pub comparisons: Vec<TargetComparison>,
    pub lint_findings: Vec<Finding>,
    /// Every artifact except `report.json`, relative to the output directory.
    pub files: Vec<ManifestEntry>,
    pub external_reference: ExternalReference,
    /// Wall-clock per stage; the only non-deterministic field.
    pub timings_ms: BTreeMap<String, f64>,
}

impl BuildReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub out_dir: PathBuf,
    pub report: BuildReport,
    pub model: FloatMlp,
    pub qmodel: QuantizedMlp,
}

pub const REPORT_FILE: &str = "report.json";
pub const MODEL_FILE: &str = "model.json";
pub const QMODEL_FILE: &str = "qmodel.json";

struct Timer {
    timings: BTreeMap<String, f64>,
    last: Instant,
}

impl Timer {
    fn new() -> Self {
        Timer {
            timings: BTreeMap::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        self.timings
            .insert(stage.to_string(), (now - self.last).as_secs_f64() * 1e3);
        self.last = now;
    }
}

fn resolve(base_dir: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

/// Loads or generates the dataset. Values are rounded to CSV precision so
/// the written splits reproduce the in-memory ones exactly.
pub fn load_dataset(cfg: &BuildConfig, base_dir: &Path) -> Result<Dataset> {
    let ds = match &cfg.dataset {
        DatasetSource::Synth { flume, n_samples } => generate(flume, *n_samples, cfg.seeds().data)?,
        DatasetSource::Csv { path } => load_csv(resolve(base_dir, path))?,
    };
    Ok(ds.rounded_to_csv_precision())
}

fn target_profiles(
    cfg: &BuildConfig,
    profile_dir: Option<&Path>,
) -> Result<(TargetProfile, Vec<TargetProfile>)> {
    let all = load_profiles(profile_dir)?;
    let names: Vec<&str> = all.iter().map(|p| p.name.as_str()).collect();
    let unknown = |field: &str, name: &str| {
        Error::config(field, format!("unknown target `{name}`; available: {}", names.join(", ")))
    };
    let target = find_profile(&all, &cfg.target)
        .map_err(|_| unknown("target", &cfg.target))?
        .clone();
    let compare = cfg
        .compare_targets
        .iter()
        .map(|n| find_profile(&all, n).cloned().map_err(|_| unknown("compare_targets", n)))
        .collect::<Result<Vec<_>>>()?;
    Ok((target, compare))
}

struct Trained {
    model: FloatMlp,
    history: Vec<crate::mlp::EpochLoss>,
}

fn train_model(cfg: &BuildConfig, train_set: &Dataset, val_set: &Dataset) -> Result<Trained> {
    let spec = MlpSpec::new(train_set.n_features(), &cfg.model.hidden, 1);
    let seed = cfg.seeds().train;
    let init = init_mlp(&spec, seed)?;
    let (model, history) = train(&init, train_set, val_set, &cfg.train.with_seed(seed))?;
    Ok(Trained { model, history })
}

fn calibration_set(cfg: &BuildConfig, train_set: &Dataset, scaler: &crate::dataset::Scaler) -> Vec<Vec<f64>> {
    let (xs, _) = train_set.normalized_with(scaler);
    if xs.len() <= cfg.quant.calibration_samples {
        return xs;
    }
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seeds().calibration));
    idx.truncate(cfg.quant.calibration_samples);
    idx.sort_unstable();
    idx.into_iter().map(|i| xs[i].clone()).collect()
}

/// Writes `bytes` under `out_dir` and records its hash.
fn emit(out_dir: &Path, rel: &str, bytes: &[u8], files: &mut Vec<ManifestEntry>) -> Result<()> {
    write_atomic(&out_dir.join(rel), bytes)?;
    files.push(ManifestEntry {
        name: rel.to_string(),
        bytes: bytes.len(),
        sha256: sha256_hex(bytes),
    });
    Ok(())
}

/// Runs every stage and writes the artifact directory. `base_dir` anchors
/// relative paths in the config.
pub fn build(
    config: &BuildConfig,
    base_dir: &Path,
    opts: &BuildOptions,
) -> std::result::Result<BuildOutcome, StageError> {
    let mut timer = Timer::new();
    let mut cfg = config.clone();
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate().at(Stage::Config)?;
    let (target, compare) = target_profiles(&cfg, opts.profile_dir.as_deref()).at(Stage::Config)?;
    let out_dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| resolve(base_dir, &cfg.output_dir));
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e)).at(Stage::Config)?;
    let mut files = Vec::new();
    timer.lap(Stage::Config);

    let data = load_dataset(&cfg, base_dir).at(Stage::Data)?;
    if data.n_features() == 0 {
        return Err(Error::Argument("dataset has no sensor columns".into())).at(Stage::Data);
    }
    timer.lap(Stage::Data);

    let (train_set, val_set, test_set) = split(&data, cfg.split, cfg.seeds().split).at(Stage::Split)?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::Argument(format!(
            "split of {} samples leaves an empty train or test set",
            data.len()
        )))
        .at(Stage::Split);
    }
    for (name, part) in [("train", &train_set), ("val", &val_set), ("test", &test_set)] {
        emit(&out_dir, &format!("data/{name}.csv"), to_csv_string(part).as_bytes(), &mut files)
            .at(Stage::Split)?;
    }
    timer.lap(Stage::Split);

    let trained = train_model(&cfg, &train_set, &val_set).at(Stage::Train)?;
    let model = trained.model;
    emit(&out_dir, MODEL_FILE, model.to_json().at(Stage::Train)?.as_bytes(), &mut files).at(Stage::Train)?;
    let best = trained
        .history
        .iter()
        .min_by(|a, b| a.val_mse.total_cmp(&b.val_mse))
        .copied()
        .expect("at least one epoch");
    let training = TrainingSummary {
        epochs: trained.history.len(),
        best_epoch: best.epoch,
        best_val_mse: best.val_mse,
        final_train_mse: trained.history.last().map_or(f64::NAN, |e| e.train_mse),
    };
    timer.lap(Stage::Train);

    let calib = calibration_set(&cfg, &train_set, &model.scaler);
    let ranges = calibrate(&model, &calib).at(Stage::Calibrate)?;
    timer.lap(Stage::Calibrate);

    let qmodel = quantize_model(&model, &ranges).at(Stage::Quantize)?;
    emit(&out_dir, QMODEL_FILE, qmodel.to_json().at(Stage::Quantize)?.as_bytes(), &mut files)
        .at(Stage::Quantize)?;
    timer.lap(Stage::Quantize);

    let float_metrics = evaluate(&model, &test_set).at(Stage::Evaluate)?;
    let quant_metrics = evaluate_quantized(&qmodel, &test_set).at(Stage::Evaluate)?;
    timer.lap(Stage::Evaluate);

    let sequential = plan(&qmodel, &Schedule::sequential(cfg.schedule.clock_hz));
    let configured = plan(&qmodel, &cfg.schedule);
    let cycles = CycleSummary {
        speedup: speedup(&sequential, &configured),
        latency_s: configured.latency_s(cfg.schedule.clock_hz),
        sequential,
        configured,
    };
    timer.lap(Stage::Emulate);

    let mut bundle = generate_rtl(&qmodel, &cfg.schedule, &target, opts.override_fit).at(Stage::Rtl)?;
    timer.lap(Stage::Rtl);

    let (test_x, _) = test_set.normalized_with(&model.scaler);
    let n_vectors = cfg.testbench_vectors.min(test_x.len());
    let tb = generate_testbench(&qmodel, &cfg.schedule, &test_x[..n_vectors]).at(Stage::Testbench)?;
    bundle.add_testbench(tb);
    let lint_findings = lint_bundle(&bundle);
    for (name, text) in &bundle.files {
        emit(&out_dir, &format!("rtl/{name}"), text.as_bytes(), &mut files).at(Stage::Testbench)?;
    }
    let manifest = bundle.manifest();
    emit(&out_dir, "rtl/manifest.json", manifest.to_json().as_bytes(), &mut files).at(Stage::Testbench)?;
    timer.lap(Stage::Testbench);

    let shape = DesignShape::of(&qmodel, &cfg.schedule);
    let resources = estimate_shape(&shape, &target);
    let fit = check_fit(&resources, &target);
    let comparisons = compare_targets(&shape, &cycles.configured, &compare).at(Stage::Cost)?;
    timer.lap(Stage::Cost);

    let mut config_echo = serde_json::to_value(&cfg).expect("config serializes");
    if let Some(obj) = config_echo.as_object_mut() {
        obj.remove("output_dir");
    }
    files.sort_by(|a, b| a.name.cmp(&b.name));
    let mut report = BuildReport {
        schema_version: REPORT_SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        config: config_echo,
        seeds: cfg.seeds(),
        dataset: DatasetSummary {
            source: match cfg.dataset {
                DatasetSource::Synth { .. } => "synth".into(),
                DatasetSource::Csv { .. } => "csv".into(),
            },
            n_samples: data.len(),
            n_sensors: data.n_features(),
            n_train: train_set.len(),
            n_val: val_set.len(),
            n_test: test_set.len(),
            flow_min_m3s: data.targets().into_iter().fold(f64::INFINITY, f64::min),
            flow_max_m3s: data.targets().into_iter().fold(f64::NEG_INFINITY, f64::max),
        },
        training,
        accuracy_delta_pp: float_metrics.accuracy_percent() - quant_metrics.accuracy_percent(),
        float_metrics,
        quant_metrics,
        cycles,
        target: target.name.clone(),
        resources,
        fit,
        comparisons,
        lint_findings,
        files,
        external_reference: ExternalReference::default(),
        timings_ms: BTreeMap::new(),
    };
    timer.lap(Stage::Report);
    report.timings_ms = timer.timings;
    write_atomic(&out_dir.join(REPORT_FILE), report.to_json().as_bytes()).at(Stage::Report)?;
    Ok(BuildOutcome {
        out_dir,
        report,
        model,
        qmodel,
    })
}

/// A serialized model of either kind, detected by its `kind` field.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Float(FloatMlp),
    Quantized(QuantizedMlp),
}

impl AnyModel {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config("model", e.to_string()))?;
        match v.get("kind").and_then(|k| k.as_str()) {
            Some("float_mlp") => Ok(AnyModel::Float(FloatMlp::from_json(text)?)),
            Some("quantized_mlp") => Ok(AnyModel::Quantized(QuantizedMlp::from_json(text)?)),
            Some(other) => Err(Error::config("kind", format!("unknown model kind `{other}`"))),
            None => Err(Error::config("kind", "missing model kind")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub float_metrics: Option<Metrics>,
    pub quant_metrics: Option<Metrics>,
    pub accuracy_delta_pp: Option<f64>,
}

/// Metrics of up to one float and one quantized model on `data`.
pub fn eval_models(models: &[AnyModel], data: &Dataset) -> Result<EvalReport> {
    let mut report = EvalReport {
        n_samples: data.len(),
        float_metrics: None,
        quant_metrics: None,
        accuracy_delta_pp: None,
    };
    for m in models {
        let dim = match m {
            AnyModel::Float(f) => f.spec.input_dim,
            AnyModel::Quantized(q) => q.spec.input_dim,
        };
        if dim != data.n_features() {
            return Err(Error::config(
                "model",
                format!("model expects {dim} sensors, dataset has {}", data.n_features()),
            ));
        }
        let (slot, metrics) = match m {
            AnyModel::Float(f) => (&mut report.float_metrics, evaluate(f, data)?),
            AnyModel::Quantized(q) => (&mut report.quant_metrics, evaluate_quantized(q, data)?),
        };
        if slot.replace(metrics).is_some() {
            return Err(Error::Argument("at most one model of each kind".into()));
        }
    }
    if let (Some(f), Some(q)) = (report.float_metrics, report.quant_metrics) {
        report.accuracy_delta_pp = Some(f.accuracy_percent() - q.accuracy_percent());
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sensors: Vec<usize>,
    pub metrics: Metrics,
}

/// Trains one model per sensor subset with the build's split and seeds and
/// scores it on the test part. Rows are sorted by subset size, then R²
/// descending.
pub fn ablate(
    config: &BuildConfig,
    base_dir: &Path,
    seed: Option<u64>,
) -> std::result::Result<Vec<AblationRow>, StageError> {
    let mut cfg = config.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().at(Stage::Config)?;
    let subsets = match &cfg.ablation {
        Some(s) if !s.is_empty() => s.clone(),
        _ => {
            return Err(Error::config("ablation", "needs at least one sensor subset")).at(Stage::Config);
        }
    };
    let data = load_dataset(&cfg, base_dir).at(Stage::Data)?;
    let results = sensor_ablation(&data, &subsets, |projected| {
        let (tr, va, te) = split(projected, cfg.split, cfg.seeds().split)?;
        let trained = train_model(&cfg, &tr, &va)?;
        evaluate(&trained.model, &te)
    })
    .map_err(|e| match e {
        Error::Argument(m) => Error::config("ablation", m),
        other => other,
    })
    .at(Stage::Ablate)?;
    let mut rows: Vec<AblationRow> = results
        .into_iter()
        .map(|(sensors, metrics)| AblationRow { sensors, metrics })
        .collect();
    rows.sort_by(|a, b| {
        a.sensors
            .len()
            .cmp(&b.sensors.len())
            .then(b.metrics.r2.total_cmp(&a.metrics.r2))
            .then(a.sensors.cmp(&b.sensors))
    });
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> BuildConfig {
        let mut cfg = BuildConfig::synth(300, seed);
        cfg.train.epochs = 20;
        cfg.testbench_vectors = 4;
        cfg
    }

    #[test]
    fn config_roundtrip_and_errors() {
        let cfg = small(1);
        assert_eq!(BuildConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let minimal = r#"{"schema_version": 1, "dataset": {"synth": {"n_samples": 100}}}"#;
        let m = BuildConfig::from_json(minimal).unwrap();
        assert_eq!(m.schedule, Schedule::default());
        assert_eq!(m.target, "xc7s15");
        let err = |text: &str| match BuildConfig::from_json(text) {
            Err(Error::Config { field, message }) => format!("{field}: {message}"),
            other => panic!("{other:?}"),
        };
        assert!(err(r#"{"schema_version": 2, "dataset": {"synth": {"n_samples": 100}}}"#).starts_with("schema_version"));
        assert!(err(r#"{"schema_version": 1, "dataset": {"synth": {"n_samples": 100}}, "bogus": 1}"#).contains("bogus"));
        assert!(err(r#"{"schema_version": 1, "dataset": {"synth": {"n_samples": 100}, "csv": {"path": "a"}}}"#).starts_with("config"));
        assert!(err(r#"{"schema_version": 1, "dataset": {"synth": {"n_samples": 100}}, "split": {"train": 0.5, "val": 0.1, "test": 0.1}}"#).starts_with("split"));
    }

    #[test]
    fn unknown_target_is_config_error() {
        let mut cfg = small(1);
        cfg.target = "xc9z".into();
        let dir = tempfile::tempdir().unwrap();
        let err = build(&cfg, dir.path(), &BuildOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("`target`"), "{err}");
    }

    #[test]
    fn build_writes_coherent_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = build(&small(5), dir.path(), &BuildOptions::default()).unwrap();
        let r = &out.report;
        assert!(r.lint_findings.is_empty());
        for f in &r.files {
            let bytes = fs::read(out.out_dir.join(&f.name)).unwrap();
            assert_eq!(sha256_hex(&bytes), f.sha256, "{}", f.name);
        }
        let test = crate::dataset::load_csv(out.out_dir.join("data/test.csv")).unwrap();
        let q = AnyModel::load(&out.out_dir.join(QMODEL_FILE)).unwrap();
        let f = AnyModel::load(&out.out_dir.join(MODEL_FILE)).unwrap();
        let e = eval_models(&[f, q], &test).unwrap();
        assert_eq!(e.quant_metrics, Some(r.quant_metrics));
        assert_eq!(e.float_metrics, Some(r.float_metrics));
        assert_eq!(e.accuracy_delta_pp, Some(r.accuracy_delta_pp));
        let back = BuildReport::from_json(&fs::read_to_string(out.out_dir.join(REPORT_FILE)).unwrap()).unwrap();
        assert_eq!(&back, r);
        assert!(!r.config.as_object().unwrap().contains_key("output_dir"));
    }

    #[test]
    fn fit_failure_and_override() {
        let dir = tempfile::tempdir().unwrap();
        let tiny = TargetProfile {
            name: "tiny".into(),
            luts_total: 50,
            ..find_profile(&load_profiles(None).unwrap(), "ice40up5k").unwrap().clone()
        };
        fs::write(dir.path().join("tiny.json"), serde_json::to_string(&tiny).unwrap()).unwrap();
        let mut cfg = small(2);
        cfg.target = "tiny".into();
        cfg.compare_targets = vec!["tiny".into()];
        let opts = BuildOptions {
            profile_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let err = build(&cfg, dir.path(), &opts).unwrap_err();
        assert_eq!((err.exit_code(), err.stage), (2, Stage::Rtl));
        let opts = BuildOptions {
            override_fit: true,
            ..opts
        };
        let out = build(&cfg, dir.path(), &opts).unwrap();
        assert!(!out.report.fit.fits);
    }

    #[test]
    fn divergence_exit_code() {
        let mut cfg = small(3);
        cfg.train.learning_rate = 1e300;
        let dir = tempfile::tempdir().unwrap();
        let err = build(&cfg, dir.path(), &BuildOptions::default()).unwrap_err();
        assert_eq!((err.exit_code(), err.stage), (3, Stage::Train), "{err}");
    }

    #[test]
    fn ablation_rows_sorted() {
        let mut cfg = small(4);
        cfg.ablation = Some(vec![vec![0, 1, 2], vec![1], vec![0], vec![0, 1]]);
        let rows = ablate(&cfg, Path::new("."), None).unwrap();
        let sizes: Vec<usize> = rows.iter().map(|r| r.sensors.len()).collect();
        assert_eq!(sizes, vec![1, 1, 2, 3]);
        assert!(rows[0].metrics.r2 >= rows[1].metrics.r2);
        cfg.ablation = Some(vec![]);
        assert_eq!(ablate(&cfg, Path::new("."), None).unwrap_err().exit_code(), 4);
        cfg.ablation = Some(vec![vec![0], vec![0]]);
        assert_eq!(ablate(&cfg, Path::new("."), None).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn eval_rejects_mismatched_model() {
        let ds = crate::hydrosim::generate(&FlumeConfig::default(), 20, 0).unwrap();
        let mut two = ds.project(&[0, 1]).unwrap();
        two.fit_scaler().unwrap();
        let m = init_mlp(&MlpSpec::new(3, &[4], 1), 0).unwrap();
        assert!(matches!(eval_models(&[AnyModel::Float(m)], &two), Err(Error::Config { .. })));
        assert!(matches!(AnyModel::from_json("{\"kind\": \"x\"}"), Err(Error::Config { .. })));
        assert!(matches!(AnyModel::from_json("not json"), Err(Error::Config { .. })));
    }
}

//! Level/flow samples, min-max scaling, CSV interchange and splitting.
//!
//! CSV layout is `timestamp,level_1[,level_2,level_3],flow_m3s` with LF line
//! endings. Values are written with 9 significant digits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hydrosim::FlumeConfig;

/// Maximum number of level sensors on the bench.
pub const MAX_SENSORS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub timestamp_s: f64,
    pub levels_m: Vec<f64>,
    pub flow_m3s: f64,
}

/// Closed interval used for min-max normalization onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: f64,
    pub max: f64,
}

impl MinMax {
    pub const UNIT: MinMax = MinMax { min: 0.0, max: 1.0 };

    /// Fits `[min, max]` over `values`. A zero-width range is widened to
    /// `[min, min + 1]` so that normalization stays invertible.
    fn fit(values: impl Iterator<Item = f64>) -> Option<MinMax> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return None;
        }
        if hi <= lo {
            hi = lo + 1.0;
        }
        Some(MinMax { min: lo, max: hi })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }
}

/// Per-feature and target min-max scaling fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub features: Vec<MinMax>,
    pub target: MinMax,
}

impl Scaler {
    /// Pass-through scaler for models trained on already-normalized data.
    pub fn identity(n_features: usize) -> Self {
        Scaler {
            features: vec![MinMax::UNIT; n_features],
            target: MinMax::UNIT,
        }
    }

    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Argument("cannot fit a scaler on an empty dataset".into()))?;
        let n = first.levels_m.len();
        let features = (0..n)
            .map(|j| {
                MinMax::fit(samples.iter().map(|s| s.levels_m[j]))
                    .ok_or_else(|| Error::Argument(format!("feature {j} has non-finite values")))
            })
            .collect::<Result<Vec<_>>>()?;
        let target = MinMax::fit(samples.iter().map(|s| s.flow_m3s))
            .ok_or_else(|| Error::Argument("target has non-finite values".into()))?;
        Ok(Scaler { features, target })
    }

    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.features.iter().chain(std::iter::once(&self.target)).enumerate() {
            if !(r.min.is_finite() && r.max.is_finite() && r.min < r.max) {
                return Err(Error::config(
                    format!("scaler[{i}]"),
                    format!("range must satisfy min < max, got [{}, {}]", r.min, r.max),
                ));
            }
        }
        Ok(())
    }

    pub fn normalize_features(&self, levels: &[f64]) -> Vec<f64> {
        levels
            .iter()
            .zip(&self.features)
            .map(|(&v, r)| r.normalize(v))
            .collect()
    }

    pub fn normalize_target(&self, flow: f64) -> f64 {
        self.target.normalize(flow)
    }

    pub fn denormalize_target(&self, y: f64) -> f64 {
        self.target.denormalize(y)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    #[serde(default)]
    pub config: Option<FlumeConfig>,
    #[serde(default)]
    pub scaler: Option<Scaler>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset {
            samples,
            config: None,
            scaler: None,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of level features, taken from the first sample.
    pub fn n_features(&self) -> usize {
        self.samples.first().map_or(0, |s| s.levels_m.len())
    }

    pub fn fit_scaler(&mut self) -> Result<&Scaler> {
        let scaler = Scaler::fit(&self.samples)?;
        Ok(self.scaler.insert(scaler))
    }

    /// Returns the fitted scaler or an argument error.
    pub fn scaler(&self) -> Result<&Scaler> {
        self.scaler
            .as_ref()
            .ok_or_else(|| Error::Argument("dataset has no fitted scaler".into()))
    }

    /// Normalized feature rows and targets under the fitted scaler.
    pub fn normalized(&self) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let scaler = self.scaler()?;
        Ok(self.normalized_with(scaler))
    }

    pub fn normalized_with(&self, scaler: &Scaler) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.samples
            .iter()
            .map(|s| {
                (
                    scaler.normalize_features(&s.levels_m),
                    scaler.normalize_target(s.flow_m3s),
                )
            })
            .unzip()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.flow_m3s).collect()
    }

    /// Keeps only the level columns in `indices`. The scaler is dropped since
    /// it no longer matches the feature set.
    pub fn project(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.n_features();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Argument(format!(
                "sensor index {bad} out of range for {n} sensors"
            )));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                timestamp_s: s.timestamp_s,
                levels_m: indices.iter().map(|&i| s.levels_m[i]).collect(),
                flow_m3s: s.flow_m3s,
            })
            .collect();
        Ok(Dataset {
            samples,
            config: self.config.clone(),
            scaler: None,
        })
    }

    /// Values as they would read back from CSV (9 significant digits).
    pub fn rounded_to_csv_precision(&self) -> Dataset {
        let r = |v: f64| format_sig9(v).parse::<f64>().unwrap_or(v);
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    timestamp_s: r(s.timestamp_s),
                    levels_m: s.levels_m.iter().map(|&v| r(v)).collect(),
                    flow_m3s: r(s.flow_m3s),
                })
                .collect(),
            config: self.config.clone(),
            scaler: self.scaler.clone(),
        }
    }
}

/// Formats `v` rounded to 9 significant digits in its shortest decimal form.
pub fn format_sig9(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    format!("{rounded}")
}

pub fn csv_header(n_sensors: usize) -> String {
    let mut cols = vec!["timestamp".to_string()];
    cols.extend((1..=n_sensors).map(|i| format!("level_{i}")));
    cols.push("flow_m3s".into());
    cols.join(",")
}

pub fn to_csv_string(dataset: &Dataset) -> String {
    let n = dataset.n_features().max(1);
    let mut out = csv_header(n);
    out.push('\n');
    for s in &dataset.samples {
        out.push_str(&format_sig9(s.timestamp_s));
        for &v in &s.levels_m {
            out.push(',');
            out.push_str(&format_sig9(v));
        }
        out.push(',');
        out.push_str(&format_sig9(s.flow_m3s));
        out.push('\n');
    }
    out
}

/// Parses CSV text in the dataset schema. Errors carry the 1-based line number.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();

    let header = match records.next() {
        None => return Err(Error::parse(1, "missing header")),
        Some(r) => r.map_err(|e| csv_error(e, 1))?,
    };
    if header.iter().all(|c| c.is_empty()) {
        return Err(Error::parse(1, "missing header"));
    }
    let n_cols = header.len();
    if n_cols < 3 || n_cols > MAX_SENSORS + 2 {
        return Err(Error::parse(
            1,
            format!("expected 3 to {} columns, found {n_cols}", MAX_SENSORS + 2),
        ));
    }
    let expected = csv_header(n_cols - 2);
    for (got, want) in header.iter().zip(expected.split(',')) {
        if got != want {
            return Err(Error::parse(
                1,
                format!("missing column `{want}` (found `{got}`)"),
            ));
        }
    }

    let mut samples = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_error(e, 0))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        if rec.len() != n_cols {
            return Err(Error::parse(
                line,
                format!("expected {n_cols} fields, found {}", rec.len()),
            ));
        }
        let mut values = Vec::with_capacity(n_cols);
        for (cell, name) in rec.iter().zip(expected.split(',')) {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::parse(line, format!("non-numeric `{name}` value `{cell}`")))?;
            if !v.is_finite() {
                return Err(Error::parse(line, format!("non-finite `{name}` value")));
            }
            values.push(v);
        }
        let flow = values[n_cols - 1];
        let levels = values[1..n_cols - 1].to_vec();
        if levels.iter().any(|&l| l < 0.0) || flow < 0.0 {
            return Err(Error::parse(line, "levels and flow must be non-negative"));
        }
        samples.push(Sample {
            timestamp_s: values[0],
            levels_m: levels,
            flow_m3s: flow,
        });
    }
    Ok(Dataset::new(samples))
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e
        .position()
        .map_or(fallback_line, |p| p.line() as usize);
    Error::parse(line, e.to_string())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    crate::artifact::write_atomic(path.as_ref(), to_csv_string(dataset).as_bytes())
}

/// Split fractions for train/validation/test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Argument(format!(
                "split fractions must be positive, got {f:?}"
            )));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Argument(format!(
                "split fractions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    /// Largest-remainder allocation of `n` items: floors first, then the
    /// leftover items go to the parts with the largest fractional remainder
    /// (ties resolved train, then val, then test).
    pub fn allocate(&self, n: usize) -> [usize; 3] {
        let quotas = [self.train, self.val, self.test].map(|f| f * n as f64);
        let mut sizes = quotas.map(|q| (q + 1e-9).floor() as usize);
        let mut leftover = n.saturating_sub(sizes.iter().sum());
        let mut order = [0usize, 1, 2];
        let frac = |i: usize| quotas[i] - sizes[i] as f64;
        order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
        for &i in order.iter().cycle() {
            if leftover == 0 {
                break;
            }
            sizes[i] += 1;
            leftover -= 1;
        }
        sizes
    }
}

/// Deterministic shuffled partition. The scaler is fitted on the training
/// part and copied to the other two.
pub fn split(
    dataset: &Dataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    fractions.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("cannot split an empty dataset".into()));
    }
    let [n_train, n_val, _] = fractions.allocate(dataset.len());
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let take = |range: &[usize]| Dataset {
        samples: range.iter().map(|&i| dataset.samples[i].clone()).collect(),
        config: dataset.config.clone(),
        scaler: None,
    };
    let mut train = take(&idx[..n_train]);
    let mut val = take(&idx[n_train..n_train + n_val]);
    let mut test = take(&idx[n_train + n_val..]);
    if !train.is_empty() {
        let scaler = train.fit_scaler()?.clone();
        val.scaler = Some(scaler.clone());
        test.scaler = Some(scaler);
    }
    Ok((train, val, test))
}

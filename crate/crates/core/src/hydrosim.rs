//! Simulated flume bench: Manning open-channel flow, critical depth over a
//! Venturi throat, and noisy multi-sensor level readings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, MAX_SENSORS};
use crate::error::{Error, Result};

/// Gravitational acceleration (m/s²).
pub const GRAVITY: f64 = 9.81;

pub const MIN_SLOPE: f64 = -0.005;
pub const MAX_SLOPE: f64 = 0.025;

/// Magnitude range (m) of a floating-solid echo spike.
pub const SPIKE_RANGE_M: (f64, f64) = (0.01, 0.05);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Structure {
    Plain,
    Venturi { throat_width_m: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    /// Longitudinal mount positions (m); one entry per sensor.
    pub positions_m: Vec<f64>,
    /// True where the sensor hangs over the Venturi throat.
    pub at_constriction: Vec<bool>,
}

impl SensorLayout {
    pub fn count(&self) -> usize {
        self.positions_m.len()
    }
}

impl Default for SensorLayout {
    fn default() -> Self {
        SensorLayout {
            positions_m: vec![0.5, 1.5, 2.5],
            at_constriction: vec![false; 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlumeConfig {
    pub width_m: f64,
    pub slope: f64,
    pub roughness_n: f64,
    pub structure: Structure,
    pub sensors: SensorLayout,
    pub noise_sigma_m: f64,
    pub contamination_rate: f64,
    pub depth_range_m: (f64, f64),
}

impl Default for FlumeConfig {
    fn default() -> Self {
        FlumeConfig {
            width_m: 0.3,
            slope: 0.001,
            roughness_n: 0.010,
            structure: Structure::Plain,
            sensors: SensorLayout::default(),
            noise_sigma_m: 0.0,
            contamination_rate: 0.0,
            depth_range_m: (0.02, 0.25),
        }
    }
}

impl FlumeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width_m > 0.0 && self.width_m.is_finite()) {
            return Err(Error::config("width_m", "must be positive"));
        }
        if !(self.roughness_n > 0.0 && self.roughness_n.is_finite()) {
            return Err(Error::config("roughness_n", "must be positive"));
        }
        if !(MIN_SLOPE..=MAX_SLOPE).contains(&self.slope) {
            return Err(Error::config(
                "slope",
                format!("must lie in [{MIN_SLOPE}, {MAX_SLOPE}], got {}", self.slope),
            ));
        }
        if let Structure::Venturi { throat_width_m } = self.structure {
            if !(throat_width_m > 0.0 && throat_width_m < self.width_m) {
                return Err(Error::config(
                    "structure.throat_width_m",
                    "must be positive and narrower than the channel",
                ));
            }
        }
        let s = &self.sensors;
        if !(1..=MAX_SENSORS).contains(&s.count()) {
            return Err(Error::config(
                "sensors.positions_m",
                format!("expected 1 to {MAX_SENSORS} sensors, got {}", s.count()),
            ));
        }
        if s.at_constriction.len() != s.count() {
            return Err(Error::config(
                "sensors.at_constriction",
                "must have one flag per sensor",
            ));
        }
        if s.positions_m.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::config(
                "sensors.positions_m",
                "positions must be strictly increasing",
            ));
        }
        if !(self.noise_sigma_m >= 0.0 && self.noise_sigma_m.is_finite()) {
            return Err(Error::config("noise_sigma_m", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.contamination_rate) {
            return Err(Error::config("contamination_rate", "must lie in [0, 1]"));
        }
        let (lo, hi) = self.depth_range_m;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(
                "depth_range_m",
                "must satisfy 0 < min <= max",
            ));
        }
        Ok(())
    }
}

/// Uniform-flow discharge Q = (1/n)·A·R^(2/3)·√S for a rectangular channel.
/// Zero for an empty channel or a non-positive slope.
pub fn manning_flow(depth_m: f64, cfg: &FlumeConfig) -> Result<f64> {
    if !(cfg.width_m > 0.0) {
        return Err(Error::config("width_m", "must be positive"));
    }
    if !(cfg.roughness_n > 0.0) {
        return Err(Error::config("roughness_n", "must be positive"));
    }
    if !(depth_m >= 0.0) {
        return Err(Error::Argument(format!("depth must be >= 0, got {depth_m}")));
    }
    if depth_m == 0.0 || cfg.slope <= 0.0 {
        return Ok(0.0);
    }
    let w = cfg.width_m;
    let area = w * depth_m;
    let hydraulic_radius = area / (w + 2.0 * depth_m);
    Ok(area * hydraulic_radius.powf(2.0 / 3.0) * cfg.slope.sqrt() / cfg.roughness_n)
}

/// Critical depth h_c = (Q² / (g·b²))^(1/3) for a rectangular section of width `b`.
pub fn critical_depth(flow_m3s: f64, width_m: f64) -> f64 {
    (flow_m3s * flow_m3s / (GRAVITY * width_m * width_m)).cbrt()
}

/// Noise-free level reading at each sensor.
pub fn sensor_levels(depth_m: f64, flow_m3s: f64, cfg: &FlumeConfig) -> Result<Vec<f64>> {
    if !(depth_m > 0.0) {
        return Err(Error::Argument(format!("depth must be > 0, got {depth_m}")));
    }
    let s = &cfg.sensors;
    if s.at_constriction.len() != s.count() {
        return Err(Error::config(
            "sensors.at_constriction",
            "must have one flag per sensor",
        ));
    }
    Ok(s.at_constriction
        .iter()
        .map(|&over_throat| match cfg.structure {
            Structure::Venturi { throat_width_m } if over_throat => {
                critical_depth(flow_m3s, throat_width_m)
            }
            _ => depth_m,
        })
        .collect())
}

/// Draws `n_samples` readings at 1 s spacing.
///
/// Per sample the RNG stream (ChaCha8, seeded with `seed`) is consumed in
/// this order: depth ~ U[min, max]; one standard normal per sensor (scaled by
/// σ); one U[0, 1) contamination draw; and, if it falls below the rate, a
/// sensor index ~ U{0..count} and a spike ~ U[0.01, 0.05) m.
pub fn generate(cfg: &FlumeConfig, n_samples: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::Argument("n_samples must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.depth_range_m;
    let count = cfg.sensors.count();
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let depth = rng.random_range(lo..=hi);
        let flow = manning_flow(depth, cfg)?;
        let mut levels = sensor_levels(depth, flow, cfg)?;
        for level in levels.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *level += cfg.noise_sigma_m * z;
        }
        if rng.random::<f64>() < cfg.contamination_rate {
            let which = rng.random_range(0..count);
            levels[which] += rng.random_range(SPIKE_RANGE_M.0..SPIKE_RANGE_M.1);
        }
        for level in levels.iter_mut() {
            *level = level.max(0.0);
        }
        samples.push(Sample {
            timestamp_s: i as f64,
            levels_m: levels,
            flow_m3s: flow,
        });
    }
    Ok(Dataset {
        samples,
        config: Some(cfg.clone()),
        scaler: None,
    })
}

/// Runs `evaluate` once per sensor subset on the dataset projected onto that
/// subset. Subsets are compared as sorted index sets, so `{1, 0}` and
/// `{0, 1}` are duplicates.
pub fn sensor_ablation<T, F>(
    dataset: &Dataset,
    subsets: &[Vec<usize>],
    mut evaluate: F,
) -> Result<Vec<(Vec<usize>, T)>>
where
    F: FnMut(&Dataset) -> Result<T>,
{
    let arity = dataset.n_features();
    let mut keys: Vec<Vec<usize>> = Vec::with_capacity(subsets.len());
    for subset in subsets {
        if subset.is_empty() {
            return Err(Error::Argument("sensor subset must not be empty".into()));
        }
        let mut key = subset.clone();
        key.sort_unstable();
        if key.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument(format!(
                "sensor subset {subset:?} repeats an index"
            )));
        }
        if let Some(&bad) = key.iter().find(|&&i| i >= arity) {
            return Err(Error::Argument(format!(
                "sensor index {bad} out of range for {arity} sensors"
            )));
        }
        if keys.contains(&key) {
            return Err(Error::Argument(format!("duplicate sensor subset {key:?}")));
        }
        keys.push(key);
    }
    keys.into_iter()
        .map(|key| {
            let projected = dataset.project(&key)?;
            Ok((key, evaluate(&projected)?))
        })
        .collect()
}

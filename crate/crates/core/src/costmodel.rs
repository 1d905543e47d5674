//! Analytic FPGA resource, power and energy model.
//!
//! Resources for a design with `L` layers and `P` MAC units:
//!
//! ```text
//! dsps      = min(P, dsps_total)
//! luts      = base + per_layer_control·L + per_fabric_mac·(P − dsps) + per_requant_unit·P
//! rom_bits  = 8·Σ n_in·n_out + 32·Σ n_out + 8·2·max_width
//! bram_bits = rom_bits · bram_mapping_factor
//! ```
//!
//! Dynamic power scales linearly with clock and with `luts + 100·dsps`
//! relative to the profile's reference design at its reference clock.
//!
//! All coefficients come from JSON profiles (see `profiles/`), so a new
//! device only needs a new file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::emu::{CyclePlan, Mode, Schedule};
use crate::error::{Error, Result};
use crate::quant::QuantizedMlp;

/// Weight of one DSP block relative to one LUT in the activity measure.
pub const DSP_ACTIVITY_WEIGHT: f64 = 100.0;
/// Utilization above this percentage produces a warning.
pub const WARNING_PERCENT: f64 = 85.0;
/// Environment variable naming an extra profile directory.
pub const PROFILE_DIR_ENV: &str = "FORGE_PROFILE_DIR";

const BUILTIN_PROFILES: [&str; 2] = [
    include_str!("../../../profiles/xc7s15.json"),
    include_str!("../../../profiles/ice40up5k.json"),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LutModel {
    pub base: f64,
    pub per_layer_control: f64,
    pub per_fabric_mac: f64,
    pub per_requant_unit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceDesign {
    /// Layer widths including input and output, e.g. `[3, 16, 16, 1]`.
    pub widths: Vec<usize>,
    pub parallelism: usize,
}

impl ReferenceDesign {
    pub fn shape(&self) -> DesignShape {
        DesignShape {
            dims: self.widths.windows(2).map(|w| (w[0], w[1])).collect(),
            mac_units: self.parallelism,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetProfile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub luts_total: u64,
    pub bram_units: u64,
    pub bram_unit_bits: u64,
    /// Additional on-chip RAM counted with block RAM (e.g. SPRAM).
    #[serde(default)]
    pub extra_ram_bits: u64,
    pub dsps_total: u64,
    pub static_power_w: f64,
    pub dynamic_power_w_at_ref: f64,
    pub ref_clock_hz: f64,
    pub max_clock_hz: f64,
    pub lut_model: LutModel,
    pub bram_mapping_factor: f64,
    pub reference_design: ReferenceDesign,
}

impl TargetProfile {
    pub fn bram_bits_total(&self) -> u64 {
        self.bram_units * self.bram_unit_bits + self.extra_ram_bits
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("profile `{}`.{f}", self.name);
        if self.name.is_empty() {
            return Err(Error::config("profile.name", "must not be empty"));
        }
        if self.luts_total == 0 || self.dsps_total == 0 || self.bram_bits_total() == 0 {
            return Err(Error::config(field("capacity"), "all capacities must be > 0"));
        }
        if !(self.static_power_w >= 0.0 && self.dynamic_power_w_at_ref >= 0.0) {
            return Err(Error::config(field("power"), "power figures must be >= 0"));
        }
        if !(self.ref_clock_hz > 0.0 && self.max_clock_hz >= self.ref_clock_hz) {
            return Err(Error::config(
                field("ref_clock_hz"),
                "need 0 < ref_clock_hz <= max_clock_hz",
            ));
        }
        let m = &self.lut_model;
        if [m.base, m.per_layer_control, m.per_fabric_mac, m.per_requant_unit]
            .iter()
            .any(|c| !(c.is_finite() && *c >= 0.0))
        {
            return Err(Error::config(field("lut_model"), "coefficients must be >= 0"));
        }
        if !(self.bram_mapping_factor >= 1.0 && self.bram_mapping_factor.is_finite()) {
            return Err(Error::config(field("bram_mapping_factor"), "must be >= 1"));
        }
        let r = &self.reference_design;
        if r.widths.len() < 2 || r.widths.contains(&0) || r.parallelism == 0 {
            return Err(Error::config(field("reference_design"), "needs >= 2 widths >= 1 and parallelism >= 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: TargetProfile = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

/// Built-in profiles shipped in `profiles/`.
pub fn builtin_profiles() -> Vec<TargetProfile> {
    BUILTIN_PROFILES
        .iter()
        .map(|t| TargetProfile::from_json(t).expect("shipped profile is valid"))
        .collect()
}

/// Profiles from `dir` (every `*.json`) layered over the built-ins; a file
/// with the same name as a built-in replaces it.
pub fn load_profiles(dir: Option<&Path>) -> Result<Vec<TargetProfile>> {
    let mut profiles = builtin_profiles();
    let env_dir = std::env::var_os(PROFILE_DIR_ENV).map(PathBuf::from);
    let Some(dir) = dir.map(Path::to_path_buf).or(env_dir) else {
        return Ok(profiles);
    };
    let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let p = TargetProfile::from_json(&text).map_err(|e| Error::config(
            path.display().to_string(),
            e.to_string(),
        ))?;
        match profiles.iter_mut().find(|q| q.name == p.name) {
            Some(slot) => *slot = p,
            None => profiles.push(p),
        }
    }
    Ok(profiles)
}

pub fn find_profile<'a>(profiles: &'a [TargetProfile], name: &str) -> Result<&'a TargetProfile> {
    profiles
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownTarget(name.to_string()))
}

/// What the resource model needs to know about a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignShape {
    pub dims: Vec<(usize, usize)>,
    pub mac_units: usize,
}

impl DesignShape {
    pub fn of(qmlp: &QuantizedMlp, schedule: &Schedule) -> Self {
        DesignShape {
            dims: qmlp.layers.iter().map(|l| (l.n_in, l.n_out)).collect(),
            mac_units: match schedule.mode {
                Mode::Sequential => 1,
                Mode::Pipelined => schedule.parallelism,
            },
        }
    }

    pub fn rom_bits(&self) -> u64 {
        let weights: u64 = self.dims.iter().map(|&(i, o)| (i * o) as u64).sum();
        let biases: u64 = self.dims.iter().map(|&(_, o)| o as u64).sum();
        let max_width = self
            .dims
            .iter()
            .flat_map(|&(i, o)| [i, o])
            .max()
            .unwrap_or(0) as u64;
        8 * weights + 32 * biases + 8 * 2 * max_width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceEstimate {
    pub target: String,
    pub luts: f64,
    /// Raw memory bits before device mapping.
    pub rom_bits: u64,
    /// Block RAM bits after the profile's mapping factor.
    pub bram_bits: f64,
    pub dsps: u64,
    pub lut_percent: f64,
    pub bram_percent: f64,
    pub dsp_percent: f64,
}

impl ResourceEstimate {
    /// `luts + 100·dsps`.
    pub fn activity(&self) -> f64 {
        self.luts + DSP_ACTIVITY_WEIGHT * self.dsps as f64
    }
}

pub fn estimate_shape(shape: &DesignShape, target: &TargetProfile) -> ResourceEstimate {
    let units = if shape.dims.is_empty() { 0 } else { shape.mac_units as u64 };
    let dsps = units.min(target.dsps_total);
    let m = &target.lut_model;
    let luts = m.base
        + m.per_layer_control * shape.dims.len() as f64
        + m.per_fabric_mac * (units - dsps) as f64
        + m.per_requant_unit * units as f64;
    let rom_bits = shape.rom_bits();
    let bram_bits = rom_bits as f64 * target.bram_mapping_factor;
    ResourceEstimate {
        target: target.name.clone(),
        luts,
        rom_bits,
        bram_bits,
        dsps,
        lut_percent: 100.0 * luts / target.luts_total as f64,
        bram_percent: 100.0 * bram_bits / target.bram_bits_total() as f64,
        dsp_percent: 100.0 * dsps as f64 / target.dsps_total as f64,
    }
}

pub fn estimate_resources(
    qmlp: &QuantizedMlp,
    schedule: &Schedule,
    target: &TargetProfile,
) -> ResourceEstimate {
    estimate_shape(&DesignShape::of(qmlp, schedule), target)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub target: String,
    pub fits: bool,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn check_fit(estimate: &ResourceEstimate, target: &TargetProfile) -> FitReport {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    for (name, pct) in [
        ("LUT", estimate.lut_percent),
        ("BRAM", estimate.bram_percent),
        ("DSP", estimate.dsp_percent),
    ] {
        if pct > 100.0 {
            violations.push(format!("{name} utilization {pct:.2}% exceeds capacity"));
        } else if pct > WARNING_PERCENT {
            warnings.push(format!("{name} utilization {pct:.2}% above {WARNING_PERCENT}%"));
        }
    }
    FitReport {
        target: target.name.clone(),
        fits: violations.is_empty(),
        violations,
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub clock_hz: f64,
    pub latency_s: f64,
    pub static_power_w: f64,
    pub dynamic_power_w: f64,
    pub power_w: f64,
    pub static_energy_j: f64,
    pub energy_per_inference_j: f64,
}

pub fn estimate_energy(
    plan: &CyclePlan,
    clock_hz: f64,
    target: &TargetProfile,
    estimate: &ResourceEstimate,
) -> Result<EnergyEstimate> {
    if !(clock_hz > 0.0) || clock_hz > target.max_clock_hz {
        return Err(Error::Clock {
            target: target.name.clone(),
            clock_hz,
            max_hz: target.max_clock_hz,
        });
    }
    let reference = estimate_shape(&target.reference_design.shape(), target);
    let dynamic_power_w = target.dynamic_power_w_at_ref
        * (clock_hz / target.ref_clock_hz)
        * (estimate.activity() / reference.activity());
    let latency_s = plan.total_cycles as f64 / clock_hz;
    let power_w = target.static_power_w + dynamic_power_w;
    Ok(EnergyEstimate {
        clock_hz,
        latency_s,
        static_power_w: target.static_power_w,
        dynamic_power_w,
        power_w,
        static_energy_j: target.static_power_w * latency_s,
        energy_per_inference_j: power_w * latency_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetComparison {
    pub target: String,
    pub resources: ResourceEstimate,
    pub fit: FitReport,
    pub energy: EnergyEstimate,
    pub min_energy: bool,
}

/// Resources, fit and energy at each profile's reference clock. The feasible
/// target with the lowest energy per inference is flagged.
pub fn compare_targets(
    shape: &DesignShape,
    plan: &CyclePlan,
    targets: &[TargetProfile],
) -> Result<Vec<TargetComparison>> {
    let mut rows = targets
        .iter()
        .map(|t| {
            let resources = estimate_shape(shape, t);
            let fit = check_fit(&resources, t);
            let energy = estimate_energy(plan, t.ref_clock_hz, t, &resources)?;
            Ok(TargetComparison {
                target: t.name.clone(),
                resources,
                fit,
                energy,
                min_energy: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.fit.fits)
        .min_by(|(_, a), (_, b)| {
            a.energy
                .energy_per_inference_j
                .total_cmp(&b.energy.energy_per_inference_j)
        })
        .map(|(i, _)| i);
    if let Some(i) = best {
        rows[i].min_energy = true;
    }
    Ok(rows)
}

/// Solves the LUT base so `shape` reports `lut_percent` on `target`, keeping
/// the other LUT coefficients.
pub fn solve_lut_base(shape: &DesignShape, target: &TargetProfile, lut_percent: f64) -> f64 {
    let mut probe = target.clone();
    probe.lut_model.base = 0.0;
    let without_base = estimate_shape(shape, &probe).luts;
    lut_percent / 100.0 * target.luts_total as f64 - without_base
}

/// Solves the BRAM mapping factor so `shape` reports `bram_percent`.
pub fn solve_bram_mapping_factor(shape: &DesignShape, target: &TargetProfile, bram_percent: f64) -> f64 {
    bram_percent / 100.0 * target.bram_bits_total() as f64 / shape.rom_bits() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emu::plan_dims;

    fn xc() -> TargetProfile {
        find_profile(&builtin_profiles(), "xc7s15").unwrap().clone()
    }

    fn ice() -> TargetProfile {
        find_profile(&builtin_profiles(), "ice40up5k").unwrap().clone()
    }

    fn reference() -> DesignShape {
        DesignShape {
            dims: vec![(3, 16), (16, 16), (16, 1)],
            mac_units: 2,
        }
    }

    #[test]
    fn calibration_identity() {
        let e = estimate_shape(&reference(), &xc());
        assert!((e.lut_percent - 6.47).abs() < 1e-9, "{}", e.lut_percent);
        assert!((e.bram_percent - 7.5).abs() < 1e-9, "{}", e.bram_percent);
        assert_eq!(e.dsp_percent, 10.0);
        assert_eq!(e.rom_bits, 3872);
    }

    #[test]
    fn shipped_constants_are_the_solved_ones() {
        let t = xc();
        assert!((solve_lut_base(&reference(), &t, 6.47) - t.lut_model.base).abs() < 1e-9);
        assert!((solve_bram_mapping_factor(&reference(), &t, 7.5) - t.bram_mapping_factor).abs() < 1e-12);
    }

    #[test]
    fn zero_layer_model() {
        let shape = DesignShape { dims: vec![], mac_units: 2 };
        let e = estimate_shape(&shape, &xc());
        assert_eq!(e.luts, xc().lut_model.base);
        assert_eq!((e.rom_bits, e.dsps), (0, 0));
        assert_eq!(e.bram_bits, 0.0);
    }

    #[test]
    fn ice40_dsp_share_and_fit() {
        let e = estimate_shape(&reference(), &ice());
        assert_eq!(e.dsps, 2);
        assert_eq!(e.dsp_percent, 25.0);
        let fit = check_fit(&e, &ice());
        assert!(fit.fits && fit.violations.is_empty() && fit.warnings.is_empty());
    }

    #[test]
    fn huge_model_violates_bram() {
        let shape = DesignShape { dims: vec![(1000, 1000)], mac_units: 2 };
        let fit = check_fit(&estimate_shape(&shape, &ice()), &ice());
        assert!(!fit.fits);
        assert!(fit.violations.iter().any(|v| v.starts_with("BRAM")));
    }

    #[test]
    fn rom_bits_over_capacity_always_infeasible() {
        for t in builtin_profiles() {
            for n in [100usize, 200, 400, 800] {
                let shape = DesignShape { dims: vec![(n, n)], mac_units: 1 };
                let e = estimate_shape(&shape, &t);
                if e.rom_bits > t.bram_bits_total() {
                    assert!(!check_fit(&e, &t).fits);
                }
            }
        }
    }

    #[test]
    fn boundary_is_warning_not_violation() {
        let mut e = estimate_shape(&reference(), &xc());
        e.lut_percent = 100.0;
        let fit = check_fit(&e, &xc());
        assert!(fit.fits);
        assert_eq!(fit.warnings.len(), 1);
        e.lut_percent = 100.0 + 1e-9;
        assert!(!check_fit(&e, &xc()).fits);
    }

    #[test]
    fn energy_example() {
        let t = xc();
        let e = estimate_shape(&reference(), &t);
        let plan = CyclePlan {
            total_cycles: 1000,
            ..plan_dims(&[], &Schedule::default())
        };
        let en = estimate_energy(&plan, 100e6, &t, &e).unwrap();
        assert!((en.latency_s - 1e-5).abs() < 1e-18);
        assert!((en.energy_per_inference_j - 5e-7).abs() < 1e-18);
        let zero = CyclePlan { total_cycles: 0, ..plan.clone() };
        assert_eq!(estimate_energy(&zero, 100e6, &t, &e).unwrap().energy_per_inference_j, 0.0);
        assert!(matches!(estimate_energy(&plan, 300e6, &t, &e), Err(Error::Clock { .. })));
    }

    #[test]
    fn static_energy_ratio() {
        let plan = plan_dims(&reference().dims, &Schedule::pipelined(2, 24e6));
        let ex = estimate_energy(&plan, 24e6, &xc(), &estimate_shape(&reference(), &xc())).unwrap();
        let ei = estimate_energy(&plan, 24e6, &ice(), &estimate_shape(&reference(), &ice())).unwrap();
        assert!((ex.static_energy_j / ei.static_energy_j - 300.0).abs() < 1e-9);
    }

    #[test]
    fn energy_monotone_in_cycles() {
        let t = xc();
        let e = estimate_shape(&reference(), &t);
        let base = plan_dims(&reference().dims, &Schedule::sequential(1e8));
        let mut prev = -1.0;
        for cycles in (1..2000).step_by(37) {
            let p = CyclePlan { total_cycles: cycles, ..base.clone() };
            let en = estimate_energy(&p, 1e8, &t, &e).unwrap().energy_per_inference_j;
            assert!(en > prev);
            prev = en;
        }
    }

    #[test]
    fn comparison_flags_ice40() {
        let plan = plan_dims(&reference().dims, &Schedule::pipelined(2, 24e6));
        let rows = compare_targets(&reference(), &plan, &builtin_profiles()).unwrap();
        let flagged: Vec<_> = rows.iter().filter(|r| r.min_energy).map(|r| r.target.as_str()).collect();
        assert_eq!(flagged, vec!["ice40up5k"]);
        let one = compare_targets(&reference(), &plan, &[xc()]).unwrap();
        assert!(one[0].min_energy);
        let huge = DesignShape { dims: vec![(1000, 1000)], mac_units: 64 };
        let rows = compare_targets(&huge, &plan, &builtin_profiles()).unwrap();
        assert!(rows.iter().all(|r| !r.min_energy && !r.fit.violations.is_empty()));
    }

    #[test]
    fn profile_sanity() {
        assert_eq!(xc().static_power_w, 0.030);
        assert!(ice().static_power_w < 1e-3);
        assert_eq!(ice().bram_bits_total(), 30 * 4096 + 1024 * 1024);
        assert!(matches!(find_profile(&builtin_profiles(), "nope"), Err(Error::UnknownTarget(_))));
    }

    #[test]
    fn profile_dir_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let mut custom = ice();
        custom.name = "tiny".into();
        custom.luts_total = 100;
        fs::write(dir.path().join("tiny.json"), serde_json::to_string(&custom).unwrap()).unwrap();
        let all = load_profiles(Some(dir.path())).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(find_profile(&all, "tiny").unwrap().luts_total, 100);
        fs::write(dir.path().join("bad.json"), "{\"name\": 3}").unwrap();
        assert!(load_profiles(Some(dir.path())).is_err());
    }
}

//! Per-inference latency, power and energy on the two FPGA targets, coarse
//! resource utilization and battery-life arithmetic.
//!
//! A profile carries measured rows that are reproduced verbatim, plus
//! anchors from which an analytic estimator is fitted for everything else.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{mac_count, param_count, Arch, ModelConfig, DEFAULT_CLASSES, DEFAULT_C_IN, DEFAULT_N};

/// Environment variable naming a directory of extra `<name>.json` profiles.
pub const PROFILE_DIR_ENV: &str = "FOOTSTRIKE_PROFILE_DIR";

/// Utilization band (percentage points around 100%) in which an estimated
/// deployability verdict is reported as uncertain.
pub const UNCERTAINTY_PP: f64 = 15.0;

const BUILTIN: [(&str, &str); 2] = [
    ("xc7s15", include_str!("../../profiles/xc7s15.json")),
    ("ice40up5k", include_str!("../../profiles/ice40up5k.json")),
];

/// A model configuration as it appears in profile tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigKey {
    pub arch: Arch,
    pub size: usize,
    pub bitwidth: u32,
}

impl ConfigKey {
    pub fn of(cfg: &ModelConfig) -> Self {
        Self { arch: cfg.arch, size: cfg.size(), bitwidth: cfg.bitwidth }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig::with_size(self.arch, self.size, self.bitwidth)
    }

    /// Table rows describe models at the default input shape only.
    fn matches(&self, cfg: &ModelConfig) -> bool {
        *self == Self::of(cfg) && cfg.n == DEFAULT_N && cfg.c_in == DEFAULT_C_IN && cfg.classes == DEFAULT_CLASSES
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleAnchor {
    #[serde(flatten)]
    pub key: ConfigKey,
    pub cycles: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceAnchor {
    #[serde(flatten)]
    pub key: ConfigKey,
    #[serde(default)]
    pub lut_pct: Option<f64>,
    #[serde(default)]
    pub bram_pct: Option<f64>,
    #[serde(default)]
    pub dsp_pct: Option<f64>,
}

/// One row measured on hardware.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredRow {
    #[serde(flatten)]
    pub key: ConfigKey,
    pub lut_pct: f64,
    pub bram_pct: f64,
    pub dsp_pct: f64,
    pub energy_uj: f64,
    pub power_mw: f64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlatformProfile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub clock_hz: f64,
    pub lut_capacity: u32,
    pub dsp_capacity: u32,
    pub bram_capacity: u32,
    pub cycle_anchors: Vec<CycleAnchor>,
    #[serde(default)]
    pub resource_anchors: Vec<ResourceAnchor>,
    #[serde(default)]
    pub measured: Vec<MeasuredRow>,
}

impl PlatformProfile {
    pub fn from_json(s: &str) -> Result<Self> {
        let p: PlatformProfile = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(invalid(format!("profile {}: clock must be positive", self.name)));
        }
        if self.lut_capacity == 0 || self.dsp_capacity == 0 || self.bram_capacity == 0 {
            return Err(invalid(format!("profile {}: capacities must be positive", self.name)));
        }
        for arch in Arch::ALL {
            if !self.cycle_anchors.iter().any(|a| a.key.arch == arch) {
                return Err(invalid(format!("profile {}: no cycle anchor for {arch}", self.name)));
            }
        }
        for a in &self.cycle_anchors {
            a.key.config().validate()?;
        }
        Ok(())
    }

    pub fn builtin_names() -> Vec<&'static str> {
        BUILTIN.iter().map(|(n, _)| *n).collect()
    }

    pub fn builtin(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let (_, text) = BUILTIN
            .iter()
            .find(|(n, _)| *n == lower)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown platform `{name}`")))?;
        Self::from_json(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Serde(source) => Error::Json { path: path.to_path_buf(), source },
            other => other,
        })
    }

    /// A file path, then `<name>.json` in [`PROFILE_DIR_ENV`], then a
    /// built-in profile.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        let p = Path::new(name_or_path);
        if p.is_file() {
            return Self::load(p);
        }
        if let Some(dir) = std::env::var_os(PROFILE_DIR_ENV) {
            let candidate = PathBuf::from(dir).join(format!("{name_or_path}.json"));
            if candidate.is_file() {
                return Self::load(&candidate);
            }
        }
        Self::builtin(name_or_path)
    }

    pub fn measured_row(&self, cfg: &ModelConfig) -> Option<&MeasuredRow> {
        self.measured.iter().find(|r| r.key.matches(cfg))
    }
}

/// `mW * ms = uJ`.
pub fn energy(power_mw: f64, latency_ms: f64) -> f64 {
    power_mw * latency_ms
}

/// Milliseconds for `cycles` at `clock_hz`.
pub fn latency(cycles: u64, clock_hz: f64) -> f64 {
    // one rounding step, so round clocks give the decimal latency exactly
    (cycles as f64 * 1e3) / clock_hz
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostSource {
    Measured,
    Estimated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Deployable,
    Uncertain,
    NotDeployable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Deployable => "deployable",
            Verdict::Uncertain => "uncertain",
            Verdict::NotDeployable => "not deployable",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub platform: String,
    pub model: String,
    pub cycles: Option<u64>,
    pub latency_ms: f64,
    pub power_mw: f64,
    pub energy_uj: f64,
    pub lut_pct: f64,
    pub bram_pct: f64,
    pub dsp_pct: f64,
    pub deployable: bool,
    pub source: CostSource,
}

impl CostReport {
    pub fn utilizations(&self) -> [f64; 3] {
        [self.lut_pct, self.bram_pct, self.dsp_pct]
    }

    /// Measured rows are certain; estimates within [`UNCERTAINTY_PP`] of
    /// full utilization are not.
    pub fn verdict(&self) -> Verdict {
        let worst = self.utilizations().into_iter().fold(f64::NEG_INFINITY, f64::max);
        if self.source == CostSource::Estimated && (worst - 100.0).abs() <= UNCERTAINTY_PP {
            Verdict::Uncertain
        } else if self.deployable {
            Verdict::Deployable
        } else {
            Verdict::NotDeployable
        }
    }
}

pub fn check_deployable(report: &CostReport) -> bool {
    report.utilizations().iter().all(|&u| u <= 100.0)
}

/// Regression features `[1, params * b / 1e4, MACs / 1e4, one-hot(arch)]`.
fn features(cfg: &ModelConfig) -> Result<Vec<f64>> {
    let mut f = vec![1.0, (param_count(cfg)? as f64) * f64::from(cfg.bitwidth) / 1e4, mac_count(cfg)? as f64 / 1e4];
    f.extend(Arch::ALL.iter().map(|&a| if a == cfg.arch { 1.0 } else { 0.0 }));
    Ok(f)
}

const FEATURES: usize = 3 + Arch::ALL.len();

/// Minimum-norm least squares; interpolates when rows are independent.
fn min_norm_fit(rows: &[Vec<f64>], targets: &[f64]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Ok(vec![0.0; FEATURES]);
    }
    let a = DMatrix::from_fn(rows.len(), FEATURES, |i, j| rows[i][j]);
    let b = DVector::from_column_slice(targets);
    let pinv = a.pseudo_inverse(1e-12).map_err(|e| invalid(format!("resource regression failed: {e}")))?;
    Ok((pinv * b).iter().copied().collect())
}

/// Analytic estimator fitted from a profile's anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub profile: PlatformProfile,
    /// Cycles per MAC for each architecture.
    pub cycles_per_mac: BTreeMap<Arch, f64>,
    lut: Vec<f64>,
    bram: Vec<f64>,
    dsp: Vec<f64>,
    /// Power as `p0 + p1 * lut_pct`.
    pub power_coeffs: (f64, f64),
}

impl CostModel {
    pub fn new(profile: PlatformProfile) -> Result<Self> {
        profile.validate()?;
        let mut cycles_per_mac = BTreeMap::new();
        for arch in Arch::ALL {
            let (mut cycles, mut macs) = (0.0, 0.0);
            for a in profile.cycle_anchors.iter().filter(|a| a.key.arch == arch) {
                cycles += a.cycles as f64;
                macs += mac_count(&a.key.config())? as f64;
            }
            cycles_per_mac.insert(arch, cycles / macs);
        }

        let mut anchors: Vec<ResourceAnchor> = profile
            .measured
            .iter()
            .map(|r| ResourceAnchor {
                key: r.key,
                lut_pct: Some(r.lut_pct),
                bram_pct: Some(r.bram_pct),
                dsp_pct: Some(r.dsp_pct),
            })
            .collect();
        anchors.extend(profile.resource_anchors.iter().copied());
        let fit = |pick: fn(&ResourceAnchor) -> Option<f64>| -> Result<Vec<f64>> {
            let mut rows = Vec::new();
            let mut ys = Vec::new();
            for a in &anchors {
                if let Some(y) = pick(a) {
                    rows.push(features(&a.key.config())?);
                    ys.push(y);
                }
            }
            min_norm_fit(&rows, &ys)
        };
        let lut = fit(|a| a.lut_pct)?;
        let bram = fit(|a| a.bram_pct)?;
        let dsp = fit(|a| a.dsp_pct)?;
        let power_coeffs = fit_line(&profile.measured.iter().map(|r| (r.lut_pct, r.power_mw)).collect::<Vec<_>>());
        Ok(Self { profile, cycles_per_mac, lut, bram, dsp, power_coeffs })
    }

    pub fn cycles(&self, cfg: &ModelConfig) -> Result<u64> {
        let macs = mac_count(cfg)? as f64;
        Ok((macs * self.cycles_per_mac[&cfg.arch]).round() as u64)
    }

    /// Utilization percentages `(lut, bram, dsp)`; never negative, may
    /// exceed 100.
    pub fn estimate_resources(&self, cfg: &ModelConfig) -> Result<(f64, f64, f64)> {
        let f = features(cfg)?;
        let dot = |w: &[f64]| f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        Ok((dot(&self.lut), dot(&self.bram), dot(&self.dsp)))
    }

    pub fn estimate(&self, cfg: &ModelConfig) -> Result<CostReport> {
        let cycles = self.cycles(cfg)?;
        let latency_ms = latency(cycles, self.profile.clock_hz);
        let (lut_pct, bram_pct, dsp_pct) = self.estimate_resources(cfg)?;
        let power_mw = (self.power_coeffs.0 + self.power_coeffs.1 * lut_pct).max(0.0);
        let mut r = CostReport {
            platform: self.profile.name.clone(),
            model: cfg.label(),
            cycles: Some(cycles),
            latency_ms,
            power_mw,
            energy_uj: energy(power_mw, latency_ms),
            lut_pct,
            bram_pct,
            dsp_pct,
            deployable: false,
            source: CostSource::Estimated,
        };
        r.deployable = check_deployable(&r);
        Ok(r)
    }

    /// The measured row when the profile has one, otherwise the estimate.
    pub fn cost(&self, cfg: &ModelConfig) -> Result<CostReport> {
        cfg.validate()?;
        let Some(row) = self.profile.measured_row(cfg) else {
            return self.estimate(cfg);
        };
        let mut r = CostReport {
            platform: self.profile.name.clone(),
            model: cfg.label(),
            cycles: None,
            latency_ms: row.latency_ms,
            power_mw: row.power_mw,
            energy_uj: row.energy_uj,
            lut_pct: row.lut_pct,
            bram_pct: row.bram_pct,
            dsp_pct: row.dsp_pct,
            deployable: false,
            source: CostSource::Measured,
        };
        r.deployable = check_deployable(&r);
        Ok(r)
    }
}

/// Least-squares line through `(x, y)` points; a constant for one point.
fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    match points.len() {
        0 => (0.0, 0.0),
        1 => (points[0].1, 0.0),
        n => {
            let n = n as f64;
            let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
            let my = points.iter().map(|p| p.1).sum::<f64>() / n;
            let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
            let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            if sxx == 0.0 {
                (my, 0.0)
            } else {
                let slope = sxy / sxx;
                (my - slope * mx, slope)
            }
        }
    }
}

/// Days of operation on one battery charge.
///
/// `idle_mw` lists always-on loads; inference adds `rate_hz * energy_uj`
/// microwatts.
pub fn battery_life(idle_mw: &[f64], rate_hz: f64, energy_uj: f64, battery_mah: f64, volts: f64) -> Result<f64> {
    if !(battery_mah > 0.0 && volts > 0.0) {
        return Err(invalid("battery capacity and voltage must be positive"));
    }
    let total_mw = idle_mw.iter().sum::<f64>() + inference_power_mw(rate_hz, energy_uj);
    if !(total_mw > 0.0) {
        return Err(invalid("total power must be positive"));
    }
    let mwh = battery_mah * volts;
    Ok(mwh / total_mw / 24.0)
}

/// Average compute power in mW for `rate_hz` inferences of `energy_uj`.
pub fn inference_power_mw(rate_hz: f64, energy_uj: f64) -> f64 {
    rate_hz * energy_uj / 1e3
}

//! Experiment configuration files.
//!
//! A config is a TOML document whose keys carry their units. Every section
//! is optional; missing keys take the library defaults.
//!
//! ```toml
//! seed = 42
//! voltage_v = 30.0
//! charge_density_per_m3 = 2.33e22
//!
//! [sweep]
//! n_sweeps = 12000
//!
//! [[probes]]
//! position_m = { x = 0.0, y = 100e-9, z = 0.0 }
//!
//! [power_sweep]
//! powers_photons_per_s = [3e5, 3e6, 3e7, 3e8]
//! ```

use std::path::{Path, PathBuf};

use chargenoise::dynamics::{IlluminationConfig, JumpModel};
use chargenoise::model::{BiasField, MoleculeProbe, NanoguideGeometry};
use chargenoise::pipeline::{AnalysisSettings, Experiment, DEFAULT_DENSITY, DEFAULT_VOLTAGE};
use chargenoise::spectro::SweepConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSweepPlan {
    pub powers_photons_per_s: Vec<f64>,
}

impl Default for PowerSweepPlan {
    fn default() -> Self {
        Self {
            powers_photons_per_s: vec![3e5, 3e6, 3e7, 3e8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocusScanPlan {
    /// Focus centres relative to the first probe's axial position.
    pub offsets_m: Vec<f64>,
    pub fwhm_m: f64,
    pub aux_flux_photons_per_s: f64,
}

impl Default for FocusScanPlan {
    fn default() -> Self {
        Self {
            offsets_m: (-8..=8).map(|i| f64::from(i) * 0.25e-6).collect(),
            fwhm_m: 1e-6,
            aux_flux_photons_per_s: 6e7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoltageScanPlan {
    pub voltages_v: Vec<f64>,
    /// Sweeps recorded at each voltage.
    pub n_sweeps: usize,
}

impl Default for VoltageScanPlan {
    fn default() -> Self {
        Self {
            voltages_v: (-30..=30).map(f64::from).collect(),
            n_sweeps: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationPlan {
    pub densities_per_m3: Vec<f64>,
    pub replicates: usize,
}

impl Default for CalibrationPlan {
    fn default() -> Self {
        Self {
            densities_per_m3: vec![2.5e21, 7.9e21, 2.5e22, 7.9e22, 2.5e23],
            replicates: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationPlan {
    pub separations_m: Vec<f64>,
    /// Independent charge ensembles averaged per separation.
    pub realizations: usize,
}

impl Default for CorrelationPlan {
    fn default() -> Self {
        Self {
            separations_m: vec![26e-9, 80e-9, 2000e-9],
            realizations: 16,
        }
    }
}

/// The whole config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub voltage_v: f64,
    pub charge_density_per_m3: f64,
    pub ensemble_seed: Option<u64>,
    pub geometry: NanoguideGeometry,
    pub bias: BiasField,
    pub probes: Vec<MoleculeProbe>,
    pub illumination: IlluminationConfig,
    pub jump: JumpModel,
    pub sweep: SweepConfig,
    pub analysis: AnalysisSettings,
    pub power_sweep: PowerSweepPlan,
    pub focus_scan: FocusScanPlan,
    pub voltage_scan: VoltageScanPlan,
    pub calibration: CalibrationPlan,
    pub correlation: CorrelationPlan,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: None,
            voltage_v: DEFAULT_VOLTAGE,
            charge_density_per_m3: DEFAULT_DENSITY,
            ensemble_seed: None,
            geometry: NanoguideGeometry::default(),
            bias: BiasField::default(),
            probes: vec![MoleculeProbe::default()],
            illumination: IlluminationConfig::default(),
            jump: JumpModel::default(),
            sweep: SweepConfig::default(),
            analysis: AnalysisSettings::default(),
            power_sweep: PowerSweepPlan::default(),
            focus_scan: FocusScanPlan::default(),
            voltage_scan: VoltageScanPlan::default(),
            calibration: CalibrationPlan::default(),
            correlation: CorrelationPlan::default(),
        }
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the `[section]` header (or a top-level `key =`), if present.
fn line_of_section(text: &str, section: &str) -> Option<usize> {
    text.lines().position(|l| {
        let t = l.trim();
        t == format!("[{section}]")
            || t == format!("[[{section}]]")
            || t.strip_prefix(section).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

impl ExperimentConfig {
    pub fn experiment(&self) -> Experiment {
        Experiment {
            geometry: self.geometry.clone(),
            bias: self.bias.clone(),
            probes: self.probes.clone(),
            illumination: self.illumination.clone(),
            jump: self.jump.clone(),
            sweep: self.sweep.clone(),
            analysis: self.analysis.clone(),
            voltage: self.voltage_v,
            n_q: self.charge_density_per_m3,
            ensemble_seed: self.ensemble_seed,
        }
    }

    /// Parses and validates; `source` names the file in error messages.
    pub fn parse(text: &str, source: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of_offset(text, s.start)).unwrap_or(1);
            CliError::config(format!("{source}:{line}: {}", e.message()))
        })?;
        cfg.validate(text, source)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    fn validate(&self, text: &str, source: &str) -> Result<(), CliError> {
        let locate = |section: &str, msg: String| {
            let line = line_of_section(text, section).unwrap_or(1);
            CliError::config(format!("{source}:{line}: [{section}] {msg}"))
        };
        let checks: [(&str, chargenoise::Result<()>); 6] = [
            ("geometry", self.geometry.validate()),
            ("bias", self.bias.validate()),
            ("illumination", self.illumination.validate()),
            ("jump", self.jump.validate()),
            ("sweep", self.sweep.validate()),
            ("analysis", self.analysis.validate()),
        ];
        for (section, r) in checks {
            r.map_err(|e| locate(section, e.to_string()))?;
        }
        if self.probes.is_empty() {
            return Err(locate("probes", "at least one probe is required".into()));
        }
        for p in &self.probes {
            p.validate().map_err(|e| locate("probes", e.to_string()))?;
        }
        if !self.voltage_v.is_finite() {
            return Err(locate("voltage_v", "must be finite".into()));
        }
        if !(self.charge_density_per_m3 >= 0.0 && self.charge_density_per_m3.is_finite()) {
            return Err(locate("charge_density_per_m3", "must be finite and >= 0".into()));
        }
        if self.power_sweep.powers_photons_per_s.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(locate("power_sweep", "powers must be > 0".into()));
        }
        if self.focus_scan.offsets_m.iter().any(|x| !x.is_finite())
            || !(self.focus_scan.fwhm_m > 0.0)
            || !(self.focus_scan.aux_flux_photons_per_s > 0.0)
        {
            return Err(locate("focus_scan", "offsets must be finite, fwhm and flux > 0".into()));
        }
        if self.voltage_scan.voltages_v.iter().any(|v| !v.is_finite()) || self.voltage_scan.n_sweeps == 0 {
            return Err(locate("voltage_scan", "voltages must be finite and n_sweeps > 0".into()));
        }
        if self.correlation.realizations == 0 || self.correlation.separations_m.iter().any(|s| !(*s >= 0.0)) {
            return Err(locate("correlation", "need >= 1 realization and separations >= 0".into()));
        }
        Ok(())
    }

    /// Canonical JSON of the whole config, hashed into every artifact.
    pub fn hash(&self) -> String {
        chargenoise::pipeline::sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }
}

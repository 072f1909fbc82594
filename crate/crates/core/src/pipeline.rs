//! The end-to-end chain: sample charges, stream jump events, synthesize
//! sweeps, fit every sweep and reduce the traces to statistics.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{GillespieStream, IlluminationConfig, JumpModel};
use crate::error::{Error, Result};
use crate::fitters::{self, FitFlag, FitResult};
use crate::model::{sample_ensemble, BiasField, ChargeEnsemble, MoleculeProbe, NanoguideGeometry};
use crate::seeds::derive_seed;
use crate::spectro::{synthesize_campaign_with, Detection, FrequencyTrace, SweepConfig, SweepRecord};
use crate::stats::{self, CorrelationCurve, EtaCalibration};

/// Charge density used when none is configured, one charge per (35 nm)³.
pub const DEFAULT_DENSITY: f64 = 2.33e22;
pub const DEFAULT_VOLTAGE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSettings {
    /// Campaigns with a larger fraction of flagged sweeps count as degraded.
    pub max_flagged_fraction: f64,
    pub exclude_zero_lag: bool,
    /// The exponential is fitted out to this many times the first 1/e lag.
    pub tau_window_factor: f64,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self {
            max_flagged_fraction: 0.5,
            exclude_zero_lag: true,
            tau_window_factor: 5.0,
        }
    }
}

impl AnalysisSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.max_flagged_fraction) {
            return Err(Error::invalid("max_flagged_fraction must lie in [0, 1]"));
        }
        if !(self.tau_window_factor > 0.0 && self.tau_window_factor.is_finite()) {
            return Err(Error::invalid("tau_window_factor must be > 0"));
        }
        Ok(())
    }
}

/// Everything that determines a campaign apart from its master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub geometry: NanoguideGeometry,
    pub bias: BiasField,
    pub probes: Vec<MoleculeProbe>,
    pub illumination: IlluminationConfig,
    pub jump: JumpModel,
    pub sweep: SweepConfig,
    pub analysis: AnalysisSettings,
    #[serde(rename = "voltage_v")]
    pub voltage: f64,
    #[serde(rename = "charge_density_per_m3")]
    pub n_q: f64,
    /// Fixes the charge configuration independently of the master seed.
    pub ensemble_seed: Option<u64>,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            geometry: NanoguideGeometry::default(),
            bias: BiasField::default(),
            probes: vec![MoleculeProbe::default()],
            illumination: IlluminationConfig::default(),
            jump: JumpModel::default(),
            sweep: SweepConfig::default(),
            analysis: AnalysisSettings::default(),
            voltage: DEFAULT_VOLTAGE,
            n_q: DEFAULT_DENSITY,
            ensemble_seed: None,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Version tag of the step-histogram rules, folded into fingerprints.
const HISTOGRAM_RULES: &str = "steps:bin=0.4std,range=5std;eta:+1/+1";

impl Experiment {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.bias.validate()?;
        if self.probes.is_empty() {
            return Err(Error::invalid("at least one probe is required"));
        }
        for p in &self.probes {
            p.validate()?;
        }
        self.illumination.validate()?;
        self.jump.validate()?;
        self.sweep.validate()?;
        self.analysis.validate()?;
        if !self.voltage.is_finite() {
            return Err(Error::invalid("voltage must be finite"));
        }
        if !(self.n_q >= 0.0 && self.n_q.is_finite()) {
            return Err(Error::invalid(format!("charge density must be >= 0, got {}", self.n_q)));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("experiment serialises"))
    }

    /// Fingerprint of everything except the charge density and ensemble
    /// seed: the settings that must agree between a calibration and the
    /// data it is applied to.
    pub fn analysis_fingerprint(&self) -> String {
        let mut e = self.clone();
        e.n_q = 0.0;
        e.ensemble_seed = None;
        let mut bytes = serde_json::to_vec(&e).expect("experiment serialises");
        bytes.extend_from_slice(HISTOGRAM_RULES.as_bytes());
        sha256_hex(&bytes)
    }

    pub fn with_density(&self, n_q: f64) -> Self {
        Self { n_q, ..self.clone() }
    }
}

/// Child seeds of one campaign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CampaignSeeds {
    pub ensemble: u64,
    pub dynamics: u64,
    pub noise: u64,
}

impl CampaignSeeds {
    pub fn derive(exp: &Experiment, master: u64) -> Self {
        Self {
            ensemble: exp.ensemble_seed.unwrap_or_else(|| derive_seed(master, "ensemble", 0)),
            dynamics: derive_seed(master, "dynamics", 0),
            noise: derive_seed(master, "noise", 0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Campaign {
    pub ensemble: ChargeEnsemble,
    pub seeds: CampaignSeeds,
    pub duration: f64,
    /// One fitted trace per probe.
    pub traces: Vec<FrequencyTrace>,
}

/// Reduces a fit to the trace entry (f_c, its standard error, flag).
pub fn trace_entry(fit: &FitResult) -> (f64, f64, FitFlag) {
    (fit.get("f_c"), fit.std_err("f_c"), fit.flag)
}

/// Runs a campaign with `ensemble`, fitting each sweep as it is produced.
/// `on_record` sees every raw sweep before fitting.
pub fn run_with_ensemble(
    exp: &Experiment,
    ensemble: ChargeEnsemble,
    seeds: CampaignSeeds,
    mut on_record: impl FnMut(usize, usize, &SweepRecord) -> Result<()>,
) -> Result<Campaign> {
    exp.validate()?;
    let n_probes = exp.probes.len();
    let duration = exp.sweep.campaign_duration(n_probes);
    // a stream per probe; each replays the same seed and hence the same events
    let make_stream = || {
        GillespieStream::new(&ensemble, &exp.illumination, &exp.jump, duration, seeds.dynamics)
            .expect("validated above")
    };
    let mut traces: Vec<FrequencyTrace> = vec![FrequencyTrace::default(); n_probes];
    let detection = exp.sweep.detection;
    synthesize_campaign_with(
        &exp.probes,
        &ensemble,
        make_stream,
        duration,
        &exp.bias,
        exp.voltage,
        &exp.sweep,
        seeds.noise,
        |j, k, rec| {
            on_record(j, k, &rec)?;
            let fit = fitters::fit_lorentzian(&rec, detection)?;
            let (f, s, flag) = trace_entry(&fit);
            traces[j].push(rec.t_start, f, s, flag);
            Ok(())
        },
    )?;
    Ok(Campaign {
        ensemble,
        seeds,
        duration,
        traces,
    })
}

/// Samples the ensemble from the seeds and runs the campaign.
pub fn run_campaign(exp: &Experiment, master_seed: u64) -> Result<Campaign> {
    let seeds = CampaignSeeds::derive(exp, master_seed);
    let ensemble = sample_ensemble(exp.n_q, &exp.geometry, seeds.ensemble)?;
    run_with_ensemble(exp, ensemble, seeds, |_, _, _| Ok(()))
}

/// Fits the exponential decay of an autocorrelation curve on a window of
/// `tau_window_factor` times the first lag where the curve falls below
/// 1/e of its first non-zero lag.
pub fn fit_tau(curve: &CorrelationCurve, settings: &AnalysisSettings) -> Result<FitResult> {
    let (lags, values) = curve.non_negative_lags();
    if lags.len() < 6 {
        return Err(Error::InsufficientData("correlation curve too short for a decay fit".into()));
    }
    let reference = values[1];
    let first = values
        .iter()
        .skip(1)
        .position(|v| *v <= reference / std::f64::consts::E)
        .map(|i| i + 1);
    let end = match first {
        Some(i) => ((i as f64 * settings.tau_window_factor).ceil() as usize).clamp(6, lags.len()),
        None => lags.len(),
    };
    fitters::fit_exponential(&lags[..end], &values[..end], settings.exclude_zero_lag)
}

#[derive(Debug, Clone)]
pub struct TraceReport {
    pub n_sweeps: usize,
    pub flagged_fraction: f64,
    pub f_mean: f64,
    pub sigma_f: f64,
    pub autocorrelation: Option<CorrelationCurve>,
    pub tau: Option<FitResult>,
    pub histogram: Option<stats::StepHistogram>,
    pub non_gaussianity: Option<stats::NonGaussianity>,
}

impl TraceReport {
    pub fn degraded(&self, settings: &AnalysisSettings) -> bool {
        self.flagged_fraction > settings.max_flagged_fraction
    }

    pub fn tau_value(&self) -> Option<f64> {
        self.tau.as_ref().filter(|f| f.converged).map(|f| f.get("tau"))
    }

    pub fn eta(&self) -> Option<f64> {
        self.non_gaussianity.as_ref().map(|n| n.eta)
    }
}

/// Every statistic of a single trace. Robust moments are required; the
/// correlation, τ and η parts are left empty when the trace cannot
/// support them.
pub fn analyze_trace(trace: &FrequencyTrace, settings: &AnalysisSettings) -> Result<TraceReport> {
    let (f_mean, sigma_f) = stats::robust_center_rms(trace)?;
    let autocorrelation = stats::autocorrelation(trace).ok();
    let tau = autocorrelation.as_ref().and_then(|c| fit_tau(c, settings).ok());
    let histogram = stats::step_histogram(trace).ok();
    let non_gaussianity = histogram.as_ref().and_then(|h| stats::non_gaussianity(h).ok());
    Ok(TraceReport {
        n_sweeps: trace.len(),
        flagged_fraction: trace.flagged_fraction(),
        f_mean,
        sigma_f,
        autocorrelation,
        tau,
        histogram,
        non_gaussianity,
    })
}

/// η of the first probe's trace of a fresh campaign.
pub fn campaign_eta(exp: &Experiment, master_seed: u64) -> Result<f64> {
    let c = run_campaign(exp, master_seed)?;
    stats::trace_eta(&c.traces[0])
}

/// Seed of calibration replicate `r` at density `n_q`.
pub fn calibration_seed(master: u64, n_q: f64, replicate: usize) -> u64 {
    derive_seed(derive_seed(master, "calibration", n_q.to_bits()), "replicate", replicate as u64)
}

/// η(n_q) calibration for `exp`'s analysis chain; each replicate draws a
/// fresh ensemble.
pub fn calibrate(exp: &Experiment, grid: &[f64], replicates: usize, master_seed: u64) -> Result<EtaCalibration> {
    exp.validate()?;
    let base = Experiment {
        ensemble_seed: None,
        ..exp.clone()
    };
    stats::calibrate_eta(grid, replicates, &exp.analysis_fingerprint(), |n_q, r| {
        campaign_eta(&base.with_density(n_q), calibration_seed(master_seed, n_q, r))
    })
}

/// Photons per Hz of sweep at the detector, which sets the shot-noise floor.
pub fn photons_per_hz(sweep: &SweepConfig) -> f64 {
    sweep.detector_flux / sweep.sweep_rate
}

/// Shot-noise (Cramér-Rao) limit on the fitted centre of a single sweep.
pub fn fit_noise_floor(probe: &MoleculeProbe, sweep: &SweepConfig) -> f64 {
    match sweep.detection {
        Detection::Transmission => (2.0 * probe.linewidth
            / (std::f64::consts::PI * probe.extinction_depth.powi(2) * photons_per_hz(sweep)))
        .sqrt(),
        Detection::Fluorescence => f64::NAN,
    }
}

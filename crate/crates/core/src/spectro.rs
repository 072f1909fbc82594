//! Synthetic laser sweeps across a molecular resonance whose centre is
//! driven by the charge dynamics.
//!
//! A sweep covers `span` Hz centred on the molecule's expected resonance
//! (charges at their anchors) in `bins` equal dwell steps. The resonance is
//! re-evaluated at the midpoint time of every bin, so fast charge dynamics
//! can distort an individual sweep. Expected counts are
//! `detector_flux · dwell · signal(ν)`; the observed counts are Poisson.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::dynamics::{positions_at, EventTrace, JumpEvent};
use crate::error::{Error, Result};
use crate::fitters::FitFlag;
use crate::model::{
    resonance_for_field, single_field, superposed_field, BiasField, ChargeEnsemble, MoleculeProbe, Vec3,
};
use crate::seeds::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Detection {
    Transmission,
    Fluorescence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    Poisson,
    /// Counts equal their expectation exactly (the infinite-flux limit).
    Noiseless,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(rename = "span_hz")]
    pub span: f64,
    #[serde(rename = "sweep_rate_hz_per_s")]
    pub sweep_rate: f64,
    pub bins: usize,
    #[serde(rename = "repetition_rate_per_s")]
    pub repetition_rate: f64,
    pub detection: Detection,
    /// Detected photons per second far from resonance (transmission) or on
    /// resonance (fluorescence).
    #[serde(rename = "detector_flux_photons_per_s")]
    pub detector_flux: f64,
    pub n_sweeps: usize,
    #[serde(default = "default_noise")]
    pub noise: NoiseModel,
}

fn default_noise() -> NoiseModel {
    NoiseModel::Poisson
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            span: 1e9,
            sweep_rate: 1e10,
            bins: 100,
            repetition_rate: 10.0,
            detection: Detection::Transmission,
            // sets the shot-noise floor of the fitted centre near 4 MHz
            detector_flux: 1.2e6,
            n_sweeps: 12_000,
            noise: NoiseModel::Poisson,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("span", self.span),
            ("sweep_rate", self.sweep_rate),
            ("repetition_rate", self.repetition_rate),
            ("detector_flux", self.detector_flux),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("sweep {name} must be > 0, got {v}")));
            }
        }
        if self.bins == 0 {
            return Err(Error::invalid("sweep bins must be > 0"));
        }
        if self.span * self.repetition_rate > self.sweep_rate * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "a {} Hz sweep at {} Hz/s does not fit a {} /s repetition slot",
                self.span, self.sweep_rate, self.repetition_rate
            )));
        }
        Ok(())
    }

    pub fn sweep_duration(&self) -> f64 {
        self.span / self.sweep_rate
    }

    pub fn dwell(&self) -> f64 {
        self.sweep_duration() / self.bins as f64
    }

    pub fn bin_width(&self) -> f64 {
        self.span / self.bins as f64
    }

    /// Start of sweep `k` for probe `j` out of `n_probes` interleaved probes.
    pub fn sweep_start(&self, k: usize, j: usize, n_probes: usize) -> f64 {
        k as f64 / self.repetition_rate + j as f64 * self.probe_offset(n_probes)
    }

    pub fn probe_offset(&self, n_probes: usize) -> f64 {
        1.0 / (self.repetition_rate * n_probes.max(1) as f64)
    }

    /// Trace duration that accommodates every sweep of an `n_probes` campaign.
    pub fn campaign_duration(&self, n_probes: usize) -> f64 {
        let last = self.sweep_start(self.n_sweeps.saturating_sub(1), n_probes.saturating_sub(1), n_probes);
        (last + self.sweep_duration()).max(self.n_sweeps as f64 / self.repetition_rate)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub t_start: f64,
    pub freqs: Vec<f64>,
    /// Integer-valued under Poisson noise.
    pub counts: Vec<f64>,
}

impl SweepRecord {
    pub fn window_center(&self) -> f64 {
        0.5 * (self.freqs[0] + self.freqs[self.freqs.len() - 1])
    }

    pub fn span(&self) -> f64 {
        let n = self.freqs.len();
        if n < 2 {
            return 0.0;
        }
        (self.freqs[n - 1] - self.freqs[0]) * n as f64 / (n - 1) as f64
    }
}

/// Time series of fitted centre frequencies, one entry per sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrequencyTrace {
    pub times: Vec<f64>,
    pub f_c: Vec<f64>,
    pub sigma_fit: Vec<f64>,
    pub flags: Vec<FitFlag>,
}

impl FrequencyTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, f_c: f64, sigma_fit: f64, flag: FitFlag) {
        self.times.push(t);
        self.f_c.push(f_c);
        self.sigma_fit.push(sigma_fit);
        self.flags.push(flag);
    }

    /// Builds an all-good trace from raw samples.
    pub fn from_samples(times: Vec<f64>, f_c: Vec<f64>) -> Self {
        let n = times.len();
        Self {
            times,
            f_c,
            sigma_fit: vec![0.0; n],
            flags: vec![FitFlag::Good; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        if self.f_c.len() != n || self.sigma_fit.len() != n || self.flags.len() != n {
            return Err(Error::invalid("frequency trace columns differ in length"));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("frequency trace times must be strictly increasing"));
        }
        Ok(())
    }

    pub fn usable(&self, i: usize) -> bool {
        self.flags[i] == FitFlag::Good
    }

    pub fn usable_values(&self) -> Vec<f64> {
        (0..self.len()).filter(|&i| self.usable(i)).map(|i| self.f_c[i]).collect()
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (0..self.len()).filter(|&i| !self.usable(i)).count() as f64 / self.len() as f64
    }
}

/// Normalised Lorentzian (1 at `f_c`) folded into the detected signal.
pub fn lineshape(nu: f64, f_c: f64, gamma: f64, depth: f64, detection: Detection) -> f64 {
    let h2 = 0.25 * gamma * gamma;
    let dx = nu - f_c;
    let l = h2 / (dx * dx + h2);
    match detection {
        Detection::Transmission => 1.0 - depth * l,
        Detection::Fluorescence => l,
    }
}

/// Resonance with every charge at its anchor; centre of the sweep window.
pub fn expected_resonance(
    probe: &MoleculeProbe,
    ensemble: &ChargeEnsemble,
    bias: &BiasField,
    voltage: f64,
) -> Result<f64> {
    let e = crate::model::nanoguide_field(&ensemble.at_anchors(), probe.position)?;
    Ok(resonance_for_field(probe, bias, voltage, e))
}

/// Tracks the nanoguide field at one point while events stream past.
///
/// The field is rebuilt from all positions at the start of every sweep and
/// updated incrementally per event inside it, so a sweep depends only on the
/// positions at its start and the events within it.
struct FieldTracker<I: Iterator<Item = JumpEvent>> {
    events: std::iter::Peekable<I>,
    positions: Vec<Vec3>,
    charges: Vec<f64>,
    point: Vec3,
    epsilon_eff: f64,
    field: Vec3,
}

impl<I: Iterator<Item = JumpEvent>> FieldTracker<I> {
    fn new(ensemble: &ChargeEnsemble, positions: Vec<Vec3>, events: I, point: Vec3) -> Result<Self> {
        if let Some((i, _)) = positions
            .iter()
            .enumerate()
            .find(|(_, p)| (**p - point).norm() < crate::model::MIN_SEPARATION_M)
        {
            return Err(Error::DegenerateGeometry(format!("charge {i} sits on the probe")));
        }
        Ok(Self {
            events: events.peekable(),
            positions,
            charges: ensemble.charges.iter().map(|c| c.q).collect(),
            point,
            epsilon_eff: ensemble.geometry.epsilon_eff,
            field: Vec3::ZERO,
        })
    }

    fn skip_to(&mut self, t: f64) {
        while let Some(e) = self.events.next_if(|e| e.t <= t) {
            self.positions[e.charge] = e.position;
        }
    }

    fn rebuild(&mut self) {
        self.field = superposed_field(
            self.charges.iter().copied().zip(self.positions.iter().copied()),
            self.point,
            self.epsilon_eff,
        );
    }

    fn field_at(&mut self, t: f64) -> Vec3 {
        while let Some(e) = self.events.next_if(|e| e.t <= t) {
            let q = self.charges[e.charge];
            let old = self.positions[e.charge];
            self.field -= single_field(q, old, self.point, self.epsilon_eff);
            self.field += single_field(q, e.position, self.point, self.epsilon_eff);
            self.positions[e.charge] = e.position;
        }
        self.field
    }
}

struct SweepContext<'a> {
    probe: &'a MoleculeProbe,
    bias: &'a BiasField,
    voltage: f64,
    config: &'a SweepConfig,
    window_center: f64,
}

impl SweepContext<'_> {
    fn run<I: Iterator<Item = JumpEvent>>(
        &self,
        tracker: &mut FieldTracker<I>,
        t_start: f64,
        seed: u64,
    ) -> SweepRecord {
        let cfg = self.config;
        tracker.skip_to(t_start);
        tracker.rebuild();
        let dwell = cfg.dwell();
        let bin_width = cfg.bin_width();
        let f_lo = window_start(self.window_center, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut freqs = Vec::with_capacity(cfg.bins);
        let mut counts = Vec::with_capacity(cfg.bins);
        for b in 0..cfg.bins {
            let nu = bin_frequency(f_lo, bin_width, b);
            let t = t_start + (b as f64 + 0.5) * dwell;
            let e_ng = tracker.field_at(t);
            let f_c = resonance_for_field(self.probe, self.bias, self.voltage, e_ng);
            let signal = lineshape(nu, f_c, self.probe.linewidth, self.probe.extinction_depth, cfg.detection);
            let mean = cfg.detector_flux * dwell * signal;
            let c = match cfg.noise {
                NoiseModel::Noiseless => mean,
                NoiseModel::Poisson if mean > 0.0 => Poisson::new(mean)
                    .map(|p| p.sample(&mut rng))
                    .unwrap_or(mean.round()),
                NoiseModel::Poisson => 0.0,
            };
            freqs.push(nu);
            counts.push(c);
        }
        SweepRecord { t_start, freqs, counts }
    }
}

/// Centre frequency of bin `b` of a sweep starting at `f_lo`.
pub fn bin_frequency(f_lo: f64, bin_width: f64, b: usize) -> f64 {
    f_lo + (b as f64 + 0.5) * bin_width
}

/// Lower edge of a sweep window centred on `center`.
pub fn window_start(center: f64, config: &SweepConfig) -> f64 {
    center - 0.5 * config.span
}

/// Lower window edge of every probe in a campaign.
pub fn campaign_windows(
    probes: &[MoleculeProbe],
    ensemble: &ChargeEnsemble,
    bias: &BiasField,
    voltage: f64,
    config: &SweepConfig,
) -> Result<Vec<f64>> {
    probes
        .iter()
        .map(|p| Ok(window_start(expected_resonance(p, ensemble, bias, voltage)?, config)))
        .collect()
}

fn check_window(t_start: f64, config: &SweepConfig, duration: f64) -> Result<()> {
    let end = t_start + config.sweep_duration();
    if !(t_start >= 0.0) || end > duration * (1.0 + 1e-12) {
        return Err(Error::TimeOutOfRange { t: end, duration });
    }
    Ok(())
}

/// One sweep starting at `t_start`, with positions replayed from `trace`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_sweep(
    probe: &MoleculeProbe,
    ensemble: &ChargeEnsemble,
    trace: &EventTrace,
    bias: &BiasField,
    voltage: f64,
    config: &SweepConfig,
    t_start: f64,
    seed: u64,
) -> Result<SweepRecord> {
    config.validate()?;
    check_window(t_start, config, trace.duration)?;
    let positions = positions_at(ensemble, trace, t_start)?;
    let first = trace.first_after(t_start);
    let mut tracker = FieldTracker::new(
        ensemble,
        positions,
        trace.events[first..].iter().copied(),
        probe.position,
    )?;
    let ctx = SweepContext {
        probe,
        bias,
        voltage,
        config,
        window_center: expected_resonance(probe, ensemble, bias, voltage)?,
    };
    Ok(ctx.run(&mut tracker, t_start, seed))
}

/// Per-sweep noise seed for probe `j`, sweep `k` of a campaign.
pub fn sweep_seed(campaign_seed: u64, probe: usize, sweep: usize) -> u64 {
    derive_seed(derive_seed(campaign_seed, "probe", probe as u64), "sweep", sweep as u64)
}

/// Streams a campaign: for every probe, replays a fresh event stream from
/// `events()` and hands each sweep to `sink(probe, sweep_index, record)`
/// in time order.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_campaign_with<F, I, S>(
    probes: &[MoleculeProbe],
    ensemble: &ChargeEnsemble,
    events: F,
    duration: f64,
    bias: &BiasField,
    voltage: f64,
    config: &SweepConfig,
    seed: u64,
    mut sink: S,
) -> Result<()>
where
    F: Fn() -> I,
    I: Iterator<Item = JumpEvent>,
    S: FnMut(usize, usize, SweepRecord) -> Result<()>,
{
    config.validate()?;
    let n_probes = probes.len();
    if config.n_sweeps as f64 / config.repetition_rate > duration * (1.0 + 1e-12) {
        return Err(Error::invalid(format!(
            "{} sweeps at {} /s need {} s of trace, only {} s simulated",
            config.n_sweeps,
            config.repetition_rate,
            config.n_sweeps as f64 / config.repetition_rate,
            duration
        )));
    }
    if config.n_sweeps > 0 {
        let last = config.sweep_start(config.n_sweeps - 1, n_probes.saturating_sub(1), n_probes);
        check_window(last, config, duration)?;
    }
    for (j, probe) in probes.iter().enumerate() {
        probe.validate()?;
        let mut tracker = FieldTracker::new(ensemble, ensemble.anchors(), events(), probe.position)?;
        let ctx = SweepContext {
            probe,
            bias,
            voltage,
            config,
            window_center: expected_resonance(probe, ensemble, bias, voltage)?,
        };
        for k in 0..config.n_sweeps {
            let t0 = config.sweep_start(k, j, n_probes);
            sink(j, k, ctx.run(&mut tracker, t0, sweep_seed(seed, j, k)))?;
        }
    }
    Ok(())
}

/// All sweeps of a campaign over a stored trace, one list per probe.
pub fn synthesize_campaign(
    probes: &[MoleculeProbe],
    ensemble: &ChargeEnsemble,
    trace: &EventTrace,
    bias: &BiasField,
    voltage: f64,
    config: &SweepConfig,
    seed: u64,
) -> Result<Vec<Vec<SweepRecord>>> {
    if trace.n_charges != ensemble.len() {
        return Err(Error::invalid("trace and ensemble disagree on the number of charges"));
    }
    let mut out: Vec<Vec<SweepRecord>> = probes.iter().map(|_| Vec::with_capacity(config.n_sweeps)).collect();
    synthesize_campaign_with(
        probes,
        ensemble,
        || trace.events.iter().copied(),
        trace.duration,
        bias,
        voltage,
        config,
        seed,
        |j, _, rec| {
            out[j].push(rec);
            Ok(())
        },
    )?;
    Ok(out)
}

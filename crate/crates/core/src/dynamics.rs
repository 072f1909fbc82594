//! Kinetic Monte Carlo of photo-activated charge jumps.
//!
//! Each charge is activated at a rate proportional to the local photon flux.
//! On activation it is re-placed on the sphere of radius `d` around its fixed
//! anchor (anchored-sphere kernel), so the field process is stationary with
//! an amplitude set by `d` and a rate set by the illumination.
//!
//! Rates are evaluated once per charge at the anchor's axial position and
//! frozen; the direct Gillespie method then samples exponential waiting
//! times from the total rate and picks the jumping charge in proportion to
//! its rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Charge, ChargeEnsemble, Vec3};

/// Per-charge activation rate per unit flux that makes the anchored-sphere
/// field decorrelate in 1 s at a guided flux of 3·10⁷ photons/s.
///
/// For this kernel every jump draws an independent new displacement, so each
/// charge's contribution decorrelates as `exp(-r·Δt)` and the ensemble
/// correlation time is simply `1 / r`.
pub const DEFAULT_KAPPA: f64 = 1.0 / 3e7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxFocus {
    #[serde(rename = "center_x_m")]
    pub center_x: f64,
    #[serde(rename = "fwhm_m", default = "default_fwhm")]
    pub fwhm: f64,
    /// Peak flux of the auxiliary spot, expressed as equivalent guided flux.
    #[serde(rename = "flux_photons_per_s")]
    pub flux: f64,
}

fn default_fwhm() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlluminationConfig {
    #[serde(rename = "guided_flux_photons_per_s")]
    pub guided_flux: f64,
    #[serde(default)]
    pub aux_focus: Option<AuxFocus>,
    /// Activation rate per charge per unit flux (s⁻¹ per photons/s).
    #[serde(rename = "kappa_per_photon")]
    pub kappa: f64,
}

impl Default for IlluminationConfig {
    fn default() -> Self {
        Self {
            guided_flux: 3e7,
            aux_focus: None,
            kappa: DEFAULT_KAPPA,
        }
    }
}

impl IlluminationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.guided_flux >= 0.0 && self.guided_flux.is_finite()) {
            return Err(Error::invalid("guided flux must be >= 0"));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid("kappa must be >= 0"));
        }
        if let Some(aux) = &self.aux_focus {
            if !(aux.flux >= 0.0 && aux.flux.is_finite()) {
                return Err(Error::invalid("auxiliary flux must be >= 0"));
            }
            if !(aux.fwhm > 0.0 && aux.fwhm.is_finite()) {
                return Err(Error::invalid("auxiliary focus FWHM must be > 0"));
            }
            if !aux.center_x.is_finite() {
                return Err(Error::invalid("auxiliary focus center must be finite"));
            }
        }
        Ok(())
    }

    /// Same illumination with every flux multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.guided_flux *= factor;
        if let Some(aux) = &mut out.aux_focus {
            aux.flux *= factor;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JumpModel {
    #[serde(rename = "displacement_m")]
    pub displacement: f64,
}

impl Default for JumpModel {
    fn default() -> Self {
        Self { displacement: 20e-9 }
    }
}

impl JumpModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.displacement > 0.0 && self.displacement.is_finite()) {
            return Err(Error::invalid("jump displacement must be > 0"));
        }
        Ok(())
    }
}

/// Photon flux seen at axial position `x`.
pub fn local_flux(illum: &IlluminationConfig, x: f64) -> f64 {
    match &illum.aux_focus {
        None => illum.guided_flux,
        Some(aux) => {
            let u = (x - aux.center_x) / aux.fwhm;
            illum.guided_flux + aux.flux * (-4.0 * std::f64::consts::LN_2 * u * u).exp()
        }
    }
}

/// Activation rate of one charge, evaluated at its anchor.
pub fn jump_rate(charge: &Charge, illum: &IlluminationConfig) -> f64 {
    illum.kappa * local_flux(illum, charge.anchor.x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpEvent {
    pub t: f64,
    pub charge: usize,
    pub position: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventTrace {
    pub events: Vec<JumpEvent>,
    pub duration: f64,
    pub seed: u64,
    pub n_charges: usize,
    pub displacement: f64,
}

impl EventTrace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Index of the first event strictly after `t`.
    pub fn first_after(&self, t: f64) -> usize {
        self.events.partition_point(|e| e.t <= t)
    }
}

/// Lazily generated Gillespie event chain.
///
/// Yields exactly the events [`simulate`] would store, so long runs can be
/// consumed without holding the whole trace in memory.
pub struct GillespieStream {
    rng: ChaCha8Rng,
    cumulative: Vec<f64>,
    total: f64,
    anchors: Vec<Vec3>,
    displacement: f64,
    t: f64,
    duration: f64,
}

impl GillespieStream {
    pub fn new(
        ensemble: &ChargeEnsemble,
        illum: &IlluminationConfig,
        jump: &JumpModel,
        duration: f64,
        seed: u64,
    ) -> Result<Self> {
        illum.validate()?;
        jump.validate()?;
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(Error::invalid(format!("duration must be > 0, got {duration}")));
        }
        let mut acc = 0.0;
        let cumulative: Vec<f64> = ensemble
            .charges
            .iter()
            .map(|c| {
                acc += jump_rate(c, illum);
                acc
            })
            .collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            total: acc,
            cumulative,
            anchors: ensemble.anchors(),
            displacement: jump.displacement,
            t: 0.0,
            duration,
        })
    }

    pub fn total_rate(&self) -> f64 {
        self.total
    }

    fn random_direction(&mut self) -> Vec3 {
        loop {
            let v = Vec3::new(
                self.rng.sample(StandardNormal),
                self.rng.sample(StandardNormal),
                self.rng.sample(StandardNormal),
            );
            if let Some(u) = v.normalized() {
                return u;
            }
        }
    }
}

impl Iterator for GillespieStream {
    type Item = JumpEvent;

    fn next(&mut self) -> Option<JumpEvent> {
        if self.total <= 0.0 || self.t > self.duration {
            return None;
        }
        let wait: f64 = self.rng.sample(Exp1);
        self.t += wait / self.total;
        if self.t > self.duration {
            return None;
        }
        let u = self.rng.random::<f64>() * self.total;
        let charge = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1);
        let dir = self.random_direction();
        Some(JumpEvent {
            t: self.t,
            charge,
            position: self.anchors[charge] + dir * self.displacement,
        })
    }
}

pub fn simulate(
    ensemble: &ChargeEnsemble,
    illum: &IlluminationConfig,
    jump: &JumpModel,
    duration: f64,
    seed: u64,
) -> Result<EventTrace> {
    let events = GillespieStream::new(ensemble, illum, jump, duration, seed)?.collect();
    Ok(EventTrace {
        events,
        duration,
        seed,
        n_charges: ensemble.len(),
        displacement: jump.displacement,
    })
}

/// Replays a trace forward in time. Queries must be non-decreasing.
pub struct PositionCursor<'a> {
    events: &'a [JumpEvent],
    next: usize,
    t: f64,
    duration: f64,
    positions: Vec<Vec3>,
}

impl<'a> PositionCursor<'a> {
    pub fn new(ensemble: &ChargeEnsemble, trace: &'a EventTrace) -> Self {
        Self {
            events: &trace.events,
            next: 0,
            t: 0.0,
            duration: trace.duration,
            positions: ensemble.anchors(),
        }
    }

    pub fn advance_to(&mut self, t: f64) -> Result<&[Vec3]> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(Error::TimeOutOfRange {
                t,
                duration: self.duration,
            });
        }
        if t < self.t {
            return Err(Error::invalid(format!(
                "cursor queries must be monotone: {t} after {}",
                self.t
            )));
        }
        while let Some(e) = self.events.get(self.next).filter(|e| e.t <= t) {
            self.positions[e.charge] = e.position;
            self.next += 1;
        }
        self.t = t;
        Ok(&self.positions)
    }
}

/// Charge positions at time `t`, replaying the trace from the anchors.
pub fn positions_at(ensemble: &ChargeEnsemble, trace: &EventTrace, t: f64) -> Result<Vec<Vec3>> {
    if trace.n_charges != ensemble.len() {
        return Err(Error::invalid(format!(
            "trace was simulated for {} charges, ensemble has {}",
            trace.n_charges,
            ensemble.len()
        )));
    }
    let mut cursor = PositionCursor::new(ensemble, trace);
    Ok(cursor.advance_to(t)?.to_vec())
}

//! Point-charge electrostatics around the nanoguide and the quadratic Stark
//! map from the total local field to a molecular frequency shift.
//!
//! Coordinates: the guide axis is `x`; the cross-section spans `y` (width)
//! and `z` (height), centred on the origin. All quantities are SI.

use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// Separations below this are treated as coincident points.
pub const MIN_SEPARATION_M: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Unit vector along `self`, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Simulated segment of the nanoguide.
///
/// The segment is a box `[center_x ± L/2] × [±width/2] × [±height/2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NanoguideGeometry {
    #[serde(rename = "width_m")]
    pub width: f64,
    #[serde(rename = "height_m")]
    pub height: f64,
    #[serde(rename = "segment_length_m")]
    pub segment_length: f64,
    #[serde(rename = "segment_center_x_m", default)]
    pub segment_center_x: f64,
    /// Scalar relative permittivity screening every Coulomb field.
    pub epsilon_eff: f64,
}

impl Default for NanoguideGeometry {
    fn default() -> Self {
        Self {
            width: 100e-9,
            height: 160e-9,
            segment_length: 2e-6,
            segment_center_x: 0.0,
            epsilon_eff: 3.6,
        }
    }
}

impl NanoguideGeometry {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width", self.width),
            ("height", self.height),
            ("segment_length", self.segment_length),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("geometry {name} must be > 0, got {v}")));
            }
        }
        if !self.segment_center_x.is_finite() {
            return Err(Error::invalid("geometry segment_center_x must be finite"));
        }
        if !(self.epsilon_eff >= 1.0 && self.epsilon_eff.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon_eff must be >= 1, got {}",
                self.epsilon_eff
            )));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.width * self.height * self.segment_length
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (p.x - self.segment_center_x).abs() <= 0.5 * self.segment_length
            && p.y.abs() <= 0.5 * self.width
            && p.z.abs() <= 0.5 * self.height
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Charge {
    pub anchor: Vec3,
    pub position: Vec3,
    /// Signed charge in units of the elementary charge.
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChargeEnsemble {
    pub charges: Vec<Charge>,
    /// Density in m⁻³.
    pub n_q: f64,
    pub geometry: NanoguideGeometry,
    pub seed: u64,
}

impl ChargeEnsemble {
    pub fn len(&self) -> usize {
        self.charges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charges.is_empty()
    }

    pub fn anchors(&self) -> Vec<Vec3> {
        self.charges.iter().map(|c| c.anchor).collect()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.charges.iter().map(|c| c.position).collect()
    }

    /// Charges at their anchors, i.e. the mean configuration of the
    /// anchored-sphere process.
    pub fn at_anchors(&self) -> ChargeEnsemble {
        let mut e = self.clone();
        for c in &mut e.charges {
            c.position = c.anchor;
        }
        e
    }
}

/// Static fields at the molecule other than the nanoguide's: residual
/// crystal field plus the linear electrode response `g·V·û`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasField {
    #[serde(rename = "e_cr_v_per_m")]
    pub e_cr: Vec3,
    #[serde(rename = "gain_v_per_m_per_v")]
    pub gain: f64,
    pub direction: Vec3,
}

impl Default for BiasField {
    fn default() -> Self {
        Self {
            e_cr: Vec3::ZERO,
            gain: 1e5,
            direction: Vec3::new(0.0, 0.0, 1.0),
        }
    }
}

impl BiasField {
    /// Builds a bias field, normalising `direction`.
    pub fn new(e_cr: Vec3, gain: f64, direction: Vec3) -> Result<Self> {
        let direction = direction
            .normalized()
            .ok_or_else(|| Error::invalid("electrode field direction must be non-zero"))?;
        let b = Self {
            e_cr,
            gain,
            direction,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain >= 0.0 && self.gain.is_finite()) {
            return Err(Error::invalid(format!("electrode gain must be >= 0, got {}", self.gain)));
        }
        if !self.e_cr.is_finite() {
            return Err(Error::invalid("crystal field must be finite"));
        }
        if (self.direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("electrode field direction must be a unit vector"));
        }
        Ok(())
    }

    /// Voltage at which `|E_cr + g·V·û|` is minimal.
    pub fn vertex_voltage(&self, extra_static_field: Vec3) -> Option<f64> {
        (self.gain > 0.0).then(|| -self.direction.dot(self.e_cr + extra_static_field) / self.gain)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoleculeProbe {
    #[serde(rename = "position_m")]
    pub position: Vec3,
    #[serde(rename = "f0_hz")]
    pub f0: f64,
    /// Quadratic Stark coefficient, Hz per (V/m)².
    #[serde(rename = "stark_coefficient_hz_per_v2_m2")]
    pub stark_coefficient: f64,
    #[serde(rename = "linewidth_hz")]
    pub linewidth: f64,
    pub extinction_depth: f64,
}

impl Default for MoleculeProbe {
    fn default() -> Self {
        Self {
            position: Vec3::new(0.0, 100e-9, 0.0),
            f0: 402e12,
            // 50 MHz/V tunability at 30 V with g = 1e5 (V/m)/V.
            stark_coefficient: 5e7 / (2.0 * 1e5 * 1e5 * 30.0),
            linewidth: 30e6,
            extinction_depth: 0.13,
        }
    }
}

impl MoleculeProbe {
    pub fn validate(&self) -> Result<()> {
        if !self.position.is_finite() || !self.f0.is_finite() {
            return Err(Error::invalid("probe position and f0 must be finite"));
        }
        if !(self.linewidth > 0.0 && self.linewidth.is_finite()) {
            return Err(Error::invalid(format!("linewidth must be > 0, got {}", self.linewidth)));
        }
        if !(0.0..=1.0).contains(&self.extinction_depth) {
            return Err(Error::invalid(format!(
                "extinction depth must lie in [0, 1], got {}",
                self.extinction_depth
            )));
        }
        if !(self.stark_coefficient > 0.0 && self.stark_coefficient.is_finite()) {
            return Err(Error::invalid("Stark coefficient must be > 0"));
        }
        Ok(())
    }
}

/// `1 / (4π ε0 ε_eff)` times the elementary charge, in V·m.
fn coulomb_prefactor(epsilon_eff: f64) -> f64 {
    ELEMENTARY_CHARGE / (4.0 * std::f64::consts::PI * VACUUM_PERMITTIVITY * epsilon_eff)
}

/// Field at `point` of a charge `q` (elementary charges) sitting at `source`.
pub fn coulomb_field(q: f64, source: Vec3, point: Vec3, epsilon_eff: f64) -> Result<Vec3> {
    if !(epsilon_eff >= 1.0) {
        return Err(Error::invalid(format!("epsilon_eff must be >= 1, got {epsilon_eff}")));
    }
    let r = point - source;
    let r2 = r.norm_squared();
    if r2.sqrt() < MIN_SEPARATION_M {
        return Err(Error::DegenerateGeometry(format!(
            "field point coincides with charge at ({:e}, {:e}, {:e})",
            source.x, source.y, source.z
        )));
    }
    Ok(coulomb_field_unchecked(q, r, r2, coulomb_prefactor(epsilon_eff)))
}

#[inline]
fn coulomb_field_unchecked(q: f64, r: Vec3, r2: f64, prefactor: f64) -> Vec3 {
    r * (q * prefactor / (r2 * r2.sqrt()))
}

/// Field at `point` from charges at `positions`, skipping the argument checks
/// of [`coulomb_field`]. Coincident points give non-finite output.
pub(crate) fn superposed_field(
    charges: impl IntoIterator<Item = (f64, Vec3)>,
    point: Vec3,
    epsilon_eff: f64,
) -> Vec3 {
    let k = coulomb_prefactor(epsilon_eff);
    let mut e = Vec3::ZERO;
    for (q, pos) in charges {
        let r = point - pos;
        e += coulomb_field_unchecked(q, r, r.norm_squared(), k);
    }
    e
}

/// Single-charge contribution for incremental field updates.
#[inline]
pub(crate) fn single_field(q: f64, source: Vec3, point: Vec3, epsilon_eff: f64) -> Vec3 {
    let r = point - source;
    coulomb_field_unchecked(q, r, r.norm_squared(), coulomb_prefactor(epsilon_eff))
}

/// Superposition of the Coulomb fields of every charge at its current position.
pub fn nanoguide_field(ensemble: &ChargeEnsemble, point: Vec3) -> Result<Vec3> {
    let eps = ensemble.geometry.epsilon_eff;
    let mut e = Vec3::ZERO;
    for c in &ensemble.charges {
        e += coulomb_field(c.q, c.position, point, eps)?;
    }
    Ok(e)
}

pub fn electrode_field(bias: &BiasField, voltage: f64) -> Vec3 {
    bias.direction * (bias.gain * voltage)
}

/// Quadratic Stark shift `-A·|E|²` (red shift for growing field).
pub fn stark_shift(e_total: Vec3, stark_coefficient: f64) -> f64 {
    -stark_coefficient * e_total.norm_squared()
}

/// Resonance for a given nanoguide field, without touching the ensemble.
pub fn resonance_for_field(probe: &MoleculeProbe, bias: &BiasField, voltage: f64, e_ng: Vec3) -> f64 {
    let e_total = bias.e_cr + electrode_field(bias, voltage) + e_ng;
    probe.f0 + stark_shift(e_total, probe.stark_coefficient)
}

pub fn resonance_frequency(
    probe: &MoleculeProbe,
    ensemble: &ChargeEnsemble,
    bias: &BiasField,
    voltage: f64,
) -> Result<f64> {
    let e_ng = nanoguide_field(ensemble, probe.position)?;
    Ok(resonance_for_field(probe, bias, voltage, e_ng))
}

/// `∂f/∂V` at fixed nanoguide field `mean_e_ng`.
pub fn analytic_tunability(probe: &MoleculeProbe, bias: &BiasField, voltage: f64, mean_e_ng: Vec3) -> f64 {
    let e_total = bias.e_cr + electrode_field(bias, voltage) + mean_e_ng;
    -2.0 * probe.stark_coefficient * bias.gain * bias.direction.dot(e_total)
}

/// Draws `round(n_q · volume)` charges with uniform anchors in the segment
/// and random sign. Charges start at their anchors.
pub fn sample_ensemble(n_q: f64, geometry: &NanoguideGeometry, seed: u64) -> Result<ChargeEnsemble> {
    geometry.validate()?;
    if !(n_q >= 0.0 && n_q.is_finite()) {
        return Err(Error::invalid(format!("charge density must be >= 0, got {n_q}")));
    }
    let count = (n_q * geometry.volume()).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = Vec3::new(
        0.5 * geometry.segment_length,
        0.5 * geometry.width,
        0.5 * geometry.height,
    );
    let charges = (0..count)
        .map(|_| {
            let anchor = Vec3::new(
                geometry.segment_center_x + rng.random_range(-half.x..half.x),
                rng.random_range(-half.y..half.y),
                rng.random_range(-half.z..half.z),
            );
            let q = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Charge {
                anchor,
                position: anchor,
                q,
            }
        })
        .collect();
    Ok(ChargeEnsemble {
        charges,
        n_q,
        geometry: geometry.clone(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    fn ensemble_of(charges: &[(f64, Vec3)]) -> ChargeEnsemble {
        ChargeEnsemble {
            charges: charges
                .iter()
                .map(|&(q, p)| Charge {
                    anchor: p,
                    position: p,
                    q,
                })
                .collect(),
            n_q: 0.0,
            geometry: NanoguideGeometry::default(),
            seed: 0,
        }
    }

    #[test]
    fn electron_at_100nm_gives_40_kv_per_m() {
        let e = coulomb_field(-1.0, Vec3::ZERO, Vec3::new(100e-9, 0.0, 0.0), 3.6).unwrap();
        assert!(rel(e.norm(), 4.0e4) < 0.01, "{}", e.norm());
        // an electron's field points towards it
        assert!(e.x < 0.0);
    }

    #[test]
    fn electron_at_50nm() {
        let e = coulomb_field(-1.0, Vec3::ZERO, Vec3::new(0.0, 50e-9, 0.0), 3.6).unwrap();
        // 1.602e-19 / (4π · 8.854e-12 · 3.6 · 2.5e-15)
        let expected = 1.602_176_634e-19
            / (4.0 * std::f64::consts::PI * 8.854_187_812_8e-12 * 3.6 * (50e-9f64).powi(2));
        assert!(rel(e.norm(), expected) < 1e-12);
        assert!(rel(e.norm(), 1.6e5) < 0.01);
    }

    #[test]
    fn zero_charge_gives_zero_field() {
        let e = coulomb_field(0.0, Vec3::ZERO, Vec3::new(1e-7, 0.0, 0.0), 3.6).unwrap();
        assert_eq!(e, Vec3::ZERO);
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let p = Vec3::new(1e-7, 2e-7, 0.0);
        assert!(matches!(
            coulomb_field(1.0, p, p, 3.6),
            Err(Error::DegenerateGeometry(_))
        ));
        let ens = ensemble_of(&[(1.0, p)]);
        assert!(nanoguide_field(&ens, p).is_err());
    }

    #[test]
    fn coulomb_scaling_is_inverse_square() {
        let e1 = coulomb_field(1.0, Vec3::ZERO, Vec3::new(0.0, 0.0, 64e-9), 3.6).unwrap();
        let e2 = coulomb_field(1.0, Vec3::ZERO, Vec3::new(0.0, 0.0, 128e-9), 3.6).unwrap();
        // power-of-two distances make the quarter exact
        assert_eq!(e2.norm() * 4.0, e1.norm());
    }

    #[test]
    fn empty_ensemble_has_no_field() {
        let ens = ensemble_of(&[]);
        assert_eq!(nanoguide_field(&ens, Vec3::new(0.0, 1e-7, 0.0)).unwrap(), Vec3::ZERO);
    }

    #[test]
    fn mirror_pair_cancels_along_axis() {
        let p = Vec3::new(0.0, 100e-9, 0.0);
        let off = Vec3::new(30e-9, 0.0, 0.0);
        let ens = ensemble_of(&[(1.0, p + off), (1.0, p - off)]);
        let e = nanoguide_field(&ens, p).unwrap();
        assert!(e.x.abs() < 1e-9, "{}", e.x);
    }

    #[test]
    fn fifty_charges_match_brute_force_sum() {
        let ens = sample_ensemble(2.5e22, &NanoguideGeometry {
            segment_length: 125e-9,
            ..Default::default()
        }, 7)
        .unwrap();
        assert_eq!(ens.len(), 50);
        let point = Vec3::new(10e-9, 100e-9, 5e-9);
        let mut brute = Vec3::ZERO;
        for c in &ens.charges {
            brute = brute + coulomb_field(c.q, c.position, point, 3.6).unwrap();
        }
        let e = nanoguide_field(&ens, point).unwrap();
        assert!((e - brute).norm() <= 1e-12 * brute.norm().max(1.0));
    }

    #[test]
    fn electrode_field_is_linear() {
        let b = BiasField::new(Vec3::ZERO, 1e4, Vec3::new(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(electrode_field(&b, 0.0), Vec3::ZERO);
        assert_eq!(electrode_field(&b, 10.0), Vec3::new(0.0, 1e5, 0.0));
        assert_eq!(electrode_field(&b, -10.0), -electrode_field(&b, 10.0));
    }

    #[test]
    fn bias_validation() {
        assert!(BiasField::new(Vec3::ZERO, 1.0, Vec3::ZERO).is_err());
        assert!(BiasField::new(Vec3::ZERO, -1.0, Vec3::new(1.0, 0.0, 0.0)).is_err());
        let b = BiasField::new(Vec3::ZERO, 1.0, Vec3::new(3.0, 4.0, 0.0)).unwrap();
        assert!((b.direction.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn stark_shift_basics() {
        assert_eq!(stark_shift(Vec3::ZERO, 1e-3), 0.0);
        let a = stark_shift(Vec3::new(3e5, 4e5, 0.0), 1e-4);
        let b = stark_shift(Vec3::new(0.0, 0.0, 5e5), 1e-4);
        assert!(rel(a, b) < 1e-15);
        assert!(a < 0.0);
    }

    #[test]
    fn cross_term_amplifies_small_fluctuation() {
        // exact |E0 + δE|² − |E0|² = 2 E0·δE + |δE|²; the first-order term
        // dominates once |δE| ≪ |E0|.
        let a = 8e-5;
        let e0 = Vec3::new(0.0, 0.0, 1e6);
        for de in [1e2, 1e3, 4e3] {
            let d = Vec3::new(0.0, 0.0, de);
            let exact = stark_shift(e0 + d, a) - stark_shift(e0, a);
            let linear = -2.0 * a * e0.norm() * de;
            assert!(rel(exact, linear) <= 1.01 * de / (2.0 * e0.norm()), "{exact} {linear}");
        }
    }

    #[test]
    fn resonance_without_charges() {
        let probe = MoleculeProbe {
            f0: 0.0,
            ..MoleculeProbe::default()
        };
        let ens = ensemble_of(&[]);
        let bias = BiasField::new(Vec3::ZERO, 1e5, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(resonance_frequency(&probe, &ens, &bias, 0.0).unwrap(), probe.f0);
        // pure quadratic: shift(2V) = 4 shift(V), exact with power-of-two V
        let s1 = resonance_frequency(&probe, &ens, &bias, 4.0).unwrap() - probe.f0;
        let s2 = resonance_frequency(&probe, &ens, &bias, 8.0).unwrap() - probe.f0;
        assert!(rel(s2, 4.0 * s1) < 1e-9);
    }

    #[test]
    fn crystal_field_moves_vertex() {
        let probe = MoleculeProbe::default();
        let ens = ensemble_of(&[]);
        let e_cr = Vec3::new(1e5, 5e4, -2.5e6);
        let bias = BiasField::new(e_cr, 1e5, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let v_star = bias.vertex_voltage(Vec3::ZERO).unwrap();
        assert!((v_star - 25.0).abs() < 1e-12);
        // dense scan: the smallest |shift| sits at the analytic vertex
        let (best_v, _) = (0..=6000)
            .map(|i| -30.0 + i as f64 * 0.01)
            .map(|v| (v, (resonance_frequency(&probe, &ens, &bias, v).unwrap() - probe.f0).abs()))
            .fold((f64::NAN, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        assert!((best_v - v_star).abs() <= 0.01 + 1e-9, "{best_v}");
        assert!(analytic_tunability(&probe, &bias, v_star, Vec3::ZERO).abs() < 1e-6);
    }

    #[test]
    fn tunability_is_linear_in_voltage() {
        let probe = MoleculeProbe::default();
        let bias = BiasField::default();
        let slope = |v: f64| {
            analytic_tunability(&probe, &bias, v + 1.0, Vec3::ZERO) - analytic_tunability(&probe, &bias, v, Vec3::ZERO)
        };
        let expected = -2.0 * probe.stark_coefficient * bias.gain * bias.gain;
        for v in [-20.0, 0.0, 13.0] {
            assert!(rel(slope(v), expected) < 1e-9);
        }
        // default calibration: 50 MHz/V at 30 V
        assert!(rel(analytic_tunability(&probe, &bias, 30.0, Vec3::ZERO).abs(), 5e7) < 1e-12);
    }

    #[test]
    fn sample_ensemble_counts() {
        let g = NanoguideGeometry {
            segment_length: 125e-9,
            ..Default::default()
        };
        assert!((g.volume() - 2e-21).abs() < 1e-33);
        assert_eq!(sample_ensemble(2.5e22, &g, 1).unwrap().len(), 50);
        assert!(sample_ensemble(0.0, &g, 1).unwrap().is_empty());
        assert!(sample_ensemble(-1.0, &g, 1).is_err());
        // one charge per (35 nm)³
        let n_q = 1.0 / (35e-9f64).powi(3);
        assert!(rel(n_q, 2.33e22) < 0.01);
        assert!(rel(n_q, 2.5e22) < 0.08);
    }

    #[test]
    fn sample_ensemble_is_seeded_and_inside() {
        let g = NanoguideGeometry::default();
        let a = sample_ensemble(2.5e22, &g, 42).unwrap();
        let b = sample_ensemble(2.5e22, &g, 42).unwrap();
        let c = sample_ensemble(2.5e22, &g, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.anchors(), c.anchors());
        assert!(a.charges.iter().all(|ch| g.contains(ch.anchor) && ch.position == ch.anchor));
        assert!(a.charges.iter().all(|ch| ch.q == 1.0 || ch.q == -1.0));
    }

    #[test]
    fn anchors_are_uniform_over_octants() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let g = NanoguideGeometry::default();
        // 1e4 charges
        let n_q = 1e4 / g.volume();
        let ens = sample_ensemble(n_q, &g, 2024).unwrap();
        assert_eq!(ens.len(), 10_000);
        let mut counts = [0usize; 8];
        for c in &ens.charges {
            let i = (c.anchor.x > 0.0) as usize | ((c.anchor.y > 0.0) as usize) << 1 | ((c.anchor.z > 0.0) as usize) << 2;
            counts[i] += 1;
        }
        let expected = ens.len() as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(7.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
        let charge_sum: f64 = ens.charges.iter().map(|c| c.q).sum();
        assert!(charge_sum.abs() < 4.0 * (ens.len() as f64).sqrt());
    }

    proptest! {
        #[test]
        fn superposition_over_disjoint_ensembles(seed_a in 0u64..1000, seed_b in 1000u64..2000) {
            let g = NanoguideGeometry { segment_length: 300e-9, ..Default::default() };
            let a = sample_ensemble(2.5e22, &g, seed_a).unwrap();
            let b = sample_ensemble(2.5e22, &g, seed_b).unwrap();
            let mut union = a.clone();
            union.charges.extend(b.charges.iter().copied());
            let p = Vec3::new(0.0, 100e-9, 0.0);
            let sum = nanoguide_field(&a, p).unwrap() + nanoguide_field(&b, p).unwrap();
            let u = nanoguide_field(&union, p).unwrap();
            prop_assert!((u - sum).norm() <= 1e-12 * (1.0 + u.norm()));
        }

        #[test]
        fn tunability_matches_central_differences(
            v in 2.0f64..30.0,
            sign in prop::bool::ANY,
            ecr in -5e5f64..5e5,
            eng in -2e5f64..2e5,
        ) {
            // f0 = 0 keeps the 1 mV difference quotient above f64 resolution;
            // f0 only adds a constant.
            let probe = MoleculeProbe { f0: 0.0, ..Default::default() };
            let bias = BiasField::new(Vec3::new(ecr, 0.0, ecr), 1e5, Vec3::new(0.0, 0.0, 1.0)).unwrap();
            let v = if sign { v } else { -v };
            let e_ng = Vec3::new(eng, -eng, eng);
            let h = 1e-3;
            let fd = (resonance_for_field(&probe, &bias, v + h, e_ng)
                - resonance_for_field(&probe, &bias, v - h, e_ng)) / (2.0 * h);
            let an = analytic_tunability(&probe, &bias, v, e_ng);
            prop_assume!(an.abs() > 1e6);
            prop_assert!((fd - an).abs() / an.abs() < 1e-6, "fd {} an {}", fd, an);
        }
    }
}

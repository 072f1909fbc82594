//! Least-squares fits for the analysis chain.
//!
//! The nonlinear fits share one damped Gauss-Newton (Levenberg-Marquardt)
//! loop with analytic Jacobians. Initialisation is fixed per model, so every
//! fit is a deterministic function of its input. Steps are only accepted when
//! they lower the weighted residual, which makes the final residual no worse
//! than the initial one.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectro::{Detection, SweepRecord};

const MAX_ITER: usize = 100;
const PARAM_TOL: f64 = 1e-8;

/// Quality verdict attached to every fitted sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitFlag {
    Good,
    LowSnr,
    Edge,
    NoFeature,
    NotConverged,
}

impl FitFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            FitFlag::Good => "good",
            FitFlag::LowSnr => "low-snr",
            FitFlag::Edge => "edge",
            FitFlag::NoFeature => "no-feature",
            FitFlag::NotConverged => "not-converged",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "good" => FitFlag::Good,
            "low-snr" => FitFlag::LowSnr,
            "edge" => FitFlag::Edge,
            "no-feature" => FitFlag::NoFeature,
            "not-converged" => FitFlag::NotConverged,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub names: &'static [&'static str],
    pub values: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// sqrt(Σ wᵢ rᵢ² / n) at the fitted parameters.
    pub residual_rms: f64,
    /// Same quantity at the initial guess.
    pub initial_rms: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub flag: FitFlag,
}

impl FitResult {
    fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| *n == name)
            .unwrap_or_else(|| panic!("fit has no parameter {name:?}; has {:?}", self.names))
    }

    pub fn get(&self, name: &str) -> f64 {
        self.values[self.index(name)]
    }

    pub fn std_err(&self, name: &str) -> f64 {
        let i = self.index(name);
        self.covariance[(i, i)].max(0.0).sqrt()
    }

    fn failed(names: &'static [&'static str], flag: FitFlag) -> Self {
        let n = names.len();
        Self {
            names,
            values: vec![f64::NAN; n],
            covariance: DMatrix::from_element(n, n, f64::NAN),
            residual_rms: f64::NAN,
            initial_rms: f64::NAN,
            converged: false,
            n_iter: 0,
            flag,
        }
    }
}

struct LmOutcome<const P: usize> {
    params: SVector<f64, P>,
    /// (JᵀWJ)⁻¹ at the solution.
    inverse_hessian: SMatrix<f64, P, P>,
    chi2: f64,
    initial_chi2: f64,
    n_iter: usize,
    converged: bool,
}

/// Minimises Σ wᵢ (yᵢ − m(xᵢ; p))². `model` returns the value and gradient
/// at one abscissa; `admissible` rejects parameter vectors outside the
/// model's domain.
fn levenberg_marquardt<const P: usize>(
    x: &[f64],
    y: &[f64],
    w: &[f64],
    p0: SVector<f64, P>,
    model: impl Fn(f64, &SVector<f64, P>) -> (f64, SVector<f64, P>),
    admissible: impl Fn(&SVector<f64, P>) -> bool,
) -> LmOutcome<P> {
    let normal_eqs = |p: &SVector<f64, P>| {
        let mut jtj = SMatrix::<f64, P, P>::zeros();
        let mut jtr = SVector::<f64, P>::zeros();
        let mut chi2 = 0.0;
        for i in 0..x.len() {
            let (m, g) = model(x[i], p);
            let r = y[i] - m;
            chi2 += w[i] * r * r;
            jtr += g * (w[i] * r);
            jtj += g * g.transpose() * w[i];
        }
        (jtj, jtr, chi2)
    };
    let chi2_at = |p: &SVector<f64, P>| -> f64 {
        (0..x.len())
            .map(|i| {
                let r = y[i] - model(x[i], p).0;
                w[i] * r * r
            })
            .sum()
    };

    let mut p = p0;
    let (mut jtj, mut jtr, mut chi2) = normal_eqs(&p);
    let initial_chi2 = chi2;
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut n_iter = 0;
    while n_iter < MAX_ITER {
        n_iter += 1;
        let mut damped = jtj;
        for k in 0..P {
            damped[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
        }
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&jtr),
            None => {
                lambda *= 10.0;
                if lambda > 1e16 {
                    break;
                }
                continue;
            }
        };
        let trial = p + step;
        let trial_chi2 = if admissible(&trial) { chi2_at(&trial) } else { f64::INFINITY };
        if trial_chi2.is_finite() && trial_chi2 <= chi2 {
            let small = (0..P).all(|k| step[k].abs() <= PARAM_TOL * (trial[k].abs() + 1e-300));
            p = trial;
            (jtj, jtr, chi2) = normal_eqs(&p);
            lambda = (lambda * 0.1).max(1e-12);
            if small {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                // no admissible descent direction left: p is a minimum to
                // working precision
                converged = true;
                break;
            }
        }
    }
    let inverse_hessian = jtj
        .try_inverse()
        .unwrap_or_else(|| SMatrix::<f64, P, P>::from_element(f64::NAN));
    LmOutcome {
        params: p,
        inverse_hessian,
        chi2,
        initial_chi2,
        n_iter,
        converged,
    }
}

fn to_dmatrix<const P: usize>(m: &SMatrix<f64, P, P>) -> DMatrix<f64> {
    DMatrix::from_iterator(P, P, m.iter().copied())
}

fn symmetrize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    m += t;
    m * 0.5
}

pub const LORENTZIAN_TRANSMISSION: &[&str] = &["f_c", "gamma", "depth", "baseline"];
pub const LORENTZIAN_FLUORESCENCE: &[&str] = &["f_c", "gamma", "amplitude", "baseline"];

/// Thresholds deciding when a sweep fit is unusable.
pub const MIN_SNR: f64 = 3.0;
pub const EDGE_FRACTION: f64 = 0.45;

fn boxcar3(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Weighted Lorentzian fit of one sweep (Poisson weights `1/max(counts, 1)`).
///
/// Frequencies are fitted relative to the window centre. Failures are
/// reported through `flag` and `converged`, never as errors.
pub fn fit_lorentzian(record: &SweepRecord, detection: Detection) -> Result<FitResult> {
    let names = match detection {
        Detection::Transmission => LORENTZIAN_TRANSMISSION,
        Detection::Fluorescence => LORENTZIAN_FLUORESCENCE,
    };
    let n = record.freqs.len();
    if n < 8 || record.counts.len() != n {
        return Err(Error::InsufficientData(format!(
            "a Lorentzian fit needs >= 8 bins with counts, got {n}"
        )));
    }
    let center = record.window_center();
    let span = record.span();
    let bin = span / n as f64;
    let x: Vec<f64> = record.freqs.iter().map(|f| f - center).collect();
    let y = &record.counts;
    if y.iter().all(|c| *c == y[0]) {
        return Ok(FitResult::failed(names, FitFlag::NoFeature));
    }
    let w: Vec<f64> = y.iter().map(|c| 1.0 / c.max(1.0)).collect();

    let smooth = boxcar3(y);
    let baseline0 = median(y);
    let sign = match detection {
        Detection::Transmission => -1.0,
        Detection::Fluorescence => 1.0,
    };
    let (i_ext, ext) = smooth
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| (sign * a.1).total_cmp(&(sign * b.1)))
        .unwrap();
    let height = sign * (ext - baseline0);
    if !(height > 0.0) {
        return Ok(FitResult::failed(names, FitFlag::NoFeature));
    }
    // width from the feature's area: area = height · π γ / 2
    let half_window = (n / 10).max(3);
    let lo = i_ext.saturating_sub(half_window);
    let hi = (i_ext + half_window).min(n - 1);
    let area: f64 = smooth[lo..=hi]
        .iter()
        .map(|s| (sign * (s - baseline0)).max(0.0) * bin)
        .sum();
    let gamma0 = (2.0 * area / (std::f64::consts::PI * height)).clamp(bin, 0.25 * span.max(bin));
    let amp0 = match detection {
        Detection::Transmission => height / baseline0.max(1e-300),
        Detection::Fluorescence => height,
    };
    let p0 = SVector::<f64, 4>::new(x[i_ext], gamma0, amp0, baseline0);

    let model = move |xi: f64, p: &SVector<f64, 4>| -> (f64, SVector<f64, 4>) {
        let (xc, g, a, b) = (p[0], p[1], p[2], p[3]);
        let h = 0.5 * g;
        let dx = xi - xc;
        let den = dx * dx + h * h;
        let l = h * h / den;
        let dl_dxc = 2.0 * dx * h * h / (den * den);
        let dl_dg = h * dx * dx / (den * den);
        match detection {
            Detection::Transmission => (
                b * (1.0 - a * l),
                SVector::<f64, 4>::new(-b * a * dl_dxc, -b * a * dl_dg, -b * l, 1.0 - a * l),
            ),
            Detection::Fluorescence => (
                b + a * l,
                SVector::<f64, 4>::new(a * dl_dxc, a * dl_dg, l, 1.0),
            ),
        }
    };
    let max_amp = match detection {
        Detection::Transmission => 1.0,
        Detection::Fluorescence => f64::INFINITY,
    };
    let out = levenberg_marquardt(&x, y, &w, p0, model, |p| p[1] > 0.0 && p[3] > 0.0 && p[2] <= max_amp);
    let p = out.params;
    let cov = symmetrize(to_dmatrix(&out.inverse_hessian));
    let amp_err = cov[(2, 2)].max(0.0).sqrt();
    let flag = if !out.converged || !p.iter().all(|v| v.is_finite()) || !cov[(0, 0)].is_finite() {
        FitFlag::NotConverged
    } else if p[0].abs() > EDGE_FRACTION * span {
        FitFlag::Edge
    } else if !(p[2] / amp_err >= MIN_SNR) {
        FitFlag::LowSnr
    } else {
        FitFlag::Good
    };
    Ok(FitResult {
        names,
        values: vec![center + p[0], p[1], p[2], p[3]],
        covariance: cov,
        residual_rms: (out.chi2 / n as f64).sqrt(),
        initial_rms: (out.initial_chi2 / n as f64).sqrt(),
        converged: flag == FitFlag::Good,
        n_iter: out.n_iter,
        flag,
    })
}

pub const GAUSSIAN: &[&str] = &["mu", "sigma", "amplitude"];

/// `amplitude · exp(-(x-μ)²/(2σ²))` fitted to histogram counts.
pub fn fit_gaussian(centers: &[f64], counts: &[f64]) -> Result<FitResult> {
    if centers.len() != counts.len() {
        return Err(Error::invalid("histogram centres and counts differ in length"));
    }
    let nonzero = counts.iter().filter(|c| **c != 0.0).count();
    if nonzero < 5 {
        return Err(Error::FitFailed(format!(
            "a Gaussian fit needs >= 5 non-empty bins, got {nonzero}"
        )));
    }
    let total: f64 = counts.iter().sum();
    let mean = centers.iter().zip(counts).map(|(x, c)| x * c).sum::<f64>() / total;
    let var = centers
        .iter()
        .zip(counts)
        .map(|(x, c)| c * (x - mean).powi(2))
        .sum::<f64>()
        / total;
    let peak = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let p0 = SVector::<f64, 3>::new(mean, var.sqrt().max(f64::MIN_POSITIVE), peak);
    let w = vec![1.0; counts.len()];
    let model = |x: f64, p: &SVector<f64, 3>| {
        let (mu, s, a) = (p[0], p[1], p[2]);
        let u = (x - mu) / s;
        let e = (-0.5 * u * u).exp();
        (a * e, SVector::<f64, 3>::new(a * e * u / s, a * e * u * u / s, e))
    };
    let out = levenberg_marquardt(centers, counts, &w, p0, model, |p| p[1] > 0.0);
    Ok(unweighted_result(GAUSSIAN, out, counts.len(), |p| p.iter().copied().collect()))
}

pub fn gaussian_value(fit: &FitResult, x: f64) -> f64 {
    let (mu, s, a) = (fit.get("mu"), fit.get("sigma"), fit.get("amplitude"));
    a * (-0.5 * ((x - mu) / s).powi(2)).exp()
}

fn unweighted_result<const P: usize>(
    names: &'static [&'static str],
    out: LmOutcome<P>,
    n: usize,
    values: impl Fn(&SVector<f64, P>) -> Vec<f64>,
) -> FitResult {
    // residual variance replaces the unknown noise level
    let dof = n.saturating_sub(P).max(1) as f64;
    let cov = symmetrize(to_dmatrix(&out.inverse_hessian) * (out.chi2 / dof));
    let ok = out.converged && out.params.iter().all(|v| v.is_finite());
    FitResult {
        names,
        values: values(&out.params),
        covariance: cov,
        residual_rms: (out.chi2 / n as f64).sqrt(),
        initial_rms: (out.initial_chi2 / n as f64).sqrt(),
        converged: ok,
        n_iter: out.n_iter,
        flag: if ok { FitFlag::Good } else { FitFlag::NotConverged },
    }
}

pub const EXPONENTIAL: &[&str] = &["amplitude", "tau"];

/// `A · exp(-Δt/τ)` fitted to a correlation curve.
///
/// The decay rate `1/τ` is the internal parameter; a fit whose τ exceeds
/// 100× the longest lag is reported as not converged.
pub fn fit_exponential(lags: &[f64], values: &[f64], exclude_zero_lag: bool) -> Result<FitResult> {
    if lags.len() != values.len() {
        return Err(Error::invalid("lags and values differ in length"));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = lags
        .iter()
        .zip(values)
        .filter(|(l, _)| !(exclude_zero_lag && **l == 0.0))
        .map(|(l, v)| (*l, *v))
        .unzip();
    if x.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "an exponential fit needs >= 4 lags, got {}",
            x.len()
        )));
    }
    let max_lag = x.iter().copied().fold(0.0, f64::max);
    // log-linear guess on the leading positive run
    let run: Vec<(f64, f64)> = x
        .iter()
        .zip(&y)
        .take_while(|(_, v)| **v > 0.0)
        .map(|(l, v)| (*l, v.ln()))
        .collect();
    let (a0, k0) = if run.len() >= 2 {
        let (slope, intercept, _) = crate::stats::linear_regression(
            &run.iter().map(|r| r.0).collect::<Vec<_>>(),
            &run.iter().map(|r| r.1).collect::<Vec<_>>(),
        );
        (intercept.exp(), (-slope).max(1.0 / (100.0 * max_lag.max(f64::MIN_POSITIVE))))
    } else {
        (y[0], 1.0 / max_lag.max(f64::MIN_POSITIVE))
    };
    let p0 = SVector::<f64, 2>::new(a0, k0);
    let w = vec![1.0; x.len()];
    let model = |t: f64, p: &SVector<f64, 2>| {
        let e = (-p[1] * t).exp();
        (p[0] * e, SVector::<f64, 2>::new(e, -p[0] * t * e))
    };
    let out = levenberg_marquardt(&x, &y, &w, p0, model, |p| p[1] > 0.0);
    let k = out.params[1];
    let mut res = unweighted_result(EXPONENTIAL, out, x.len(), |p| vec![p[0], 1.0 / p[1]]);
    // map the (A, k) covariance to (A, τ): dτ/dk = -1/k²
    let jac = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0 / (k * k)]);
    res.covariance = &jac * &res.covariance * jac.transpose();
    if !(res.get("tau") <= 100.0 * max_lag) {
        res.converged = false;
        res.flag = FitFlag::NotConverged;
    }
    Ok(res)
}

pub const PARABOLA: &[&str] = &["a", "b", "c"];

/// Weighted linear least squares for `f = a V² + b V + c`.
pub fn fit_parabola(v: &[f64], f: &[f64], weights: &[f64]) -> Result<FitResult> {
    let n = v.len();
    if f.len() != n || weights.len() != n {
        return Err(Error::invalid("parabola inputs differ in length"));
    }
    let mut distinct = v.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::FitFailed(format!(
            "a parabola needs >= 3 distinct voltages, got {}",
            distinct.len()
        )));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::invalid("parabola weights must be positive"));
    }
    // centre and scale the abscissa for conditioning, then map back
    let v0 = v.iter().sum::<f64>() / n as f64;
    let s = v.iter().map(|x| (x - v0).abs()).fold(0.0, f64::max);
    let design = DMatrix::from_fn(n, 3, |i, j| {
        let u = (v[i] - v0) / s;
        weights[i].sqrt() * u.powi(2 - j as i32)
    });
    let rhs = DVector::from_iterator(n, (0..n).map(|i| weights[i].sqrt() * f[i]));
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-12 * smax {
        return Err(Error::FitFailed("rank-deficient parabola design".into()));
    }
    let q = svd
        .solve(&rhs, 1e-12 * smax)
        .map_err(|e| Error::FitFailed(e.to_string()))?;
    let (qa, qb, qc) = (q[0], q[1], q[2]);
    let a = qa / (s * s);
    let b = qb / s - 2.0 * qa * v0 / (s * s);
    let c = qc - qb * v0 / s + qa * v0 * v0 / (s * s);
    let resid = &rhs - &design * &q;
    let chi2 = resid.norm_squared();
    let dof = n.saturating_sub(3).max(1) as f64;
    let xtx_inv = (design.transpose() * &design)
        .try_inverse()
        .ok_or_else(|| Error::FitFailed("singular normal matrix".into()))?;
    // (a, b, c) = T q
    let t = DMatrix::from_row_slice(
        3,
        3,
        &[
            1.0 / (s * s),
            0.0,
            0.0,
            -2.0 * v0 / (s * s),
            1.0 / s,
            0.0,
            v0 * v0 / (s * s),
            -v0 / s,
            1.0,
        ],
    );
    let scale = if n > 3 { chi2 / dof } else { 1.0 };
    let cov = symmetrize(&t * xtx_inv * t.transpose() * scale);
    let initial_rms = (f.iter().zip(weights).map(|(y, w)| w * y * y).sum::<f64>() / n as f64).sqrt();
    Ok(FitResult {
        names: PARABOLA,
        values: vec![a, b, c],
        covariance: cov,
        residual_rms: (chi2 / n as f64).sqrt(),
        initial_rms,
        converged: true,
        n_iter: 1,
        flag: FitFlag::Good,
    })
}

/// Derivative accessors for a fitted parabola.
pub trait ParabolaExt {
    fn tunability(&self, v: f64) -> f64;
    fn vertex(&self) -> f64;
}

impl ParabolaExt for FitResult {
    fn tunability(&self, v: f64) -> f64 {
        2.0 * self.get("a") * v + self.get("b")
    }

    fn vertex(&self) -> f64 {
        -self.get("b") / (2.0 * self.get("a"))
    }
}

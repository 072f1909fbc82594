//! Trace statistics: robust moments, tunability scans, correlation curves,
//! step histograms, the non-Gaussianity η and its inversion to a density.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitters::{self, FitResult, ParabolaExt};
use crate::spectro::FrequencyTrace;

const REJECT_SIGMAS: f64 = 5.0;
const REJECT_PASSES: usize = 3;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean and RMS of the usable points after up to three passes of 5σ
/// rejection.
pub fn robust_center_rms(trace: &FrequencyTrace) -> Result<(f64, f64)> {
    let mut v = trace.usable_values();
    if v.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "robust statistics need >= 10 usable points, got {}",
            v.len()
        )));
    }
    for _ in 0..REJECT_PASSES {
        let (m, s) = mean_std(&v);
        let before = v.len();
        v.retain(|x| (x - m).abs() <= REJECT_SIGMAS * s);
        if v.len() == before {
            break;
        }
    }
    Ok(mean_std(&v))
}

/// Least-squares line `y = slope·x + intercept` and its R².
pub fn linear_regression(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Standard error of the slope from [`linear_regression`].
pub fn slope_std_err(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n < 3 {
        return f64::NAN;
    }
    let (slope, intercept, _) = linear_regression(x, y);
    let mx = x.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    (rss / (n - 2) as f64 / sxx).sqrt()
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone)]
pub struct TunabilityScan {
    pub voltages: Vec<f64>,
    pub f_mean: Vec<f64>,
    pub sigma_f: Vec<f64>,
    pub df_dv: Vec<f64>,
    pub parabola: FitResult,
}

impl TunabilityScan {
    pub fn abs_tunability(&self) -> Vec<f64> {
        self.df_dv.iter().map(|d| d.abs()).collect()
    }

    /// Pearson correlation between σ_f and |∂f/∂V|.
    pub fn proportionality(&self) -> f64 {
        pearson(&self.sigma_f, &self.abs_tunability())
    }
}

/// Robust moments per voltage, a parabola through the means and its slope.
pub fn tunability_scan(scan: &[(f64, FrequencyTrace)]) -> Result<TunabilityScan> {
    if scan.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "a tunability scan needs >= 3 voltages, got {}",
            scan.len()
        )));
    }
    let mut voltages = Vec::with_capacity(scan.len());
    let mut f_mean = Vec::with_capacity(scan.len());
    let mut sigma_f = Vec::with_capacity(scan.len());
    let mut weights = Vec::with_capacity(scan.len());
    for (v, trace) in scan {
        let (m, s) = robust_center_rms(trace)?;
        voltages.push(*v);
        f_mean.push(m);
        sigma_f.push(s);
        // weight by the inverse variance of the mean
        let n = trace.usable_values().len() as f64;
        weights.push(n / (s * s).max(1.0));
    }
    let parabola = fitters::fit_parabola(&voltages, &f_mean, &weights)?;
    let df_dv = voltages.iter().map(|v| parabola.tunability(*v)).collect();
    Ok(TunabilityScan {
        voltages,
        f_mean,
        sigma_f,
        df_dv,
        parabola,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationCurve {
    pub lags: Vec<f64>,
    pub values: Vec<f64>,
    pub n_pairs: Vec<usize>,
}

impl CorrelationCurve {
    pub fn at_lag(&self, lag: f64) -> Option<f64> {
        self.lags.iter().position(|l| *l == lag).map(|i| self.values[i])
    }

    /// Value at zero lag.
    pub fn peak(&self) -> f64 {
        self.at_lag(0.0).unwrap_or(f64::NAN)
    }

    /// Non-negative part of the curve, for exponential fitting.
    pub fn non_negative_lags(&self) -> (Vec<f64>, Vec<f64>) {
        self.lags
            .iter()
            .zip(&self.values)
            .filter(|(l, _)| **l >= 0.0)
            .map(|(l, v)| (*l, *v))
            .unzip()
    }
}

/// Sampling interval, or an error when sampling is not uniform.
fn uniform_step(trace: &FrequencyTrace) -> Result<f64> {
    let n = trace.len();
    let dt = (trace.times[n - 1] - trace.times[0]) / (n - 1) as f64;
    let tol = 1e-6 * dt;
    for (i, t) in trace.times.iter().enumerate() {
        if (t - trace.times[0] - i as f64 * dt).abs() > tol {
            return Err(Error::GridMismatch(format!(
                "sample {i} at {t} s is off the uniform {dt} s grid"
            )));
        }
    }
    Ok(dt)
}

fn centered_usable(trace: &FrequencyTrace) -> (Vec<Option<f64>>, usize) {
    let vals = trace.usable_values();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let d = (0..trace.len())
        .map(|i| trace.usable(i).then(|| trace.f_c[i] - m))
        .collect();
    (d, vals.len())
}

fn lag_sum(a: &[Option<f64>], b: &[Option<f64>], k: isize) -> (f64, usize) {
    let n = a.len() as isize;
    let (mut s, mut pairs) = (0.0, 0);
    for i in 0.max(-k)..(n - k.max(0)) {
        if let (Some(x), Some(y)) = (a[i as usize], b[(i + k) as usize]) {
            s += x * y;
            pairs += 1;
        }
    }
    (s, pairs)
}

/// Normalised biased autocorrelation for lags `0..=N/4`.
///
/// Flagged sweeps are skipped. Each lag sum is divided by its own pair
/// count and multiplied by the `(N - k)/N` taper, so gaps do not drag the
/// curve down; without gaps this is the textbook biased estimator.
pub fn autocorrelation(trace: &FrequencyTrace) -> Result<CorrelationCurve> {
    trace.validate()?;
    if trace.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "autocorrelation needs >= 100 points, got {}",
            trace.len()
        )));
    }
    let dt = uniform_step(trace)?;
    let (d, n) = centered_usable(trace);
    if n < 100 {
        return Err(Error::InsufficientData(format!("only {n} usable points")));
    }
    let max_lag = trace.len() / 4;
    let mut lags = Vec::with_capacity(max_lag + 1);
    let mut values = Vec::with_capacity(max_lag + 1);
    let mut n_pairs = Vec::with_capacity(max_lag + 1);
    let c0 = lag_sum(&d, &d, 0).0 / n as f64;
    let len = trace.len() as f64;
    for k in 0..=max_lag {
        let (s, p) = lag_sum(&d, &d, k as isize);
        lags.push(k as f64 * dt);
        let v = if c0 > 0.0 && p > 0 {
            s / p as f64 / c0 * (len - k as f64) / len
        } else if k == 0 {
            1.0
        } else {
            0.0
        };
        values.push(v);
        n_pairs.push(p);
    }
    Ok(CorrelationCurve { lags, values, n_pairs })
}

/// Normalised cross-correlation for lags `-N/4..=N/4`, with
/// `C(kΔ) ∝ Σ δf_j(t_i) δf_k(t_i + kΔ)` over pairs where both sweeps are
/// usable, gap-corrected like [`autocorrelation`].
///
/// Both traces must share length and sampling interval and be offset by
/// less than one interval (interleaved sweeps map to the same slot).
pub fn cross_correlation(a: &FrequencyTrace, b: &FrequencyTrace) -> Result<CorrelationCurve> {
    a.validate()?;
    b.validate()?;
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!(
            "traces have {} and {} points",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "cross-correlation needs >= 100 points, got {}",
            a.len()
        )));
    }
    let dt = uniform_step(a)?;
    let dt_b = uniform_step(b)?;
    if (dt - dt_b).abs() > 1e-6 * dt {
        return Err(Error::GridMismatch(format!("sampling intervals {dt} s and {dt_b} s differ")));
    }
    if (a.times[0] - b.times[0]).abs() >= dt {
        return Err(Error::GridMismatch(format!(
            "traces start {} s apart, more than one interval",
            (a.times[0] - b.times[0]).abs()
        )));
    }
    let (da, na) = centered_usable(a);
    let (db, nb) = centered_usable(b);
    if na < 100 || nb < 100 {
        return Err(Error::InsufficientData(format!("only {na} and {nb} usable points")));
    }
    let norm = (lag_sum(&da, &da, 0).0 / na as f64 * lag_sum(&db, &db, 0).0 / nb as f64).sqrt();
    let len = a.len() as f64;
    let max_lag = (a.len() / 4) as isize;
    let mut curve = CorrelationCurve {
        lags: Vec::new(),
        values: Vec::new(),
        n_pairs: Vec::new(),
    };
    for k in -max_lag..=max_lag {
        let (s, p) = lag_sum(&da, &db, k);
        curve.lags.push(k as f64 * dt);
        let taper = (len - k.unsigned_abs() as f64) / len;
        curve.values.push(if norm > 0.0 && p > 0 { s / p as f64 / norm * taper } else { 0.0 });
        curve.n_pairs.push(p);
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub n_steps: usize,
    pub bin_width: f64,
    /// Sample standard deviation of the steps.
    pub step_std: f64,
}

impl StepHistogram {
    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn counts_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|c| *c as f64).collect()
    }
}

/// Bin width as a multiple of the step standard deviation.
pub const STEP_BIN_SIGMAS: f64 = 0.4;
/// Half-range of the histogram in step standard deviations.
pub const STEP_RANGE_SIGMAS: f64 = 5.0;

/// Steps between consecutive usable sweeps.
pub fn consecutive_steps(trace: &FrequencyTrace) -> Vec<f64> {
    (1..trace.len())
        .filter(|&i| trace.usable(i) && trace.usable(i - 1))
        .map(|i| trace.f_c[i] - trace.f_c[i - 1])
        .collect()
}

/// Histogram of consecutive-sweep steps with bins of 0.4 std centred on
/// zero over ±5 std. The range grows to the largest step so that every
/// step is counted.
pub fn step_histogram(trace: &FrequencyTrace) -> Result<StepHistogram> {
    trace.validate()?;
    let steps = consecutive_steps(trace);
    histogram_of_steps(&steps)
}

pub fn histogram_of_steps(steps: &[f64]) -> Result<StepHistogram> {
    if steps.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "a step histogram needs >= 100 consecutive pairs, got {}",
            steps.len()
        )));
    }
    let (_, std) = mean_std(steps);
    let width = if std > 0.0 { STEP_BIN_SIGMAS * std } else { 1.0 };
    let max_abs = steps.iter().fold(0.0f64, |a, s| a.max(s.abs()));
    let half_range = (STEP_RANGE_SIGMAS * std).max(max_abs);
    // bins are centred on multiples of the width
    let m_bins = (half_range / width - 0.5).ceil().max(0.0) as i64;
    let n_bins = (2 * m_bins + 1) as usize;
    let bin_edges: Vec<f64> = (0..=n_bins).map(|i| (i as f64 - m_bins as f64 - 0.5) * width).collect();
    let mut counts = vec![0u64; n_bins];
    for s in steps {
        let i = (s / width + m_bins as f64 + 0.5).floor() as i64;
        counts[i.clamp(0, n_bins as i64 - 1) as usize] += 1;
    }
    Ok(StepHistogram {
        bin_edges,
        counts,
        n_steps: steps.len(),
        bin_width: width,
        step_std: std,
    })
}

#[derive(Debug, Clone)]
pub struct NonGaussianity {
    pub eta: f64,
    pub gaussian: FitResult,
    /// Fitted Gaussian at each bin centre.
    pub expected: Vec<f64>,
    /// Regularised ratio (counts + 1)/(expected + 1) per bin.
    pub ratio: Vec<f64>,
}

/// η = Σ_b max((counts_b + 1)/(G_b + 1) − 1, 0) against the fitted Gaussian.
pub fn non_gaussianity(hist: &StepHistogram) -> Result<NonGaussianity> {
    let centers = hist.centers();
    let counts = hist.counts_f64();
    let gaussian = fitters::fit_gaussian(&centers, &counts)?;
    if !gaussian.converged {
        return Err(Error::FitFailed("Gaussian fit to the step histogram did not converge".into()));
    }
    Ok(eta_against(&centers, &counts, gaussian))
}

fn eta_against(centers: &[f64], counts: &[f64], gaussian: FitResult) -> NonGaussianity {
    let expected: Vec<f64> = centers.iter().map(|x| fitters::gaussian_value(&gaussian, *x)).collect();
    let ratio: Vec<f64> = counts.iter().zip(&expected).map(|(c, g)| (c + 1.0) / (g + 1.0)).collect();
    let eta = ratio.iter().map(|r| (r - 1.0).max(0.0)).sum();
    NonGaussianity {
        eta,
        gaussian,
        expected,
        ratio,
    }
}

/// η of a frequency trace through the standard histogram rules.
pub fn trace_eta(trace: &FrequencyTrace) -> Result<f64> {
    Ok(non_gaussianity(&step_histogram(trace)?)?.eta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaCalibration {
    pub n_q: Vec<f64>,
    pub eta_mean: Vec<f64>,
    pub eta_std: Vec<f64>,
    pub replicates: usize,
    /// η of a charge-free run.
    pub baseline: f64,
    pub fingerprint: String,
    /// Whether the mean curve is strictly decreasing in n_q.
    pub monotone: bool,
}

/// Builds η(n_q) from `run(n_q, replicate)`, which must apply the same
/// analysis to every point. `run(0.0, 0)` gives the charge-free baseline.
/// Grid points and replicates run on the current rayon pool.
pub fn calibrate_eta<F>(grid: &[f64], replicates: usize, fingerprint: &str, run: F) -> Result<EtaCalibration>
where
    F: Fn(f64, usize) -> Result<f64> + Sync,
{
    if grid.len() < 3 {
        return Err(Error::invalid(format!("calibration grid needs >= 3 points, got {}", grid.len())));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || !(grid[0] > 0.0) {
        return Err(Error::invalid("calibration grid must be positive and strictly increasing"));
    }
    if replicates < 3 {
        return Err(Error::invalid(format!("calibration needs >= 3 replicates, got {replicates}")));
    }
    let jobs: Vec<(f64, usize)> = std::iter::once((0.0, 0))
        .chain(grid.iter().flat_map(|n| (0..replicates).map(move |r| (*n, r))))
        .collect();
    let etas: Vec<f64> = jobs
        .par_iter()
        .map(|(n, r)| run(*n, *r))
        .collect::<Result<_>>()?;
    let baseline = etas[0];
    let (mut eta_mean, mut eta_std) = (Vec::new(), Vec::new());
    for chunk in etas[1..].chunks(replicates) {
        let m = chunk.iter().sum::<f64>() / replicates as f64;
        let var = chunk.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (replicates - 1) as f64;
        eta_mean.push(m);
        eta_std.push(var.sqrt());
    }
    let monotone = eta_mean.windows(2).all(|w| w[1] < w[0]);
    Ok(EtaCalibration {
        n_q: grid.to_vec(),
        eta_mean,
        eta_std,
        replicates,
        baseline,
        fingerprint: fingerprint.to_string(),
        monotone,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityEstimate {
    pub n_q: f64,
    pub low: f64,
    pub high: f64,
}

/// Inverts the calibration at `eta` by piecewise-linear interpolation of
/// log n_q against η on the decreasing high-density branch of the curve,
/// the part that connects to the Gaussian limit. The interval maps the
/// replicate standard error of the bracketing points through the local
/// slope.
pub fn infer_density(eta: f64, cal: &EtaCalibration) -> Result<DensityEstimate> {
    if !(eta > cal.baseline) {
        return Err(Error::BelowSensitivity {
            eta,
            baseline: cal.baseline,
        });
    }
    let m = cal.eta_mean.len();
    if m < 2 || cal.n_q.len() != m || cal.eta_std.len() != m {
        return Err(Error::invalid("calibration needs >= 2 consistent grid points"));
    }
    let mut start = m - 1;
    while start > 0 && cal.eta_mean[start - 1] > cal.eta_mean[start] {
        start -= 1;
    }
    let (lo, hi) = (cal.eta_mean[m - 1], cal.eta_mean[start]);
    if !(eta >= lo && eta <= hi) {
        if start > 0 && cal.eta_mean[..start].iter().any(|e| *e >= eta) {
            return Err(Error::InvalidParameter(format!(
                "eta = {eta} lies outside the decreasing branch [{lo}, {hi}] of the calibration"
            )));
        }
        return Err(Error::Extrapolation { eta, min: lo, max: hi });
    }
    if start == m - 1 {
        return Err(Error::InvalidParameter("calibration has no decreasing segment".into()));
    }
    let segment = (start..m - 1)
        .find(|&i| cal.eta_mean[i] >= eta && eta >= cal.eta_mean[i + 1])
        .expect("eta lies inside the branch");
    let (e0, e1) = (cal.eta_mean[segment], cal.eta_mean[segment + 1]);
    let (l0, l1) = (cal.n_q[segment].ln(), cal.n_q[segment + 1].ln());
    let n = if eta == e0 {
        cal.n_q[segment]
    } else if eta == e1 {
        cal.n_q[segment + 1]
    } else {
        let u = (eta - e0) / (e1 - e0);
        (l0 + u * (l1 - l0)).exp()
    };
    with_interval(n, l0, l1, e0, e1, cal, segment)
}

fn with_interval(
    n: f64,
    l0: f64,
    l1: f64,
    e0: f64,
    e1: f64,
    cal: &EtaCalibration,
    segment: usize,
) -> Result<DensityEstimate> {
    let slope = (l1 - l0) / (e1 - e0);
    let se = 0.5 * (cal.eta_std[segment] + cal.eta_std[segment + 1]) / (cal.replicates as f64).sqrt();
    let dlog = (slope * se).abs();
    Ok(DensityEstimate {
        n_q: n,
        low: n * (-dlog).exp(),
        high: n * dlog.exp(),
    })
}

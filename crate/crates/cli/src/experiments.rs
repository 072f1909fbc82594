//! Multi-campaign experiments: power sweeps, focus scans, voltage scans,
//! probe-pair correlations and amplitude scaling grids.
//!
//! Runs inside one experiment share the charge ensemble unless stated
//! otherwise and take independent dynamics and noise seeds, so the
//! varied parameter is the only systematic difference between them.

use chargenoise::dynamics::AuxFocus;
use chargenoise::fitters::{self, FitResult};
use chargenoise::model::{sample_ensemble, ChargeEnsemble, Vec3};
use chargenoise::pipeline::{analyze_trace, run_with_ensemble, Campaign, CampaignSeeds, Experiment, TraceReport};
use chargenoise::seeds::derive_seed;
use chargenoise::spectro::FrequencyTrace;
use chargenoise::stats::{self, CorrelationCurve, TunabilityScan};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::{CliError, CliResult};

fn seeds_for(ensemble_seed: u64, master: u64, label: &str, index: u64) -> CampaignSeeds {
    CampaignSeeds {
        ensemble: ensemble_seed,
        dynamics: derive_seed(derive_seed(master, label, index), "dynamics", 0),
        noise: derive_seed(derive_seed(master, label, index), "noise", 0),
    }
}

fn base_ensemble(exp: &Experiment, master: u64) -> CliResult<(ChargeEnsemble, u64)> {
    let seed = CampaignSeeds::derive(exp, master).ensemble;
    Ok((sample_ensemble(exp.n_q, &exp.geometry, seed)?, seed))
}

fn run(exp: &Experiment, ensemble: &ChargeEnsemble, seeds: CampaignSeeds) -> CliResult<Campaign> {
    Ok(run_with_ensemble(exp, ensemble.clone(), seeds, |_, _, _| Ok(()))?)
}

fn report(exp: &Experiment, trace: &FrequencyTrace) -> CliResult<TraceReport> {
    let flagged = trace.flagged_fraction();
    if flagged > exp.analysis.max_flagged_fraction {
        return Err(CliError::quality(format!("degraded data: {:.1}% of sweeps flagged", 100.0 * flagged)));
    }
    Ok(analyze_trace(trace, &exp.analysis)?)
}

fn require_tau(r: &TraceReport, what: &str) -> CliResult<(f64, f64)> {
    match &r.tau {
        Some(fit) if fit.converged => Ok((fit.get("tau"), fit.std_err("tau"))),
        _ => Err(CliError::quality(format!("no converged correlation time for {what}"))),
    }
}

#[derive(Debug, Clone)]
pub struct PowerRow {
    pub power: f64,
    pub tau: f64,
    pub tau_err: f64,
    pub sigma_f: f64,
    pub flagged_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct PowerSweep {
    pub rows: Vec<PowerRow>,
    /// Log-log slope of τ against P and its standard error; absent for
    /// fewer than two powers.
    pub slope: Option<(f64, f64)>,
    /// (max − min)/mean of σ_f across powers.
    pub sigma_spread: f64,
}

/// Experiment at optical power `p`: rates, sweep cadence and detector
/// flux all scale with `p / guided_flux`, so the sampling interval stays
/// a fixed fraction of τ and the shot-noise floor is unchanged.
pub fn at_power(exp: &Experiment, p: f64) -> Experiment {
    let f = p / exp.illumination.guided_flux;
    let mut e = exp.clone();
    e.illumination = exp.illumination.scaled(f);
    e.sweep.repetition_rate *= f;
    e.sweep.sweep_rate *= f;
    e.sweep.detector_flux *= f;
    e
}

pub fn sweep_power(cfg: &ExperimentConfig, master: u64) -> CliResult<PowerSweep> {
    let powers = &cfg.power_sweep.powers_photons_per_s;
    if powers.is_empty() {
        return Err(CliError::config("power_sweep needs at least one power"));
    }
    let exp = cfg.experiment();
    let (ensemble, ens_seed) = base_ensemble(&exp, master)?;
    let rows: Vec<PowerRow> = powers
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let e = at_power(&exp, *p);
            let c = run(&e, &ensemble, seeds_for(ens_seed, master, "power", i as u64))?;
            let r = report(&e, &c.traces[0])?;
            let (tau, tau_err) = require_tau(&r, &format!("P = {p:e}"))?;
            Ok(PowerRow {
                power: *p,
                tau,
                tau_err,
                sigma_f: r.sigma_f,
                flagged_fraction: r.flagged_fraction,
            })
        })
        .collect::<CliResult<_>>()?;
    let slope = (rows.len() >= 2).then(|| {
        let x: Vec<f64> = rows.iter().map(|r| r.power.ln()).collect();
        let y: Vec<f64> = rows.iter().map(|r| r.tau.ln()).collect();
        (stats::linear_regression(&x, &y).0, stats::slope_std_err(&x, &y))
    });
    let sig: Vec<f64> = rows.iter().map(|r| r.sigma_f).collect();
    let mean = sig.iter().sum::<f64>() / sig.len() as f64;
    let spread = (sig.iter().copied().fold(f64::MIN, f64::max) - sig.iter().copied().fold(f64::MAX, f64::min)) / mean;
    Ok(PowerSweep {
        rows,
        slope,
        sigma_spread: spread,
    })
}

#[derive(Debug, Clone)]
pub struct FocusScan {
    pub offsets: Vec<f64>,
    pub tau: Vec<f64>,
    pub tau_reference: f64,
    /// τ without auxiliary light divided by τ with it, i.e. the rate ratio.
    pub normalized_rate: Vec<f64>,
    pub profile: FitResult,
    pub fwhm: f64,
    pub peak: f64,
    pub expected_peak: f64,
}

/// Reference runs averaged for the no-aux rate.
const FOCUS_REFERENCE_RUNS: u64 = 4;

pub fn scan_focus(cfg: &ExperimentConfig, master: u64) -> CliResult<FocusScan> {
    let plan = &cfg.focus_scan;
    if plan.offsets_m.len() < 5 {
        return Err(CliError::config("focus_scan needs at least 5 offsets"));
    }
    let exp = cfg.experiment();
    let (ensemble, ens_seed) = base_ensemble(&exp, master)?;
    let x0 = exp.probes[0].position.x;
    let jobs: Vec<Option<f64>> = (0..FOCUS_REFERENCE_RUNS)
        .map(|_| None)
        .chain(plan.offsets_m.iter().map(|o| Some(*o)))
        .collect();
    let taus: Vec<f64> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, offset)| {
            let mut e = exp.clone();
            e.illumination.aux_focus = offset.map(|o| AuxFocus {
                center_x: x0 + o,
                fwhm: plan.fwhm_m,
                flux: plan.aux_flux_photons_per_s,
            });
            let c = run(&e, &ensemble, seeds_for(ens_seed, master, "focus", i as u64))?;
            let r = report(&e, &c.traces[0])?;
            Ok(require_tau(&r, "focus scan")?.0)
        })
        .collect::<CliResult<_>>()?;
    let n_ref = FOCUS_REFERENCE_RUNS as usize;
    // average rates, not times
    let tau_reference = n_ref as f64 / taus[..n_ref].iter().map(|t| 1.0 / t).sum::<f64>();
    let tau = taus[n_ref..].to_vec();
    let normalized_rate: Vec<f64> = tau.iter().map(|t| tau_reference / t).collect();
    let excess: Vec<f64> = normalized_rate.iter().map(|r| r - 1.0).collect();
    let profile = fitters::fit_gaussian(&plan.offsets_m, &excess)?;
    let fwhm = 2.0 * (2.0 * std::f64::consts::LN_2).sqrt() * profile.get("sigma");
    Ok(FocusScan {
        offsets: plan.offsets_m.clone(),
        tau,
        tau_reference,
        normalized_rate,
        peak: 1.0 + profile.get("amplitude"),
        expected_peak: 1.0 + plan.aux_flux_photons_per_s / exp.illumination.guided_flux,
        fwhm,
        profile,
    })
}

#[derive(Debug, Clone)]
pub struct VoltageScan {
    pub scan: TunabilityScan,
    /// Pearson correlation of σ_f with |∂f/∂V|.
    pub pearson: f64,
    /// Central-difference tunability at interior voltages.
    pub fd_voltages: Vec<f64>,
    pub fd_tunability: Vec<f64>,
    /// R² of |Δf/ΔV| regressed on |V − V*|.
    pub fd_r2: f64,
    pub vertex: f64,
}

pub fn scan_voltage(cfg: &ExperimentConfig, master: u64) -> CliResult<VoltageScan> {
    use chargenoise::fitters::ParabolaExt;
    let plan = &cfg.voltage_scan;
    let mut exp = cfg.experiment();
    exp.sweep.n_sweeps = plan.n_sweeps;
    let (ensemble, ens_seed) = base_ensemble(&exp, master)?;
    let traces: Vec<(f64, FrequencyTrace)> = plan
        .voltages_v
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let e = Experiment { voltage: *v, ..exp.clone() };
            let c = run(&e, &ensemble, seeds_for(ens_seed, master, "voltage", i as u64))?;
            report(&e, &c.traces[0])?;
            Ok((*v, c.traces.into_iter().next().expect("one probe")))
        })
        .collect::<CliResult<_>>()?;
    let scan = stats::tunability_scan(&traces)?;
    let pearson = scan.proportionality();
    let vertex = scan.parabola.vertex();
    let n = scan.voltages.len();
    let mut fd_voltages = Vec::new();
    let mut fd_tunability = Vec::new();
    for i in 1..n.saturating_sub(1) {
        fd_voltages.push(scan.voltages[i]);
        fd_tunability.push((scan.f_mean[i + 1] - scan.f_mean[i - 1]) / (scan.voltages[i + 1] - scan.voltages[i - 1]));
    }
    let fd_r2 = if fd_voltages.len() >= 3 {
        let x: Vec<f64> = fd_voltages.iter().map(|v| (v - vertex).abs()).collect();
        let y: Vec<f64> = fd_tunability.iter().map(|d| d.abs()).collect();
        stats::linear_regression(&x, &y).2
    } else {
        f64::NAN
    };
    Ok(VoltageScan {
        scan,
        pearson,
        fd_voltages,
        fd_tunability,
        fd_r2,
        vertex,
    })
}

#[derive(Debug, Clone)]
pub struct CorrelationRow {
    pub separation: f64,
    pub peaks: Vec<f64>,
    pub mean: f64,
    pub std_err: f64,
    pub n_sweeps: usize,
}

#[derive(Debug, Clone)]
pub struct CorrelationStudy {
    pub rows: Vec<CorrelationRow>,
    /// Cross-correlation curve of the first realization per separation.
    pub curves: Vec<CorrelationCurve>,
}

/// Two copies of the first probe placed symmetrically about its axial
/// position, `separation` apart, with the simulated segment extended so
/// both see the same surroundings.
pub fn probe_pair(exp: &Experiment, separation: f64) -> Experiment {
    let mut e = exp.clone();
    let p = exp.probes[0].clone();
    let x0 = p.position.x;
    let mut a = p.clone();
    let mut b = p;
    a.position = Vec3::new(x0 - 0.5 * separation, a.position.y, a.position.z);
    b.position = Vec3::new(x0 + 0.5 * separation, b.position.y, b.position.z);
    e.probes = vec![a, b];
    e.geometry.segment_length = exp.geometry.segment_length.max(separation + exp.geometry.segment_length);
    e.geometry.segment_center_x = x0;
    e
}

pub fn correlate(cfg: &ExperimentConfig, master: u64) -> CliResult<CorrelationStudy> {
    let plan = &cfg.correlation;
    let exp = cfg.experiment();
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for (si, sep) in plan.separations_m.iter().enumerate() {
        let e = probe_pair(&exp, *sep);
        let results: Vec<CorrelationCurve> = (0..plan.realizations)
            .into_par_iter()
            .map(|r| {
                let ens_seed = derive_seed(master, "realization", r as u64);
                let ensemble = sample_ensemble(e.n_q, &e.geometry, ens_seed)?;
                let seeds = seeds_for(ens_seed, master, "pair", (si * plan.realizations + r) as u64);
                let c = run(&e, &ensemble, seeds)?;
                for t in &c.traces {
                    report(&e, t)?;
                }
                Ok(stats::cross_correlation(&c.traces[0], &c.traces[1])?)
            })
            .collect::<CliResult<_>>()?;
        let peaks: Vec<f64> = results.iter().map(|c| c.peak()).collect();
        let n = peaks.len() as f64;
        let mean = peaks.iter().sum::<f64>() / n;
        let std_err = if peaks.len() > 1 {
            (peaks.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        rows.push(CorrelationRow {
            separation: *sep,
            peaks,
            mean,
            std_err,
            n_sweeps: e.sweep.n_sweeps,
        });
        curves.push(results.into_iter().next().expect("at least one realization"));
    }
    Ok(CorrelationStudy { rows, curves })
}

#[derive(Debug, Clone)]
pub struct ScalingCell {
    pub displacement: f64,
    pub density: f64,
    /// RMS of σ_f over realizations.
    pub sigma_f: f64,
}

#[derive(Debug, Clone)]
pub struct AmplitudeScaling {
    pub cells: Vec<ScalingCell>,
    /// Exponents of d and n_q from log σ_f = c + a·log d + b·log n_q.
    pub d_exponent: f64,
    pub n_exponent: f64,
}

/// σ_f over a (d, n_q) grid. Each realization draws one ensemble seed;
/// ensembles drawn from the same seed are nested in n_q, and runs at
/// different d share their event streams.
pub fn amplitude_scaling(
    cfg: &ExperimentConfig,
    displacements: &[f64],
    densities: &[f64],
    realizations: usize,
    master: u64,
) -> CliResult<AmplitudeScaling> {
    let exp = cfg.experiment();
    let jobs: Vec<(usize, usize, usize)> = (0..displacements.len())
        .flat_map(|i| (0..densities.len()).flat_map(move |j| (0..realizations).map(move |r| (i, j, r))))
        .collect();
    let var: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, j, r)| {
            let mut e = exp.with_density(densities[j]);
            e.jump.displacement = displacements[i];
            let ens_seed = derive_seed(master, "scaling-ensemble", r as u64);
            let ensemble = sample_ensemble(e.n_q, &e.geometry, ens_seed)?;
            let seeds = seeds_for(ens_seed, master, "scaling", (j * realizations + r) as u64);
            let c = run(&e, &ensemble, seeds)?;
            Ok(report(&e, &c.traces[0])?.sigma_f.powi(2))
        })
        .collect::<CliResult<_>>()?;
    let mut cells = Vec::new();
    let (mut x1, mut x2, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (i, d) in displacements.iter().enumerate() {
        for (j, n) in densities.iter().enumerate() {
            let k = (i * densities.len() + j) * realizations;
            let s = (var[k..k + realizations].iter().sum::<f64>() / realizations as f64).sqrt();
            cells.push(ScalingCell {
                displacement: *d,
                density: *n,
                sigma_f: s,
            });
            x1.push(d.ln());
            x2.push(n.ln());
            y.push(s.ln());
        }
    }
    let (a, b) = two_factor_slopes(&x1, &x2, &y)?;
    Ok(AmplitudeScaling {
        cells,
        d_exponent: a,
        n_exponent: b,
    })
}

/// Least-squares `y = c + a·x1 + b·x2`.
fn two_factor_slopes(x1: &[f64], x2: &[f64], y: &[f64]) -> CliResult<(f64, f64)> {
    let n = y.len();
    let design = nalgebra::DMatrix::from_fn(n, 3, |r, c| match c {
        0 => 1.0,
        1 => x1[r],
        _ => x2[r],
    });
    let rhs = nalgebra::DVector::from_column_slice(y);
    let sol = design
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| CliError::quality(format!("scaling regression failed: {e}")))?;
    Ok((sol[1], sol[2]))
}

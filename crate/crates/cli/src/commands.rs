//! Subcommand implementations. Each returns a short human-readable summary
//! and leaves its artifacts plus a manifest in the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use chargenoise::dynamics::simulate as simulate_events;
use chargenoise::fitters::fit_lorentzian;
use chargenoise::io::{self, fmt_f64, SweepTable, Table};
use chargenoise::model::sample_ensemble;
use chargenoise::pipeline::{self, analyze_trace, trace_entry, CampaignSeeds, TraceReport};
use chargenoise::spectro::{campaign_windows, synthesize_campaign_with, FrequencyTrace, SweepRecord};
use chargenoise::stats::{self, EtaCalibration};
use chargenoise::Error;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::experiments;
use crate::manifest::Recorder;
use crate::{CliError, CliResult};

pub const SWEEPS_FILE: &str = "sweeps.csv";
pub const EVENTS_FILE: &str = "events.csv";
pub const CHARGES_FILE: &str = "charges.csv";
pub const CALIBRATION_FILE: &str = "calibration.csv";

/// Everything a command needs besides its own arguments.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Context {
    /// `--seed` and `--out` override the config file.
    pub fn new(cfg: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>, jobs: usize) -> Self {
        let seed = seed.unwrap_or(cfg.seed);
        let out = out
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Self { cfg, seed, out, jobs }
    }

    fn recorder(&self, command: &str) -> CliResult<Recorder> {
        let mut r = Recorder::new(&self.out, command, self.cfg.hash(), self.seed, self.jobs)?;
        r.seed("master", self.seed);
        Ok(r)
    }

    /// Header lines shared by every data file.
    fn meta(&self) -> Vec<(String, String)> {
        vec![
            ("config_sha256".into(), self.cfg.hash()),
            ("seed".into(), self.seed.to_string()),
            ("analysis_fingerprint".into(), self.cfg.experiment().analysis_fingerprint()),
        ]
    }
}

fn write_table(rec: &mut Recorder, name: &str, table: &Table) -> CliResult<()> {
    rec.write(name, &table.render())
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_else(|| "NaN".into())
}

/// sample_ensemble, then the jump trace, then the raw sweeps.
pub fn simulate(ctx: &Context) -> CliResult<String> {
    let exp = ctx.cfg.experiment();
    exp.validate()?;
    let mut rec = ctx.recorder("simulate")?;
    let seeds = CampaignSeeds::derive(&exp, ctx.seed);
    rec.seed("ensemble", seeds.ensemble);
    rec.seed("dynamics", seeds.dynamics);
    rec.seed("noise", seeds.noise);
    let meta = ctx.meta();

    let ensemble = sample_ensemble(exp.n_q, &exp.geometry, seeds.ensemble)?;
    let mut charges = Table::new(
        "charges",
        &["anchor_x_m", "anchor_y_m", "anchor_z_m", "q_c"],
        &["m", "m", "m", "C"],
    )
    .with_meta(&meta);
    charges.set("n_q_per_m3", fmt_f64(ensemble.n_q));
    charges.set("ensemble_seed", ensemble.seed);
    for c in &ensemble.charges {
        charges.push(vec![fmt_f64(c.anchor.x), fmt_f64(c.anchor.y), fmt_f64(c.anchor.z), fmt_f64(c.q)]);
    }
    write_table(&mut rec, CHARGES_FILE, &charges)?;

    let duration = exp.sweep.campaign_duration(exp.probes.len());
    let trace = simulate_events(&ensemble, &exp.illumination, &exp.jump, duration, seeds.dynamics)?;
    write_table(&mut rec, EVENTS_FILE, &io::event_trace_table(&trace, &meta))?;

    let windows = campaign_windows(&exp.probes, &ensemble, &exp.bias, exp.voltage, &exp.sweep)?;
    let mut sweeps = SweepTable::new(&windows, exp.sweep.bin_width(), exp.sweep.bins, &meta);
    synthesize_campaign_with(
        &exp.probes,
        &ensemble,
        || trace.events.iter().copied(),
        duration,
        &exp.bias,
        exp.voltage,
        &exp.sweep,
        seeds.noise,
        |j, k, r| sweeps.push(j, k, &r),
    )?;
    write_table(&mut rec, SWEEPS_FILE, sweeps.table())?;
    rec.finish()?;
    Ok(format!(
        "simulated {} charges, {} jump events over {:.1} s, {} sweeps x {} probes -> {}",
        ensemble.len(),
        trace.len(),
        duration,
        exp.sweep.n_sweeps,
        exp.probes.len(),
        ctx.out.display()
    ))
}

/// Fits every sweep; sweeps are independent so this runs on the pool.
pub fn fit_sweeps(records: &[SweepRecord], detection: chargenoise::spectro::Detection) -> CliResult<FrequencyTrace> {
    let fits: Vec<(f64, f64, chargenoise::fitters::FitFlag)> = records
        .par_iter()
        .map(|r| fit_lorentzian(r, detection).map(|f| trace_entry(&f)))
        .collect::<chargenoise::Result<_>>()?;
    let mut trace = FrequencyTrace::default();
    for (r, (f, s, flag)) in records.iter().zip(fits) {
        trace.push(r.t_start, f, s, flag);
    }
    Ok(trace)
}

/// Loads a sweeps file and returns the per-probe traces plus the file's
/// header metadata.
pub fn traces_from_sweeps(ctx: &Context, path: &Path) -> CliResult<(Vec<FrequencyTrace>, Table)> {
    let table = Table::read(path)?;
    let sweeps = io::sweeps_from(&table)?;
    let traces = sweeps
        .iter()
        .map(|s| fit_sweeps(s, ctx.cfg.sweep.detection))
        .collect::<CliResult<_>>()?;
    Ok((traces, table))
}

fn report_row(j: usize, r: &TraceReport) -> Vec<String> {
    vec![
        j.to_string(),
        r.n_sweeps.to_string(),
        fmt_f64(r.flagged_fraction),
        fmt_f64(r.f_mean),
        fmt_f64(r.sigma_f),
        opt(r.tau_value()),
        opt(r.tau.as_ref().filter(|f| f.converged).map(|f| f.std_err("tau"))),
        opt(r.eta()),
    ]
}

/// Fits a sweeps file and writes traces, statistics and plot-ready curves.
pub fn analyze(ctx: &Context, input: Option<&Path>) -> CliResult<String> {
    let input = input.map(Path::to_path_buf).unwrap_or_else(|| ctx.out.join(SWEEPS_FILE));
    let (traces, source) = traces_from_sweeps(ctx, &input)?;
    let mut rec = ctx.recorder("analyze")?;
    let mut meta = ctx.meta();
    // provenance follows the data, not the config used to analyse it
    for key in ["config_sha256", "seed", "analysis_fingerprint"] {
        if let Some(v) = source.meta(key) {
            meta.retain(|(k, _)| k != key);
            meta.push((format!("source_{key}"), v.to_string()));
        }
    }
    meta.push(("analysis_fingerprint".into(), ctx.cfg.experiment().analysis_fingerprint()));
    let bytes = std::fs::read(&input)?;
    meta.push(("input_sha256".into(), pipeline::sha256_hex(&bytes)));

    let settings = &ctx.cfg.analysis;
    let mut report = Table::new(
        "analysis-report",
        &["probe", "n_sweeps", "flagged_fraction", "f_mean_hz", "sigma_f_hz", "tau_s", "tau_err_s", "eta"],
        &["", "", "", "Hz", "Hz", "s", "s", ""],
    )
    .with_meta(&meta);
    let mut summary = String::new();
    let mut degraded = Vec::new();
    for (j, trace) in traces.iter().enumerate() {
        write_table(&mut rec, &format!("trace_p{j}.csv"), &io::frequency_trace_table(trace, &meta))?;
        let flagged = trace.flagged_fraction();
        let r = match analyze_trace(trace, settings) {
            Ok(r) => r,
            // too few good fits for any statistic; still a quality failure, not bad input
            Err(_) if flagged > settings.max_flagged_fraction => {
                degraded.push(format!("probe {j}: {:.1}% of fits flagged", 100.0 * flagged));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        if let Some(c) = &r.autocorrelation {
            write_table(&mut rec, &format!("autocorr_p{j}.csv"), &io::correlation_table(c, "autocorrelation", &meta))?;
        }
        if let Some(h) = &r.histogram {
            write_table(
                &mut rec,
                &format!("histogram_p{j}.csv"),
                &io::histogram_table(h, r.non_gaussianity.as_ref(), &meta),
            )?;
        }
        if j > 0 {
            if let Ok(c) = stats::cross_correlation(&traces[0], trace) {
                write_table(
                    &mut rec,
                    &format!("cross_p0_p{j}.csv"),
                    &io::correlation_table(&c, "cross-correlation", &meta),
                )?;
            }
        }
        report.push(report_row(j, &r));
        let _ = writeln!(
            summary,
            "probe {j}: {} sweeps, {:.1}% flagged, sigma_f = {:.3} MHz, tau = {} s, eta = {}",
            r.n_sweeps,
            100.0 * r.flagged_fraction,
            r.sigma_f / 1e6,
            opt(r.tau_value()),
            opt(r.eta())
        );
        if r.degraded(settings) {
            degraded.push(format!("probe {j}: {:.1}% of fits flagged", 100.0 * r.flagged_fraction));
        }
    }
    write_table(&mut rec, "report.csv", &report)?;
    rec.finish()?;
    if !degraded.is_empty() {
        return Err(CliError::quality(format!("degraded data: {}", degraded.join("; "))));
    }
    Ok(summary.trim_end().to_string())
}

pub fn sweep_power(ctx: &Context) -> CliResult<String> {
    let mut rec = ctx.recorder("sweep-power")?;
    let result = experiments::sweep_power(&ctx.cfg, ctx.seed)?;
    let mut t = Table::new(
        "power-sweep",
        &["power_photons_per_s", "tau_s", "tau_err_s", "sigma_f_hz", "flagged_fraction"],
        &["1/s", "s", "s", "Hz", ""],
    )
    .with_meta(&ctx.meta());
    if let Some((s, e)) = result.slope {
        t.set("tau_power_slope", fmt_f64(s));
        t.set("tau_power_slope_err", fmt_f64(e));
    }
    t.set("sigma_f_spread", fmt_f64(result.sigma_spread));
    for r in &result.rows {
        t.push(vec![
            fmt_f64(r.power),
            fmt_f64(r.tau),
            fmt_f64(r.tau_err),
            fmt_f64(r.sigma_f),
            fmt_f64(r.flagged_fraction),
        ]);
    }
    write_table(&mut rec, "power_sweep.csv", &t)?;
    rec.finish()?;
    let mut s = String::new();
    for r in &result.rows {
        let _ = writeln!(s, "P = {:e} /s: tau = {:.4} s, sigma_f = {:.3} MHz", r.power, r.tau, r.sigma_f / 1e6);
    }
    match result.slope {
        Some((m, e)) => {
            let _ = write!(s, "slope d ln tau / d ln P = {m:.3} +- {e:.3}; ");
        }
        None => s.push_str("single power, no slope; "),
    }
    let _ = write!(s, "sigma_f spread {:.1}%", 100.0 * result.sigma_spread);
    Ok(s)
}

pub fn scan_focus(ctx: &Context) -> CliResult<String> {
    let mut rec = ctx.recorder("scan-focus")?;
    let r = experiments::scan_focus(&ctx.cfg, ctx.seed)?;
    let mut t = Table::new(
        "focus-scan",
        &["offset_m", "tau_s", "normalized_rate", "gaussian_fit"],
        &["m", "s", "", ""],
    )
    .with_meta(&ctx.meta());
    t.set("tau_reference_s", fmt_f64(r.tau_reference));
    t.set("fwhm_m", fmt_f64(r.fwhm));
    t.set("peak_normalized_rate", fmt_f64(r.peak));
    t.set("expected_peak", fmt_f64(r.expected_peak));
    for i in 0..r.offsets.len() {
        let g = 1.0 + chargenoise::fitters::gaussian_value(&r.profile, r.offsets[i]);
        t.push(vec![fmt_f64(r.offsets[i]), fmt_f64(r.tau[i]), fmt_f64(r.normalized_rate[i]), fmt_f64(g)]);
    }
    write_table(&mut rec, "focus_scan.csv", &t)?;
    rec.finish()?;
    Ok(format!(
        "FWHM = {:.3} um, peak normalized rate = {:.2} (additive expectation {:.2}), reference tau = {:.3} s",
        r.fwhm * 1e6,
        r.peak,
        r.expected_peak,
        r.tau_reference
    ))
}

fn voltage_table(ctx: &Context, r: &experiments::VoltageScan, kind: &str) -> Table {
    let mut t = Table::new(
        kind,
        &["voltage_v", "f_mean_hz", "sigma_f_hz", "df_dv_fit_hz_per_v", "df_dv_fd_hz_per_v"],
        &["V", "Hz", "Hz", "Hz/V", "Hz/V"],
    )
    .with_meta(&ctx.meta());
    t.set("pearson_sigma_vs_abs_df_dv", fmt_f64(r.pearson));
    t.set("fd_abs_tunability_r2", fmt_f64(r.fd_r2));
    t.set("vertex_v", fmt_f64(r.vertex));
    for i in 0..r.scan.voltages.len() {
        let v = r.scan.voltages[i];
        let fd = r
            .fd_voltages
            .iter()
            .position(|x| *x == v)
            .map(|k| r.fd_tunability[k]);
        t.push(vec![
            fmt_f64(v),
            fmt_f64(r.scan.f_mean[i]),
            fmt_f64(r.scan.sigma_f[i]),
            fmt_f64(r.scan.df_dv[i]),
            opt(fd),
        ]);
    }
    t
}

/// Voltage scan with charges, and the same scan without them as a control.
pub fn scan_voltage(ctx: &Context) -> CliResult<String> {
    let mut rec = ctx.recorder("scan-voltage")?;
    let r = experiments::scan_voltage(&ctx.cfg, ctx.seed)?;
    write_table(&mut rec, "voltage_scan.csv", &voltage_table(ctx, &r, "voltage-scan"))?;
    let mut control_cfg = ctx.cfg.clone();
    control_cfg.charge_density_per_m3 = 0.0;
    let c = experiments::scan_voltage(&control_cfg, ctx.seed)?;
    write_table(&mut rec, "voltage_scan_control.csv", &voltage_table(ctx, &c, "voltage-scan-control"))?;
    rec.finish()?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(format!(
        "with charges: Pearson(sigma_f, |df/dV|) = {:.3}, R^2(|df/dV| vs |V - V*|) = {:.3}, mean sigma_f = {:.2} MHz\n\
         charge-free control: Pearson = {:.3}, mean sigma_f = {:.2} MHz",
        r.pearson,
        r.fd_r2,
        mean(&r.scan.sigma_f) / 1e6,
        c.pearson,
        mean(&c.scan.sigma_f) / 1e6
    ))
}

pub fn correlate(ctx: &Context) -> CliResult<String> {
    let mut rec = ctx.recorder("correlate")?;
    let study = experiments::correlate(&ctx.cfg, ctx.seed)?;
    let meta = ctx.meta();
    let mut t = Table::new(
        "probe-correlation",
        &["separation_m", "peak_mean", "peak_std_err", "realizations", "independence_threshold"],
        &["m", "", "", "", ""],
    )
    .with_meta(&meta);
    let mut s = String::new();
    for (row, curve) in study.rows.iter().zip(&study.curves) {
        let threshold = 3.0 / (row.n_sweeps as f64).sqrt();
        t.push(vec![
            fmt_f64(row.separation),
            fmt_f64(row.mean),
            fmt_f64(row.std_err),
            row.peaks.len().to_string(),
            fmt_f64(threshold),
        ]);
        let nm = (row.separation * 1e9).round() as i64;
        write_table(
            &mut rec,
            &format!("cross_{nm}nm.csv"),
            &io::correlation_table(curve, "cross-correlation, first realization", &meta),
        )?;
        let _ = writeln!(
            s,
            "separation {nm} nm: peak correlation {:.3} +- {:.3} over {} realizations",
            row.mean,
            row.std_err,
            row.peaks.len()
        );
    }
    write_table(&mut rec, "correlation.csv", &t)?;
    rec.finish()?;
    Ok(s.trim_end().to_string())
}

fn calibration_matches(t: &Table, ctx: &Context, cal: &EtaCalibration) -> bool {
    let plan = &ctx.cfg.calibration;
    t.meta("fingerprint") == Some(ctx.cfg.experiment().analysis_fingerprint().as_str())
        && t.meta("seed") == Some(ctx.seed.to_string().as_str())
        && cal.replicates == plan.replicates
        && cal.n_q == plan.densities_per_m3
}

/// Loads a cached calibration that matches the current config and seed,
/// or runs and stores a new one. Returns the calibration and whether it
/// came from the cache.
pub fn load_or_calibrate(ctx: &Context, rec: &mut Recorder) -> CliResult<(EtaCalibration, bool)> {
    let path = ctx.out.join(CALIBRATION_FILE);
    if path.exists() {
        let t = Table::read(&path)?;
        let cal = io::calibration_from(&t)?;
        if calibration_matches(&t, ctx, &cal) {
            return Ok((cal, true));
        }
    }
    let plan = &ctx.cfg.calibration;
    let cal = pipeline::calibrate(&ctx.cfg.experiment(), &plan.densities_per_m3, plan.replicates, ctx.seed)?;
    let meta = vec![
        ("config_sha256".to_string(), ctx.cfg.hash()),
        ("seed".to_string(), ctx.seed.to_string()),
    ];
    write_table(rec, CALIBRATION_FILE, &io::calibration_table(&cal, &meta))?;
    Ok((cal, false))
}

fn describe_calibration(cal: &EtaCalibration) -> String {
    let mut s = format!("charge-free baseline eta = {:.2}\n", cal.baseline);
    for i in 0..cal.n_q.len() {
        let _ = writeln!(s, "n_q = {:e} m^-3: eta = {:.2} +- {:.2}", cal.n_q[i], cal.eta_mean[i], cal.eta_std[i]);
    }
    let _ = write!(s, "monotone decreasing: {}", cal.monotone);
    s
}

pub fn calibrate(ctx: &Context) -> CliResult<String> {
    let mut rec = ctx.recorder("calibrate")?;
    let (cal, cached) = load_or_calibrate(ctx, &mut rec)?;
    if cached {
        let bytes = std::fs::read(ctx.out.join(CALIBRATION_FILE))?;
        rec.record(CALIBRATION_FILE, &bytes);
    }
    rec.finish()?;
    let origin = if cached { "cached calibration" } else { "new calibration" };
    Ok(format!("{origin}\n{}", describe_calibration(&cal)))
}

/// Where the η to invert comes from.
#[derive(Debug, Clone)]
pub enum InferSource {
    Eta(f64),
    /// A sweeps or frequency-trace file; probe 0 is used for sweeps.
    Data(PathBuf),
}

/// η and analysis fingerprint of a data file.
fn eta_of_file(ctx: &Context, path: &Path) -> CliResult<(f64, String)> {
    let table = Table::read(path)?;
    let fingerprint = table
        .meta("analysis_fingerprint")
        .or_else(|| table.meta("source_analysis_fingerprint"))
        .ok_or_else(|| CliError::data(format!("{}: no analysis_fingerprint header", path.display())))?
        .to_string();
    let trace = match table.kind.as_str() {
        io::SWEEPS => {
            let sweeps = io::sweeps_from(&table)?;
            fit_sweeps(&sweeps[0], ctx.cfg.sweep.detection)?
        }
        io::FREQUENCY_TRACE => io::frequency_trace_from(&table)?,
        other => {
            return Err(CliError::data(format!(
                "{}: cannot infer from a {other:?} file",
                path.display()
            )))
        }
    };
    Ok((stats::trace_eta(&trace)?, fingerprint))
}

pub fn infer(ctx: &Context, source: &InferSource, calibration: Option<&Path>) -> CliResult<String> {
    let mut rec = ctx.recorder("infer")?;
    let cal = match calibration {
        Some(p) => io::calibration_from(&Table::read(p)?)?,
        None => load_or_calibrate(ctx, &mut rec)?.0,
    };
    let eta = match source {
        InferSource::Eta(e) => *e,
        InferSource::Data(p) => {
            let (eta, fingerprint) = eta_of_file(ctx, p)?;
            if fingerprint != cal.fingerprint {
                return Err(Error::FingerprintMismatch {
                    calibration: cal.fingerprint.clone(),
                    data: fingerprint,
                }
                .into());
            }
            eta
        }
    };
    let est = stats::infer_density(eta, &cal).map_err(|e| match e {
        Error::InvalidParameter(m) => CliError::quality(m),
        other => other.into(),
    })?;
    let mut t = Table::new(
        "density-estimate",
        &["eta", "n_q_per_m3", "n_q_low_per_m3", "n_q_high_per_m3"],
        &["", "m^-3", "m^-3", "m^-3"],
    )
    .with_meta(&ctx.meta());
    t.set("calibration_fingerprint", &cal.fingerprint);
    t.set("baseline_eta", fmt_f64(cal.baseline));
    t.push(vec![fmt_f64(eta), fmt_f64(est.n_q), fmt_f64(est.low), fmt_f64(est.high)]);
    write_table(&mut rec, "inference.csv", &t)?;
    rec.finish()?;
    Ok(format!(
        "eta = {eta:.2} -> n_q = {:.3e} m^-3 (interval {:.3e} .. {:.3e})",
        est.n_q, est.low, est.high
    ))
}

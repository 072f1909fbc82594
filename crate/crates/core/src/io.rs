//! Self-describing columnar text artifacts.
//!
//! ```text
//! # kind: frequency-trace
//! # config_sha256: 3f9a...
//! # seed: 42
//! # units: s,Hz,Hz,
//! t_s,f_c_hz,sigma_fit_hz,flag
//! 1e-1,4.02000001e14,4.1e6,good
//! ```
//!
//! Comment lines carry `key: value` metadata, the first non-comment line
//! names the columns and every following line is a record. Floats are
//! written in shortest round-trip form, so reading a file back reproduces
//! the values bit for bit. Files load with any CSV reader that skips `#`
//! comments.

use std::fmt::Write as _;
use std::path::Path;

use crate::dynamics::{EventTrace, JumpEvent};
use crate::error::{Error, Result};
use crate::fitters::FitFlag;
use crate::model::Vec3;
use crate::spectro::{bin_frequency, FrequencyTrace, SweepRecord};
use crate::stats::{CorrelationCurve, EtaCalibration, NonGaussianity, StepHistogram};

/// Formats a float so that parsing it back gives the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub units: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Source line of each row, 1-based; empty for tables built in memory.
    pub row_lines: Vec<usize>,
    pub source: String,
}

impl Table {
    pub fn new(kind: &str, columns: &[&str], units: &[&str]) -> Self {
        assert_eq!(columns.len(), units.len());
        Self {
            kind: kind.to_string(),
            columns: columns.iter().map(|s| s.to_string()).collect(),
            units: units.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        }
    }

    pub fn with_meta(mut self, meta: &[(String, String)]) -> Self {
        self.meta.extend_from_slice(meta);
        self
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# kind: {}", self.kind);
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k}: {v}");
        }
        let _ = writeln!(s, "# units: {}", self.units.join(","));
        let _ = writeln!(s, "{}", self.columns.join(","));
        for row in &self.rows {
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            file: source.to_string(),
            line,
            message,
        };
        let mut t = Table {
            source: source.to_string(),
            ..Default::default()
        };
        let mut have_columns = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim_end_matches('\r');
            if let Some(c) = line.strip_prefix('#') {
                if have_columns {
                    return Err(err(line_no, "comment after the column header".into()));
                }
                let (k, v) = c
                    .split_once(':')
                    .ok_or_else(|| err(line_no, format!("expected `# key: value`, got {line:?}")))?;
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "kind" => t.kind = v.to_string(),
                    "units" => t.units = v.split(',').map(str::to_string).collect(),
                    _ => t.meta.push((k.to_string(), v.to_string())),
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<String> = line.split(',').map(|c| c.trim().to_string()).collect();
            if !have_columns {
                t.columns = cells;
                have_columns = true;
                if !t.units.is_empty() && t.units.len() != t.columns.len() {
                    return Err(err(
                        line_no,
                        format!("{} units for {} columns", t.units.len(), t.columns.len()),
                    ));
                }
                continue;
            }
            if cells.len() != t.columns.len() {
                return Err(err(
                    line_no,
                    format!("expected {} fields, found {}", t.columns.len(), cells.len()),
                ));
            }
            t.rows.push(cells);
            t.row_lines.push(line_no);
        }
        if t.kind.is_empty() {
            return Err(err(1, "missing `# kind:` header".into()));
        }
        if !have_columns {
            return Err(err(text.lines().count().max(1), "missing column header".into()));
        }
        Ok(t)
    }

    fn parse_error(&self, row: usize, message: String) -> Error {
        Error::Parse {
            file: self.source.clone(),
            line: self.row_lines.get(row).copied().unwrap_or(0),
            message,
        }
    }

    fn header_error(&self, message: String) -> Error {
        Error::Parse {
            file: self.source.clone(),
            line: 1,
            message,
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(self.header_error(format!("expected a {kind} file, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .meta(key)
            .ok_or_else(|| self.header_error(format!("missing header `{key}`")))?;
        v.parse()
            .map_err(|_| self.header_error(format!("header `{key}` has invalid value {v:?}")))
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| self.header_error(format!("missing column `{name}`")))
    }

    pub fn cell<T: std::str::FromStr>(&self, row: usize, col: usize) -> Result<T> {
        let v = &self.rows[row][col];
        v.parse().map_err(|_| {
            self.parse_error(row, format!("column `{}`: cannot parse {v:?}", self.columns[col]))
        })
    }

    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        (0..self.rows.len()).map(|r| self.cell(r, c)).collect()
    }
}

pub const EVENT_TRACE: &str = "event-trace";
pub const SWEEPS: &str = "sweeps";
pub const FREQUENCY_TRACE: &str = "frequency-trace";
pub const CORRELATION: &str = "correlation";
pub const STEP_HISTOGRAM: &str = "step-histogram";
pub const ETA_CALIBRATION: &str = "eta-calibration";

pub fn event_trace_table(trace: &EventTrace, meta: &[(String, String)]) -> Table {
    let mut t = Table::new(EVENT_TRACE, &["t_s", "charge", "x_m", "y_m", "z_m"], &["s", "", "m", "m", "m"])
        .with_meta(meta);
    t.set("trace_seed", trace.seed);
    t.set("duration_s", fmt_f64(trace.duration));
    t.set("n_charges", trace.n_charges);
    t.set("displacement_m", fmt_f64(trace.displacement));
    for e in &trace.events {
        t.push(vec![
            fmt_f64(e.t),
            e.charge.to_string(),
            fmt_f64(e.position.x),
            fmt_f64(e.position.y),
            fmt_f64(e.position.z),
        ]);
    }
    t
}

pub fn event_trace_from(t: &Table) -> Result<EventTrace> {
    t.expect_kind(EVENT_TRACE)?;
    let n_charges: usize = t.require("n_charges")?;
    let duration: f64 = t.require("duration_s")?;
    let cols = [
        t.column("t_s")?,
        t.column("charge")?,
        t.column("x_m")?,
        t.column("y_m")?,
        t.column("z_m")?,
    ];
    let mut events = Vec::with_capacity(t.rows.len());
    let mut last = 0.0;
    for r in 0..t.rows.len() {
        let ev = JumpEvent {
            t: t.cell(r, cols[0])?,
            charge: t.cell(r, cols[1])?,
            position: Vec3::new(t.cell(r, cols[2])?, t.cell(r, cols[3])?, t.cell(r, cols[4])?),
        };
        if ev.charge >= n_charges {
            return Err(t.parse_error(r, format!("charge index {} out of range 0..{n_charges}", ev.charge)));
        }
        if !(ev.t >= last && ev.t <= duration) {
            return Err(t.parse_error(r, format!("event time {} out of order or past {duration} s", ev.t)));
        }
        last = ev.t;
        events.push(ev);
    }
    Ok(EventTrace {
        events,
        duration,
        seed: t.require("trace_seed")?,
        n_charges,
        displacement: t.require("displacement_m")?,
    })
}

pub fn write_event_trace(path: &Path, trace: &EventTrace, meta: &[(String, String)]) -> Result<()> {
    event_trace_table(trace, meta).write(path)
}

pub fn read_event_trace(path: &Path) -> Result<EventTrace> {
    event_trace_from(&Table::read(path)?)
}

/// Incremental writer for sweep records, one row per sweep.
///
/// Bin frequencies are not stored: the header records each probe's window
/// start and the bin width, from which the reader rebuilds them exactly.
pub struct SweepTable {
    table: Table,
    window_starts: Vec<f64>,
    bin_width: f64,
    bins: usize,
}

impl SweepTable {
    pub fn new(window_starts: &[f64], bin_width: f64, bins: usize, meta: &[(String, String)]) -> Self {
        let mut columns = vec!["probe".to_string(), "sweep".to_string(), "t_start_s".to_string()];
        let mut units = vec![String::new(), String::new(), "s".to_string()];
        for b in 0..bins {
            columns.push(format!("c{b}"));
            units.push("photons".to_string());
        }
        let mut table = Table {
            kind: SWEEPS.to_string(),
            columns,
            units,
            ..Default::default()
        }
        .with_meta(meta);
        table.set("bins", bins);
        table.set("bin_width_hz", fmt_f64(bin_width));
        table.set("n_probes", window_starts.len());
        for (j, f) in window_starts.iter().enumerate() {
            table.set(&format!("window_start_hz_{j}"), fmt_f64(*f));
        }
        Self {
            table,
            window_starts: window_starts.to_vec(),
            bin_width,
            bins,
        }
    }

    pub fn push(&mut self, probe: usize, sweep: usize, rec: &SweepRecord) -> Result<()> {
        if rec.counts.len() != self.bins {
            return Err(Error::invalid(format!("sweep has {} bins, table has {}", rec.counts.len(), self.bins)));
        }
        let f_lo = self.window_starts[probe];
        if rec
            .freqs
            .iter()
            .enumerate()
            .any(|(b, f)| *f != bin_frequency(f_lo, self.bin_width, b))
        {
            return Err(Error::invalid(format!("sweep {sweep} of probe {probe} is off the declared grid")));
        }
        let mut row = Vec::with_capacity(3 + self.bins);
        row.push(probe.to_string());
        row.push(sweep.to_string());
        row.push(fmt_f64(rec.t_start));
        row.extend(rec.counts.iter().map(|c| fmt_f64(*c)));
        self.table.push(row);
        Ok(())
    }

    pub fn table(&self) -> &Table {
        &self.table
    }
}

/// Sweeps per probe, in file order.
pub fn sweeps_from(t: &Table) -> Result<Vec<Vec<SweepRecord>>> {
    t.expect_kind(SWEEPS)?;
    let bins: usize = t.require("bins")?;
    let bin_width: f64 = t.require("bin_width_hz")?;
    let n_probes: usize = t.require("n_probes")?;
    let starts: Vec<f64> = (0..n_probes)
        .map(|j| t.require(&format!("window_start_hz_{j}")))
        .collect::<Result<_>>()?;
    if t.columns.len() != 3 + bins {
        return Err(t.header_error(format!("{} columns for {bins} bins", t.columns.len())));
    }
    let mut out: Vec<Vec<SweepRecord>> = vec![Vec::new(); n_probes];
    for r in 0..t.rows.len() {
        let j: usize = t.cell(r, 0)?;
        let k: usize = t.cell(r, 1)?;
        if j >= n_probes {
            return Err(t.parse_error(r, format!("probe {j} out of range 0..{n_probes}")));
        }
        if k != out[j].len() {
            return Err(t.parse_error(r, format!("expected sweep {} of probe {j}, found {k}", out[j].len())));
        }
        let counts = (0..bins).map(|b| t.cell::<f64>(r, 3 + b)).collect::<Result<Vec<_>>>()?;
        if counts.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(t.parse_error(r, "counts must be finite and >= 0".into()));
        }
        out[j].push(SweepRecord {
            t_start: t.cell(r, 2)?,
            freqs: (0..bins).map(|b| bin_frequency(starts[j], bin_width, b)).collect(),
            counts,
        });
    }
    Ok(out)
}

pub fn read_sweeps(path: &Path) -> Result<Vec<Vec<SweepRecord>>> {
    sweeps_from(&Table::read(path)?)
}

pub fn frequency_trace_table(trace: &FrequencyTrace, meta: &[(String, String)]) -> Table {
    let mut t = Table::new(
        FREQUENCY_TRACE,
        &["t_s", "f_c_hz", "sigma_fit_hz", "flag"],
        &["s", "Hz", "Hz", ""],
    )
    .with_meta(meta);
    for i in 0..trace.len() {
        t.push(vec![
            fmt_f64(trace.times[i]),
            fmt_f64(trace.f_c[i]),
            fmt_f64(trace.sigma_fit[i]),
            trace.flags[i].as_str().to_string(),
        ]);
    }
    t
}

pub fn frequency_trace_from(t: &Table) -> Result<FrequencyTrace> {
    t.expect_kind(FREQUENCY_TRACE)?;
    let cols = [t.column("t_s")?, t.column("f_c_hz")?, t.column("sigma_fit_hz")?, t.column("flag")?];
    let mut out = FrequencyTrace::default();
    for r in 0..t.rows.len() {
        let flag_text = &t.rows[r][cols[3]];
        let flag = FitFlag::parse(flag_text).ok_or_else(|| t.parse_error(r, format!("unknown flag {flag_text:?}")))?;
        out.push(t.cell(r, cols[0])?, t.cell(r, cols[1])?, t.cell(r, cols[2])?, flag);
    }
    out.validate().map_err(|e| t.header_error(e.to_string()))?;
    Ok(out)
}

pub fn correlation_table(curve: &CorrelationCurve, kind_note: &str, meta: &[(String, String)]) -> Table {
    let mut t = Table::new(CORRELATION, &["lag_s", "value", "n_pairs"], &["s", "", ""]).with_meta(meta);
    t.set("estimator", kind_note);
    for i in 0..curve.lags.len() {
        t.push(vec![fmt_f64(curve.lags[i]), fmt_f64(curve.values[i]), curve.n_pairs[i].to_string()]);
    }
    t
}

pub fn correlation_from(t: &Table) -> Result<CorrelationCurve> {
    t.expect_kind(CORRELATION)?;
    let c = t.column("n_pairs")?;
    Ok(CorrelationCurve {
        lags: t.f64_column("lag_s")?,
        values: t.f64_column("value")?,
        n_pairs: (0..t.rows.len()).map(|r| t.cell(r, c)).collect::<Result<_>>()?,
    })
}

/// Histogram with its Gaussian fit and regularised ratio per bin.
pub fn histogram_table(hist: &StepHistogram, ng: Option<&NonGaussianity>, meta: &[(String, String)]) -> Table {
    let mut t = Table::new(
        STEP_HISTOGRAM,
        &["bin_lo_hz", "bin_hi_hz", "center_hz", "count", "gaussian", "ratio"],
        &["Hz", "Hz", "Hz", "", "", ""],
    )
    .with_meta(meta);
    t.set("n_steps", hist.n_steps);
    t.set("bin_width_hz", fmt_f64(hist.bin_width));
    t.set("step_std_hz", fmt_f64(hist.step_std));
    if let Some(ng) = ng {
        t.set("eta", fmt_f64(ng.eta));
        t.set("gaussian_sigma_hz", fmt_f64(ng.gaussian.get("sigma")));
    }
    let centers = hist.centers();
    for b in 0..hist.counts.len() {
        let (g, r) = match ng {
            Some(ng) => (fmt_f64(ng.expected[b]), fmt_f64(ng.ratio[b])),
            None => ("NaN".into(), "NaN".into()),
        };
        t.push(vec![
            fmt_f64(hist.bin_edges[b]),
            fmt_f64(hist.bin_edges[b + 1]),
            fmt_f64(centers[b]),
            hist.counts[b].to_string(),
            g,
            r,
        ]);
    }
    t
}

pub fn histogram_from(t: &Table) -> Result<StepHistogram> {
    t.expect_kind(STEP_HISTOGRAM)?;
    let lo = t.f64_column("bin_lo_hz")?;
    let hi = t.f64_column("bin_hi_hz")?;
    let c = t.column("count")?;
    let counts: Vec<u64> = (0..t.rows.len()).map(|r| t.cell(r, c)).collect::<Result<_>>()?;
    let mut bin_edges = lo;
    if let Some(last) = hi.last() {
        bin_edges.push(*last);
    }
    let hist = StepHistogram {
        bin_edges,
        counts,
        n_steps: t.require("n_steps")?,
        bin_width: t.require("bin_width_hz")?,
        step_std: t.require("step_std_hz")?,
    };
    if hist.counts.iter().sum::<u64>() as usize != hist.n_steps {
        return Err(t.header_error("bin counts do not add up to n_steps".into()));
    }
    Ok(hist)
}

pub fn calibration_table(cal: &EtaCalibration, meta: &[(String, String)]) -> Table {
    let mut t = Table::new(ETA_CALIBRATION, &["n_q_per_m3", "eta_mean", "eta_std"], &["m^-3", "", ""])
        .with_meta(meta);
    t.set("fingerprint", &cal.fingerprint);
    t.set("baseline_eta", fmt_f64(cal.baseline));
    t.set("replicates", cal.replicates);
    t.set("monotone", cal.monotone);
    for i in 0..cal.n_q.len() {
        t.push(vec![fmt_f64(cal.n_q[i]), fmt_f64(cal.eta_mean[i]), fmt_f64(cal.eta_std[i])]);
    }
    t
}

pub fn calibration_from(t: &Table) -> Result<EtaCalibration> {
    t.expect_kind(ETA_CALIBRATION)?;
    Ok(EtaCalibration {
        n_q: t.f64_column("n_q_per_m3")?,
        eta_mean: t.f64_column("eta_mean")?,
        eta_std: t.f64_column("eta_std")?,
        replicates: t.require("replicates")?,
        baseline: t.require("baseline_eta")?,
        fingerprint: t.require("fingerprint")?,
        monotone: t.require("monotone")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> Vec<(String, String)> {
        vec![("config_sha256".into(), "ab12".into()), ("seed".into(), "7".into())]
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let text = "# kind: frequency-trace\n# units: s,Hz,Hz,\nt_s,f_c_hz,sigma_fit_hz,flag\n0e0,1e0,1e0,good\n1e-1,oops,1e0,good\n";
        let t = Table::parse(text, "trace.csv").unwrap();
        match frequency_trace_from(&t) {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!(file, "trace.csv");
                assert_eq!(line, 5);
            }
            other => panic!("{other:?}"),
        }
        let short = "# kind: frequency-trace\nt_s,f_c_hz,sigma_fit_hz,flag\n0e0,1e0\n";
        assert!(matches!(Table::parse(short, "x"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(Table::parse("a,b\n", "x"), Err(Error::Parse { .. })));
        let t = Table::parse("# kind: sweeps\na\n", "x").unwrap();
        assert!(frequency_trace_from(&t).is_err());
    }

    #[test]
    fn frequency_trace_roundtrip() {
        let mut tr = FrequencyTrace::default();
        tr.push(0.1, 4.02e14 + 0.3, 4.1e6, FitFlag::Good);
        tr.push(0.2, f64::NAN, f64::NAN, FitFlag::NoFeature);
        tr.push(0.3, 4.02e14 - 1.7e7, 3.9e6, FitFlag::Edge);
        let text = frequency_trace_table(&tr, &meta()).render();
        let back = frequency_trace_from(&Table::parse(&text, "t").unwrap()).unwrap();
        assert_eq!(back.times, tr.times);
        assert_eq!(back.flags, tr.flags);
        assert!(back.f_c[1].is_nan());
        assert_eq!(back.f_c[2], tr.f_c[2]);
    }

    #[test]
    fn sweeps_roundtrip() {
        let starts = [4.02e14 - 5e8, 4.02e14 + 1.234567e6 - 5e8];
        let w = 1e7;
        let mut table = SweepTable::new(&starts, w, 4, &meta());
        let mut recs = vec![Vec::new(), Vec::new()];
        for k in 0..3 {
            for (j, s) in starts.iter().enumerate() {
                let r = SweepRecord {
                    t_start: k as f64 * 0.1 + j as f64 * 0.05,
                    freqs: (0..4).map(|b| bin_frequency(*s, w, b)).collect(),
                    counts: vec![700.0, 699.5, 12.0, 0.0],
                };
                table.push(j, k, &r).unwrap();
                recs[j].push(r);
            }
        }
        let back = sweeps_from(&Table::parse(&table.table().render(), "s").unwrap()).unwrap();
        assert_eq!(back, recs);
        let bad = SweepRecord {
            t_start: 0.0,
            freqs: vec![0.0; 4],
            counts: vec![0.0; 4],
        };
        assert!(table.push(0, 3, &bad).is_err());
    }

    #[test]
    fn calibration_roundtrip() {
        let cal = EtaCalibration {
            n_q: vec![1e21, 1e22, 1e23],
            eta_mean: vec![9.5, 4.25, 1.125],
            eta_std: vec![1.0, 0.5, 0.25],
            replicates: 3,
            baseline: 0.75,
            fingerprint: "deadbeef".into(),
            monotone: true,
        };
        let text = calibration_table(&cal, &meta()).render();
        assert_eq!(calibration_from(&Table::parse(&text, "c").unwrap()).unwrap(), cal);
    }

    proptest! {
        #[test]
        fn event_traces_roundtrip_bit_exactly(
            raw in prop::collection::vec((0.0f64..1.0, 0usize..5, any::<f64>(), -1e-6f64..1e-6, any::<u32>()), 0..40),
            seed in any::<u64>(),
        ) {
            let mut ts: Vec<f64> = raw.iter().map(|r| r.0 * 10.0).collect();
            ts.sort_by(f64::total_cmp);
            let events: Vec<JumpEvent> = raw
                .iter()
                .zip(&ts)
                .map(|(r, t)| JumpEvent {
                    t: *t,
                    charge: r.1,
                    position: Vec3::new(if r.2.is_finite() { r.2 } else { 0.0 }, r.3, f64::from(r.4) * 1e-15),
                })
                .collect();
            let trace = EventTrace { events, duration: 10.0, seed, n_charges: 5, displacement: 2e-8 };
            let text = event_trace_table(&trace, &meta()).render();
            let back = event_trace_from(&Table::parse(&text, "e").unwrap()).unwrap();
            prop_assert_eq!(back.events.len(), trace.events.len());
            for (a, b) in back.events.iter().zip(&trace.events) {
                prop_assert_eq!(a.t.to_bits(), b.t.to_bits());
                prop_assert_eq!(a.charge, b.charge);
                prop_assert_eq!(a.position.x.to_bits(), b.position.x.to_bits());
                prop_assert_eq!(a.position.y.to_bits(), b.position.y.to_bits());
                prop_assert_eq!(a.position.z.to_bits(), b.position.z.to_bits());
            }
            prop_assert_eq!(back.seed, seed);
            prop_assert_eq!(back.duration, 10.0);
        }
    }
}

//! Trace, plot and summary files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::CliError;
use crate::runner::RunOutcome;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Csv,
    Svg,
    Both,
}

/// `t` with nine significant digits.
pub fn format_time(t: f64) -> String {
    if t == 0.0 || !t.is_finite() {
        return format!("{t}");
    }
    let mag = t.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    format!("{t:.decimals$}")
}

/// Column names: `t`, the state, every probe channel, then `int_<name>` for
/// each running integral.
pub fn csv_header(out: &RunOutcome) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(out.state_names.iter().cloned());
    h.extend(out.trace.outputs.keys().cloned());
    h.extend(out.trace.accumulators.keys().map(|k| format!("int_{k}")));
    h
}

/// CSV bytes of the whole trace, one row per sample.
pub fn csv_bytes(out: &RunOutcome) -> Result<Vec<u8>, CliError> {
    let io = |e: csv::Error| CliError::Io {
        path: "csv buffer".into(),
        source: std::io::Error::other(e),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(csv_header(out)).map_err(io)?;
    let tr = &out.trace;
    let mut row = Vec::new();
    for k in 0..tr.len() {
        row.clear();
        row.push(format_time(tr.times[k]));
        row.extend(tr.states[k].iter().map(|v| v.to_string()));
        row.extend(tr.outputs.values().map(|s| s[k].to_string()));
        row.extend(tr.accumulators.values().map(|s| s[k].to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.into_inner().map_err(|e| CliError::Io {
        path: "csv buffer".into(),
        source: e.into_error(),
    })
}

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 56.0;
const MAX_POINTS: usize = 2000;

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / 4.0;
    let p = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * p)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * p);
    let mut v = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while v <= hi + 1e-9 * step {
        out.push(if v.abs() < 1e-12 * step { 0.0 } else { v });
        v += step;
    }
    out
}

fn panel(s: &mut String, top: f64, title: &str, times: &[f64], values: Option<&[f64]>) {
    let (x0, y0, w, h) = (MARGIN, top + 24.0, PANEL_W - MARGIN - 16.0, PANEL_H - 56.0);
    let _ = writeln!(
        s,
        r#"<text x="{x0}" y="{:.1}" font-size="14">{title}</text>"#,
        top + 16.0
    );
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="black" stroke-width="0.8"/>"#
    );
    let Some(values) = values else {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12">no data</text>"#,
            x0 + w / 2.0 - 20.0,
            y0 + h / 2.0
        );
        return;
    };
    let finite = || values.iter().copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = (
        finite().fold(f64::INFINITY, f64::min),
        finite().fold(f64::NEG_INFINITY, f64::max),
    );
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 * (1.0 + lo.abs()) {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let (t0, t1) = (times[0], times[times.len() - 1].max(times[0] + f64::MIN_POSITIVE));
    let sx = |t: f64| x0 + (t - t0) / (t1 - t0) * w;
    let sy = |v: f64| y0 + h - (v - lo) / (hi - lo) * h;
    for t in ticks(t0, t1) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
            sx(t),
            y0 + h + 14.0,
            t
        );
    }
    for v in ticks(lo, hi) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{:.3}</text>"#,
            x0 - 4.0,
            sy(v) + 3.0,
            v
        );
        let _ = writeln!(
            s,
            r##"<line x1="{x0}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd" stroke-width="0.5"/>"##,
            x0 + w,
            y = sy(v)
        );
    }
    let stride = times.len().div_ceil(MAX_POINTS).max(1);
    let mut pts = String::new();
    for k in (0..times.len()).step_by(stride).chain(std::iter::once(times.len() - 1)) {
        if values[k].is_finite() {
            let _ = write!(pts, "{:.2},{:.2} ", sx(times[k]), sy(values[k]));
        }
    }
    let _ = writeln!(
        s,
        r##"<polyline fill="none" stroke="#1f4e9c" stroke-width="1.2" points="{}"/>"##,
        pts.trim_end()
    );
}

/// Four stacked panels: `x1`, `x2`, `Δθ̂` and `u` against time.
pub fn svg(out: &RunOutcome) -> String {
    let tr = &out.trace;
    let x = |i: usize| (i < out.plant_dim).then(|| tr.state_component(i));
    let (x1, x2) = (x(0), x(1));
    let panels: [(&str, Option<&[f64]>); 4] = [
        ("x1", x1.as_deref()),
        ("x2", x2.as_deref()),
        ("delta_theta", tr.output("delta_theta").ok()),
        ("u", tr.output("u").ok()),
    ];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{}" font-family="sans-serif">"#,
        4.0 * PANEL_H
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if !tr.is_empty() {
        for (i, (title, values)) in panels.into_iter().enumerate() {
            panel(&mut s, i as f64 * PANEL_H, title, &tr.times, values);
        }
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<PathBuf, CliError> {
    std::fs::write(&path, bytes).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(path)
}

/// Writes `<id>.csv` and/or `<id>.svg`, plus `<id>.summary.txt` and the
/// scenario as `<id>.toml`. Returns the written paths.
pub fn emit(out: &RunOutcome, dir: &Path, format: Format) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let id = &out.scenario.id;
    let mut written = Vec::new();
    if matches!(format, Format::Csv | Format::Both) {
        written.push(write(dir.join(format!("{id}.csv")), &csv_bytes(out)?)?);
    }
    if matches!(format, Format::Svg | Format::Both) {
        written.push(write(dir.join(format!("{id}.svg")), svg(out).as_bytes())?);
    }
    written.push(write(dir.join(format!("{id}.summary.txt")), out.summary().as_bytes())?);
    written.push(write(
        dir.join(format!("{id}.toml")),
        out.scenario.to_toml().as_bytes(),
    )?);
    Ok(written)
}

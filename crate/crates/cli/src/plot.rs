//! Single-series SVG line charts from a metrics CSV column.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("no values in column `{0}`")]
    Empty(String),
    #[error("moving-average window must be at least 1")]
    Window,
    #[error("line {line}: `{value}` is not a number")]
    Value { line: usize, value: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

/// Non-blank values of `column`, plotted against `step` when that column
/// exists and against the row index otherwise.
pub fn read_series(path: &Path, column: &str) -> Result<Series, PlotError> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| PlotError::MissingColumn(column.to_string()))?;
    let step = headers.iter().position(|h| h == "step");
    let num = |s: &str, line: usize| {
        s.parse::<f64>().map_err(|_| PlotError::Value {
            line,
            value: s.to_string(),
        })
    };
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let v = rec.get(col).unwrap_or("");
        if v.is_empty() {
            continue;
        }
        ys.push(num(v, line)?);
        xs.push(match step {
            Some(s) => num(rec.get(s).unwrap_or(""), line)?,
            None => i as f64,
        });
    }
    if ys.is_empty() {
        return Err(PlotError::Empty(column.to_string()));
    }
    Ok(Series { xs, ys })
}

/// Trailing mean over the last `window` points (fewer at the start).
pub fn moving_average(ys: &[f64], window: usize) -> Result<Vec<f64>, PlotError> {
    if window == 0 {
        return Err(PlotError::Window);
    }
    if window == 1 {
        return Ok(ys.to_vec());
    }
    let mut sum = 0.0;
    Ok(ys
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            sum += y;
            if i >= window {
                sum -= ys[i - window];
            }
            sum / (i + 1).min(window) as f64
        })
        .collect())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Data range widened so a constant series still gets a visible band.
fn span(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        let pad = (lo.abs() * 0.05).max(1.0);
        (lo - pad, hi + pad)
    } else {
        (lo, hi)
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

pub fn render_svg(s: &Series, x_label: &str, y_label: &str) -> String {
    let (x0, x1) = span(&s.xs);
    let (y0, y1) = span(&s.ys);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(o, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        o,
        r#"<g stroke="black" stroke-width="1"><line x1="{LEFT}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{b}"/></g>"#,
        b = H - BOTTOM,
        r = W - RIGHT
    );
    let _ = writeln!(o, r#"<g font-family="sans-serif" font-size="11" fill="black">"#);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            px(xv),
            H - BOTTOM + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            o,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        o,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"#,
        LEFT + pw / 2.0,
        H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        o,
        r#"<text x="16" y="{:.2}" text-anchor="middle" font-size="13" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    let _ = writeln!(o, "</g>");
    let pts: Vec<String> = s
        .xs
        .iter()
        .zip(&s.ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
        .collect();
    let _ = writeln!(
        o,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
        pts.join(" ")
    );
    o.push_str("</svg>\n");
    o
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e5 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Read `column` from `csv`, smooth it, and write the chart to `out`.
pub fn plot(csv: &Path, column: &str, window: usize, out: &Path) -> Result<(), PlotError> {
    let s = read_series(csv, column)?;
    let ys = moving_average(&s.ys, window)?;
    let label = if window > 1 {
        format!("{column} (moving average, {window})")
    } else {
        column.to_string()
    };
    std::fs::write(out, render_svg(&Series { xs: s.xs, ys }, "step", &label))?;
    Ok(())
}

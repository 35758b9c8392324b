//! `report`: one SVG 1.1 chart per result CSV plus a plain-text summary.
//!
//! x is ε on a log axis, y the metric. Rows with finite ε become polylines
//! with a ±1 std band, one per (method, R, p̃); rows with ε = inf become
//! dashed horizontal reference lines.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, Result};
use crate::results::{read_results, ResultRow, METHOD_MECHANISM};

pub const SUMMARY_FILE: &str = "summary.txt";

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];
const REFERENCE_COLORS: [&str; 3] = ["#555555", "#000000", "#7f7f7f"];

struct Series {
    label: String,
    points: Vec<(f64, f64, f64)>,
}

fn series_label(r: &ResultRow) -> String {
    if r.method == METHOD_MECHANISM {
        format!("{} R={} p\u{303}={}", r.method, r.radius, r.p_tilde)
    } else {
        r.method.clone()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Groups rows into series in order of first appearance, sorted by ε.
fn split(rows: &[ResultRow]) -> (Vec<Series>, Vec<(String, f64)>) {
    let mut series: Vec<Series> = Vec::new();
    let mut refs = Vec::new();
    for r in rows {
        if r.is_reference() {
            refs.push((r.method.clone(), r.mean));
            continue;
        }
        let label = series_label(r);
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((r.epsilon, r.mean, r.std)),
            None => series.push(Series {
                label,
                points: vec![(r.epsilon, r.mean, r.std)],
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    (series, refs)
}

fn padded(lo: f64, hi: f64, frac: f64, floor: f64) -> (f64, f64) {
    if hi > lo {
        let pad = (hi - lo) * frac;
        (lo - pad, hi + pad)
    } else {
        let pad = (lo.abs() * frac).max(floor);
        (lo - pad, hi + pad)
    }
}

/// Renders one chart. Output depends only on `rows` and `title`.
pub fn render_svg(rows: &[ResultRow], title: &str) -> String {
    let (series, refs) = split(rows);
    let metric = rows
        .first()
        .map_or("metric".to_string(), |r| format!("{:?}", r.metric_name).to_lowercase());

    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0.log10()))
        .collect();
    let (x_lo, x_hi) = match (xs.iter().copied().reduce(f64::min), xs.iter().copied().reduce(f64::max)) {
        (Some(a), Some(b)) => padded(a, b, 0.04, 0.5),
        _ => (-1.0, 2.0),
    };
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().flat_map(|p| [p.1 - p.2, p.1 + p.2]))
        .chain(refs.iter().map(|r| r.1))
        .collect();
    let (y_lo, y_hi) = match (ys.iter().copied().reduce(f64::min), ys.iter().copied().reduce(f64::max)) {
        (Some(a), Some(b)) => padded(a, b, 0.06, 0.05),
        _ => (0.0, 1.0),
    };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |lx: f64| LEFT + (lx - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| TOP + (y_hi - y) / (y_hi - y_lo) * plot_h;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#
    );

    // x ticks at the swept budgets.
    let mut ticks: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for e in &ticks {
        let x = sx(e.log10());
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{e}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 19.0
        );
    }
    for k in 0..=4 {
        let y = y_lo + (y_hi - y_lo) * k as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{y:.4}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">ε (log scale)</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(&metric)
    );

    let mut legend = Vec::new();
    for (i, (name, y)) in refs.iter().enumerate() {
        let color = REFERENCE_COLORS[i % REFERENCE_COLORS.len()];
        let py = sy(*y);
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="{color}" stroke-dasharray="6 4"/>"#,
            LEFT + plot_w
        );
        legend.push((format!("{name} ({y:.4})"), color, true));
    }
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper: Vec<String> = ser
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.0.log10()), sy(p.1 + p.2)))
            .collect();
        let lower: Vec<String> = ser
            .points
            .iter()
            .rev()
            .map(|p| format!("{:.2},{:.2}", sx(p.0.log10()), sy(p.1 - p.2)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = ser
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.0.log10()), sy(p.1)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        for p in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                sx(p.0.log10()),
                sy(p.1)
            );
        }
        legend.push((ser.label.clone(), color, false));
    }
    for (i, (label, color, dashed)) in legend.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = WIDTH - RIGHT + 12.0;
        let dash = if *dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
            x + 22.0,
            x + 28.0,
            y + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Aligned text table of every row, one block per file.
pub fn summary_table(files: &[(PathBuf, Vec<ResultRow>)]) -> String {
    let mut s = String::new();
    for (path, rows) in files {
        let _ = writeln!(s, "{}", path.display());
        let _ = writeln!(
            s,
            "  {:<10} {:>8} {:>6} {:>5} {:>9} {:>12} {:>12} {:>6}",
            "method", "epsilon", "R", "p~", "metric", "mean", "std", "n"
        );
        for r in rows {
            let _ = writeln!(
                s,
                "  {:<10} {:>8} {:>6} {:>5} {:>9} {:>12.6} {:>12.6} {:>6}",
                r.method,
                r.epsilon,
                r.radius,
                r.p_tilde,
                format!("{:?}", r.metric_name).to_lowercase(),
                r.mean,
                r.std,
                r.n_models
            );
        }
    }
    s
}

/// Writes `<stem>.svg` per input and `summary.txt`; returns the SVG paths.
pub fn report(csvs: &[PathBuf], out: &Path) -> Result<(Vec<PathBuf>, String)> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut loaded = Vec::new();
    let mut written = Vec::new();
    for csv in csvs {
        let rows = read_results(csv)?;
        let stem = csv
            .file_stem()
            .map_or_else(|| "results".to_string(), |s| s.to_string_lossy().into_owned());
        // Same-named inputs from different directories get their parent as a prefix.
        let name = if csvs.iter().filter(|c| c.file_stem() == csv.file_stem()).count() > 1 {
            let parent = csv
                .parent()
                .and_then(|p| p.file_name())
                .map_or_else(String::new, |p| format!("{}-", p.to_string_lossy()));
            format!("{parent}{stem}")
        } else {
            stem
        };
        let path = out.join(format!("{name}.svg"));
        std::fs::write(&path, render_svg(&rows, &name)).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
        loaded.push((csv.clone(), rows));
    }
    let table = summary_table(&loaded);
    let sp = out.join(SUMMARY_FILE);
    std::fs::write(&sp, &table).map_err(|e| CliError::io(&sp, e))?;
    Ok((written, table))
}

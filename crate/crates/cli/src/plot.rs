use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::report::{loss, metric_files, read_metrics, Record, LOSS_COLUMNS};

pub const LOSS_SVG: &str = "losses.svg";
pub const RETURN_SVG: &str = "returns.svg";

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads every metrics file of `run_dir` and writes the loss and return charts
/// next to them. Output bytes depend only on the metrics.
pub fn plot_run(run_dir: &Path) -> Result<Vec<PathBuf>, String> {
    let files = metric_files(run_dir);
    if files.is_empty() {
        return Err(format!(
            "no metrics in {}: expected one or more {}/<group>-seed<N>.jsonl files written by train, adapt, eval, ablate or dataset-modes",
            run_dir.display(),
            crate::report::METRICS_DIR
        ));
    }
    let mut per_file = Vec::new();
    for f in &files {
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        per_file.push((stem, read_metrics(f)?));
    }
    let out_dir = run_dir.join("plots");
    std::fs::create_dir_all(&out_dir).map_err(|e| e.to_string())?;
    let losses = out_dir.join(LOSS_SVG);
    std::fs::write(&losses, line_chart("training losses", "iteration", "loss", &loss_series(&per_file))).map_err(|e| e.to_string())?;
    let returns = out_dir.join(RETURN_SVG);
    std::fs::write(&returns, bar_chart("normalized return", &return_bars(&per_file))).map_err(|e| e.to_string())?;
    Ok(vec![losses, returns])
}

fn loss_series(per_file: &[(String, Vec<Record>)]) -> Vec<Series> {
    let mut out = Vec::new();
    for (stem, recs) in per_file {
        let phase = if recs.iter().any(|r| r.metrics.phase == "train") { "train" } else { "adapt" };
        for name in LOSS_COLUMNS {
            let points: Vec<(f64, f64)> = recs
                .iter()
                .filter(|r| r.metrics.phase == phase)
                .filter_map(|r| loss(&r.metrics, name).map(|v| (r.metrics.iter as f64, v)))
                .collect();
            if !points.is_empty() {
                out.push(Series {
                    label: format!("{stem} {name}"),
                    points,
                });
            }
        }
    }
    out
}

/// Mean evaluation return per (group, split); files without evaluations
/// contribute their last adaptation return.
fn return_bars(per_file: &[(String, Vec<Record>)]) -> Vec<(String, f64)> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (stem, recs) in per_file {
        let evals: Vec<&Record> = recs.iter().filter(|r| r.metrics.phase == "eval").collect();
        if evals.is_empty() {
            if let Some(v) = recs.iter().rev().find_map(|r| r.metrics.normalized_return) {
                acc.entry(stem.clone()).or_default().push(v);
            }
        }
        for r in evals {
            if let Some(v) = r.metrics.normalized_return {
                let key = format!("{} {}", r.group, r.split.as_deref().unwrap_or(""));
                acc.entry(key.trim().to_string()).or_default().push(v);
            }
        }
    }
    acc.into_iter().map(|(k, xs)| (k, xs.iter().sum::<f64>() / xs.len() as f64)).collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    s
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

fn axes(s: &mut String, x: (f64, f64), y: (f64, f64), x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(s, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let py = y0 + (y1 - y0) * f;
        let px = x0 + (x1 - x0) * f;
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#, x0 - 6.0, py + 4.0, y.0 + (y.1 - y.0) * f);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{:.0}</text>"#, y0 + 16.0, x.0 + (x.1 - x.0) * f);
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut s = header(title);
    let pts = series.iter().flat_map(|se| se.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut xl, mut xh, mut yl, mut yh) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        (xl, xh, yl, yh) = (xl.min(x), xh.max(x), yl.min(y), yh.max(y));
    }
    if !xl.is_finite() {
        (xl, xh, yl, yh) = (0.0, 1.0, 0.0, 1.0);
    }
    let (x, y) = (span(xl, xh), span(yl, yh));
    axes(&mut s, x, y, x_label, y_label);
    let px = |v: f64| LEFT + (W - RIGHT - LEFT) * (v - x.0) / (x.1 - x.0);
    let py = |v: f64| H - BOTTOM - (H - BOTTOM - TOP) * (v - y.0) / (y.1 - y.0);
    for (i, se) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = se
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .enumerate()
            .map(|(k, &(a, b))| format!("{}{:.2} {:.2}", if k == 0 { "M" } else { "L" }, px(a), py(b)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
        let ly = TOP + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="10" height="3" fill="{color}"/>"#, W - RIGHT + 10.0, ly + 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#, W - RIGHT + 24.0, ly + 9.0, escape(&se.label));
    }
    s.push_str("</svg>\n");
    s
}

pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    if bars.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no returns recorded</text>"#, W / 2.0, H / 2.0);
        s.push_str("</svg>\n");
        return s;
    }
    let lo = bars.iter().map(|b| b.1).fold(0.0, f64::min);
    let hi = bars.iter().map(|b| b.1).fold(0.0, f64::max);
    let y = span(lo, hi);
    axes(&mut s, (0.0, bars.len() as f64), y, "", "normalized return");
    let py = |v: f64| H - BOTTOM - (H - BOTTOM - TOP) * (v - y.0) / (y.1 - y.0);
    let slot = (W - RIGHT - LEFT) / bars.len() as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let (top, base) = (py(v.max(0.0)), py(v.min(0.0)));
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}"/>"#, slot * 0.7, base - top);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="10">{v:.1}</text>"#, x + slot * 0.35, top - 4.0);
        let ly = TOP + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{color}"/>"#, W - RIGHT + 10.0, ly);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-size="10">{}</text>"#, W - RIGHT + 24.0, ly + 9.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

//! Trade-off curves and race distribution bars as SVG plus text tables.
//!
//! The tables are the record; the SVGs only present them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fairsite::model::{N_RACE, RACE_GROUPS};
use fairsite::reward::MetricReport;
use fairsite::training::TradeoffPoint;
use fairsite::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::record::sidecar;

/// Race mix written next to an eval report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceTable {
    pub groups: Vec<String>,
    pub selected: [f64; N_RACE],
    pub candidates: [f64; N_RACE],
}

impl RaceTable {
    pub fn new(selected: [f64; N_RACE], candidates: [f64; N_RACE]) -> Self {
        Self {
            groups: RACE_GROUPS.iter().map(|s| s.to_string()).collect(),
            selected,
            candidates,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub lambda: f64,
    pub relative_error: f64,
    pub entropy: f64,
    pub race: Option<[f64; N_RACE]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<Point>,
    /// Race mix over all candidate sites, when known.
    pub candidates: Option<[f64; N_RACE]>,
}

fn malformed(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Validation(format!("{}: {reason}", path.display()))
}

/// Reads a sweep table (JSON array of points) or a single eval report.
pub fn load_series(path: &Path, label: String) -> Result<Series> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(path, e))?;
    if value.is_array() {
        let table: Vec<TradeoffPoint> = serde_json::from_value(value).map_err(|e| malformed(path, e))?;
        if table.is_empty() {
            return Err(malformed(path, "empty table"));
        }
        let points = table
            .iter()
            .map(|p| Point {
                lambda: p.report.lambda,
                relative_error: p.report.relative_error_mean,
                entropy: p.report.entropy_mean,
                race: Some(p.selected_race),
            })
            .collect();
        return Ok(Series { label, points, candidates: None });
    }
    let report: MetricReport = serde_json::from_value(value).map_err(|e| malformed(path, e))?;
    let race_path = sidecar(path, "race.json");
    let race: Option<RaceTable> = if race_path.exists() {
        let t = std::fs::read_to_string(&race_path)?;
        Some(serde_json::from_str(&t).map_err(|e| malformed(&race_path, e))?)
    } else {
        None
    };
    Ok(Series {
        label,
        points: vec![Point {
            lambda: report.lambda,
            relative_error: report.relative_error_mean,
            entropy: report.entropy_mean,
            race: race.as_ref().map(|r| r.selected),
        }],
        candidates: race.map(|r| r.candidates),
    })
}

fn check_series(series: &[Series]) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.points.is_empty()) {
        return Err(Error::Validation("nothing to plot".into()));
    }
    let finite = series
        .iter()
        .flat_map(|s| &s.points)
        .all(|p| p.lambda.is_finite() && p.relative_error.is_finite() && p.entropy.is_finite());
    if !finite {
        return Err(Error::Validation("non-finite value in table".into()));
    }
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];
const RACE_COLORS: [&str; N_RACE] = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Padded axis range that never collapses to a point.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-3);
    (lo - 0.1 * span, hi + 0.1 * span)
}

/// Relative error (y) against entropy (x), one line per series, each point
/// annotated with its λ.
pub fn tradeoff_svg(series: &[Series]) -> Result<String> {
    check_series(series)?;
    let (w, h) = (640.0, 440.0);
    let (left, right, top, bottom) = (70.0, 160.0, 30.0, 60.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let pts = || series.iter().flat_map(|s| &s.points);
    let (x0, x1) = range(pts().map(|p| p.entropy));
    let (y0, y1) = range(pts().map(|p| p.relative_error));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            svg,
            r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{xv:.3}</text>"#,
            top + ph,
            top + ph + 5.0,
            top + ph + 20.0
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{py:.1}" x2="{left}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.3}</text>"#,
            left - 5.0,
            left - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Entropy of enrolled population</text>"#,
        left + pw / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">Relative error</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.entropy), sy(p.relative_error)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        for p in &s.points {
            let (px, py) = (sx(p.entropy), sy(p.relative_error));
            let _ = writeln!(
                svg,
                r#"<circle cx="{px:.2}" cy="{py:.2}" r="4" fill="{color}"/><text x="{:.2}" y="{:.2}" fill="{color}">λ={}</text>"#,
                px + 6.0,
                py - 6.0,
                p.lambda
            );
        }
        let ly = top + 10.0 + 20.0 * si as f64;
        let lx = w - right + 15.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            ly - 10.0,
            lx + 18.0,
            ly,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn tradeoff_table(series: &[Series]) -> Result<String> {
    check_series(series)?;
    let mut out = String::from("series\tlambda\trelative_error_mean\tentropy_mean\n");
    for s in series {
        for p in &s.points {
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}", s.label, p.lambda, p.relative_error, p.entropy);
        }
    }
    Ok(out)
}

/// Rows of the race bar chart: (row label, distribution).
fn race_rows(series: &[Series]) -> Vec<(String, [f64; N_RACE])> {
    let mut rows = Vec::new();
    for s in series {
        if let Some(c) = s.candidates {
            rows.push((format!("{} candidates", s.label), c));
        }
        for p in &s.points {
            if let Some(r) = p.race {
                rows.push((format!("{} λ={}", s.label, p.lambda), r));
            }
        }
    }
    rows
}

/// Percent of enrolled patients per group, one row per series point.
pub fn race_table(series: &[Series]) -> Option<String> {
    let rows = race_rows(series);
    if rows.is_empty() {
        return None;
    }
    let mut out = String::from("row");
    for g in RACE_GROUPS {
        let _ = write!(out, "\t{g}");
    }
    out.push('\n');
    for (label, r) in rows {
        out.push_str(&label);
        for v in r {
            let _ = write!(out, "\t{:.2}", 100.0 * v);
        }
        out.push('\n');
    }
    Some(out)
}

/// Stacked horizontal bars of the race mix per row.
pub fn race_svg(series: &[Series]) -> Option<String> {
    let rows = race_rows(series);
    if rows.is_empty() {
        return None;
    }
    let (left, bar_w, bar_h, gap, top) = (200.0, 400.0, 22.0, 8.0, 20.0);
    let w = left + bar_w + 20.0;
    let h = top + rows.len() as f64 * (bar_h + gap) + 50.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (i, (label, r)) in rows.iter().enumerate() {
        let y = top + i as f64 * (bar_h + gap);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 8.0,
            y + bar_h / 2.0 + 4.0,
            escape(label)
        );
        let mut x = left;
        for (g, v) in r.iter().enumerate() {
            let bw = v * bar_w;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{y:.1}" width="{bw:.2}" height="{bar_h}" fill="{}"/>"#,
                RACE_COLORS[g]
            );
            x += bw;
        }
    }
    let ly = h - 20.0;
    for (g, name) in RACE_GROUPS.iter().enumerate() {
        let lx = 20.0 + g as f64 * 95.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{ly:.1}">{name}</text>"#,
            ly - 10.0,
            RACE_COLORS[g],
            lx + 16.0
        );
    }
    svg.push_str("</svg>\n");
    Some(svg)
}

/// Writes `<out>` (trade-off SVG), `<out>.txt`, and when race data is
/// present `<out>.race.svg` and `<out>.race.txt`. Returns the written paths.
pub fn write_plots(series: &[Series], out: &Path) -> Result<Vec<PathBuf>> {
    let svg = tradeoff_svg(series)?;
    let table = tradeoff_table(series)?;
    let mut written = Vec::new();
    std::fs::write(out, svg)?;
    written.push(out.to_path_buf());
    let p = sidecar(out, "txt");
    std::fs::write(&p, table)?;
    written.push(p);
    if let (Some(svg), Some(table)) = (race_svg(series), race_table(series)) {
        let p = sidecar(out, "race.svg");
        std::fs::write(&p, svg)?;
        written.push(p);
        let p = sidecar(out, "race.txt");
        std::fs::write(&p, table)?;
        written.push(p);
    }
    Ok(written)
}

//! CSV and SVG report writers.
//!
//! | file               | columns                                              |
//! |--------------------|------------------------------------------------------|
//! | `accuracy.csv`     | `mode,g,correct,total,accuracy`                      |
//! | `mse.csv`          | `mode,g,class,label,mse,frames`                      |
//! | `gain_trace.csv`   | `mode,sequence,step,mean_gain,update_norm`           |
//! | `kernel_match.csv` | `horizon,size,count,median,q25,q75,p10,p90`          |
//!
//! Every CSV starts with a `# residprop-csv v1` line.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{match_statistics, MatchStats};
use crate::recognize::{AccuracyRow, HorizonMatches, Mode, MseRow};

pub const CSV_SCHEMA: &str = "# residprop-csv v1\n";

/// The header is written even when there are no rows.
fn to_csv<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(CSV_SCHEMA.as_bytes().to_vec());
    w.write_record(header).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn accuracy_csv(rows: &[AccuracyRow]) -> Result<String> {
    to_csv(&["mode", "g", "correct", "total", "accuracy"], rows)
}

#[derive(Serialize)]
struct LabelledMse<'a> {
    mode: Mode,
    g: f64,
    class: usize,
    label: &'a str,
    mse: f64,
    frames: usize,
}

pub fn mse_csv(rows: &[MseRow], labels: &[String]) -> Result<String> {
    let header = ["mode", "g", "class", "label", "mse", "frames"];
    to_csv(&header, rows.iter().map(|r| LabelledMse {
        mode: r.mode,
        g: r.g,
        class: r.class,
        label: labels.get(r.class).map_or("", String::as_str),
        mse: r.mse,
        frames: r.frames,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GainRow {
    pub mode: Mode,
    pub sequence: String,
    pub step: usize,
    pub mean_gain: f64,
    pub update_norm: f64,
}

pub fn gain_csv(rows: &[GainRow]) -> Result<String> {
    to_csv(&["mode", "sequence", "step", "mean_gain", "update_norm"], rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchRow {
    pub horizon: usize,
    pub size: usize,
    pub count: usize,
    #[serde(flatten)]
    pub stats: MatchStats,
}

/// Box statistics per horizon; horizons without any score are left out.
pub fn match_rows(size: usize, matches: &[HorizonMatches]) -> Result<Vec<MatchRow>> {
    matches
        .iter()
        .filter(|m| !m.scores.is_empty())
        .map(|m| {
            Ok(MatchRow {
                horizon: m.horizon,
                size,
                count: m.scores.len(),
                stats: match_statistics(&m.scores)?,
            })
        })
        .collect()
}

pub fn match_csv(rows: &[MatchRow]) -> Result<String> {
    // csv cannot serialize flattened structs, so the rows are spelled out
    #[derive(Serialize)]
    struct Flat {
        horizon: usize,
        size: usize,
        count: usize,
        median: f64,
        q25: f64,
        q75: f64,
        p10: f64,
        p90: f64,
    }
    let header = ["horizon", "size", "count", "median", "q25", "q75", "p10", "p90"];
    to_csv(&header, rows.iter().map(|r| Flat {
        horizon: r.horizon,
        size: r.size,
        count: r.count,
        median: r.stats.median,
        q25: r.stats.q25,
        q75: r.stats.q75,
        p10: r.stats.p10,
        p90: r.stats.p90,
    }))
}

/// Plain numeric grid, one line per row.
pub fn grid_csv(values: &[f64], width: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Line chart of `(x, y)` series on a fixed `[0,1]×[y_min,y_max]` frame.
pub fn line_chart_svg(title: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h, m) = (480.0, 320.0, 48.0);
    let ys = series.iter().flat_map(|s| s.1.iter().map(|p| p.1));
    let (mut lo, mut hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let px = |x: f64| m + x * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - lo) / (hi - lo) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {} L{} {} M{m} {} L{m} {m}" stroke="black" fill="none"/>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="11">g</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" font-size="11" transform="rotate(-90 12 {})">{}</text>"#, h / 2.0, h / 2.0, escape(y_label));
    for (label, y) in [(format!("{lo:.3}"), lo), (format!("{hi:.3}"), hi)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{label}</text>"#, m - 4.0, py(y) + 3.0);
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, path.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            w - m + 4.0,
            m + 14.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Accuracy curves, one series per mode.
pub fn accuracy_svg(rows: &[AccuracyRow]) -> String {
    let mut modes: Vec<Mode> = rows.iter().map(|r| r.mode).collect();
    modes.dedup();
    let series: Vec<(String, Vec<(f64, f64)>)> = modes
        .iter()
        .map(|&m| {
            let pts = rows.iter().filter(|r| r.mode == m).map(|r| (r.g, r.accuracy)).collect();
            (m.name().to_string(), pts)
        })
        .collect();
    line_chart_svg("accuracy vs observation ratio", "accuracy", &series)
}

pub fn write_file(path: &std::path::Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

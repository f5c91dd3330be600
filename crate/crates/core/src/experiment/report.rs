use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io_util::{sha256_hex, write_atomic};

/// One measured row: an arm (method / setting) under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub arm: String,
    pub seed: Option<u64>,
    pub metrics: BTreeMap<String, f64>,
}

/// A full-scale number printed next to a desk-scale result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub arm: String,
    pub metric: String,
    pub value: f64,
    pub source: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ReportRow>,
    /// Per-arm means over seeds.
    pub summary: Vec<ReportRow>,
    pub references: Vec<Reference>,
    /// Raw per-sample vectors backing the metrics (scores, confidences).
    pub raw: BTreeMap<String, Vec<f64>>,
    /// History checksums of every trained model, keyed by arm/seed.
    pub histories: BTreeMap<String, String>,
}

impl Report {
    pub fn new(name: impl Into<String>, config_hash: impl Into<String>, seeds: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            config_hash: config_hash.into(),
            seeds,
            ..Self::default()
        }
    }

    pub fn push(&mut self, arm: impl Into<String>, seed: Option<u64>, metrics: impl IntoIterator<Item = (String, f64)>) {
        self.rows.push(ReportRow {
            arm: arm.into(),
            seed,
            metrics: metrics.into_iter().collect(),
        });
    }

    /// Recompute `summary` as per-arm means, arms in first-seen order.
    pub fn summarize(&mut self) {
        let mut arms: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !arms.contains(&r.arm.as_str()) {
                arms.push(&r.arm);
            }
        }
        self.summary = arms
            .iter()
            .map(|arm| {
                let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.arm == *arm).collect();
                let keys: BTreeSet<&String> = rows.iter().flat_map(|r| r.metrics.keys()).collect();
                let metrics = keys
                    .into_iter()
                    .map(|k| {
                        let vals: Vec<f64> = rows.iter().filter_map(|r| r.metrics.get(k)).copied().collect();
                        (k.clone(), vals.iter().sum::<f64>() / vals.len() as f64)
                    })
                    .collect();
                ReportRow {
                    arm: arm.to_string(),
                    seed: None,
                    metrics,
                }
            })
            .collect();
    }

    /// Mean of `metric` for `arm` from the summary.
    pub fn mean(&self, arm: &str, metric: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|r| r.arm == arm)
            .and_then(|r| r.metrics.get(metric))
            .copied()
    }

    /// SHA-256 of the report's JSON form.
    pub fn checksum(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("report serializes").as_bytes())
    }

    /// CSV of `rows` then `summary` (seed column `mean`).
    pub fn to_csv(&self) -> String {
        let keys: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.metrics.keys()).collect();
        let mut out = String::from("arm,seed");
        for k in &keys {
            let _ = write!(out, ",{k}");
        }
        out.push('\n');
        for r in self.rows.iter().chain(&self.summary) {
            let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
            let _ = write!(out, "{},{}", r.arm, seed);
            for k in &keys {
                match r.metrics.get(*k) {
                    Some(v) => {
                        let _ = write!(out, ",{v}");
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Human-readable table; references are marked as not being targets.
    pub fn render(&self) -> String {
        let mut out = format!("{} (config {})\n", self.name, &self.config_hash[..self.config_hash.len().min(12)]);
        for r in &self.summary {
            let _ = write!(out, "  {:<24}", r.arm);
            for (k, v) in &r.metrics {
                let _ = write!(out, " {k}={v:.4}");
            }
            out.push('\n');
        }
        if !self.references.is_empty() {
            out.push_str("  full-scale references (reference only, not a target):\n");
            for r in &self.references {
                let _ = writeln!(out, "    {:<22} {}={} [{}]", r.arm, r.metric, r.value, r.source);
            }
        }
        out
    }

    /// Write `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let json = dir.join("report.json");
        let csv = dir.join("report.csv");
        write_atomic(&json, serde_json::to_string_pretty(self)?.as_bytes())?;
        write_atomic(&csv, self.to_csv().as_bytes())?;
        Ok(vec![json, csv])
    }
}

/// Written once, atomically, when a run finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    pub artifacts: Vec<PathBuf>,
    pub report_checksum: String,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// A series for [`line_plot_svg`].
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Minimal standalone SVG line chart.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>], x_ticks: &[String]) -> String {
    let (w, h, m) = (640.0, 400.0, 60.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        xml_escape(title),
        h - m,
        w - m,
        h - m,
        h - m,
        w / 2.0,
        h - 15.0,
        xml_escape(x_label),
        h / 2.0,
        h / 2.0,
        xml_escape(y_label),
    );
    for (i, t) in x_ticks.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>", sx(x0 + i as f64), h - m + 16.0, xml_escape(t));
    }
    for frac in [0.0, 0.5, 1.0] {
        let y = y0 + frac * (y1 - y0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>", m - 4.0, sy(y) + 4.0, y);
    }
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let dash = if ser.dashed { " stroke-dasharray=\"5,4\"" } else { "" };
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash} points=\"{}\"/>", path.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>", w - m - 120.0, m + 16.0 * i as f64, xml_escape(ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

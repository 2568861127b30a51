//! Classification metrics, confusion matrices, SVG charts and the JSON
//! summary report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, r: usize) -> u64 {
        self.counts[r].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    pub fn max(&self) -> u64 {
        self.counts.iter().flatten().copied().max().unwrap_or(0)
    }

    /// CSV with header `pred_0..pred_{K-1}`; row `r` holds the counts for true class `r`.
    pub fn to_csv(&self) -> String {
        let header: Vec<String> = (0..self.k).map(|c| format!("pred_{c}")).collect();
        let mut s = header.join(",");
        s.push('\n');
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::input(format!(
            "label length mismatch: {} true vs {} predicted",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::input(format!(
                "label pair ({t}, {p}) out of range for {k} classes"
            )));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub accuracy: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub support: Vec<u64>,
    /// Classes that were never predicted (precision set to 0).
    pub zero_precision_classes: Vec<usize>,
    /// Classes with no true samples (recall set to 0, excluded from macro means).
    pub zero_support_classes: Vec<usize>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Accuracy, per-class and macro precision/recall/F1. Zero denominators give
/// 0 and are flagged; macro means run over classes with nonzero support.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsBundle> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::input("metrics of an empty confusion matrix"));
    }
    let k = cm.k;
    let mut b = MetricsBundle {
        accuracy: cm.trace() as f64 / total as f64,
        precision: vec![0.0; k],
        recall: vec![0.0; k],
        f1: vec![0.0; k],
        macro_precision: 0.0,
        macro_recall: 0.0,
        macro_f1: 0.0,
        support: (0..k).map(|c| cm.row_sum(c)).collect(),
        zero_precision_classes: Vec::new(),
        zero_support_classes: Vec::new(),
    };
    for c in 0..k {
        let tp = cm.counts[c][c];
        let p = ratio(tp, cm.col_sum(c)).unwrap_or_else(|| {
            b.zero_precision_classes.push(c);
            0.0
        });
        let r = ratio(tp, b.support[c]).unwrap_or_else(|| {
            b.zero_support_classes.push(c);
            0.0
        });
        b.precision[c] = p;
        b.recall[c] = r;
        b.f1[c] = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let present: Vec<usize> = (0..k).filter(|&c| b.support[c] > 0).collect();
    let mean = |v: &[f64]| present.iter().map(|&c| v[c]).sum::<f64>() / present.len() as f64;
    b.macro_precision = mean(&b.precision);
    b.macro_recall = mean(&b.recall);
    b.macro_f1 = mean(&b.f1);
    Ok(b)
}

// ---------------------------------------------------------------------------
// SVG output
// ---------------------------------------------------------------------------

const BAR_PLOT_HEIGHT: f64 = 200.0;
const BAR_WIDTH: f64 = 40.0;
const BAR_GAP: f64 = 20.0;
const MARGIN: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Bar heights are `value / max(values) * 200` pixels.
pub fn bar_chart_svg(title: &str, series: &[(String, f64)]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::input("bar chart needs at least one value"));
    }
    if series.iter().any(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::input("bar chart values must be finite and nonnegative"));
    }
    let max = series.iter().map(|(_, v)| *v).fold(0.0, f64::max);
    let scale = if max > 0.0 { BAR_PLOT_HEIGHT / max } else { 0.0 };
    let width = 2.0 * MARGIN + series.len() as f64 * (BAR_WIDTH + BAR_GAP);
    let height = BAR_PLOT_HEIGHT + 2.0 * MARGIN + 20.0;
    let base = MARGIN + BAR_PLOT_HEIGHT;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (i, (label, v)) in series.iter().enumerate() {
        let x = MARGIN + i as f64 * (BAR_WIDTH + BAR_GAP) + BAR_GAP / 2.0;
        let h = v * scale;
        let _ = writeln!(
            s,
            r##"<rect class="bar" x="{x:.3}" y="{:.3}" width="{BAR_WIDTH:.3}" height="{h:.3}" fill="#3b6ea5"><title>{}: {v}</title></rect>"##,
            base - h,
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            x + BAR_WIDTH / 2.0,
            base + 14.0,
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}" font-family="sans-serif" font-size="10" text-anchor="middle">{v:.3}</text>"#,
            x + BAR_WIDTH / 2.0,
            base - h - 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN:.0}" y1="{base:.0}" x2="{:.0}" y2="{base:.0}" stroke="black"/>"#,
        width - MARGIN
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_bar_chart(title: &str, series: &[(String, f64)], path: &Path) -> Result<()> {
    container::write_file(path, bar_chart_svg(title, series)?.as_bytes())
}

const CELL: f64 = 36.0;

/// Cell opacity is `count / max_count` (0 everywhere for an all-zero matrix).
pub fn confusion_heatmap_svg(title: &str, cm: &ConfusionMatrix) -> Result<String> {
    if cm.k == 0 {
        return Err(Error::input("heatmap of an empty matrix"));
    }
    let max = cm.max();
    let side = cm.k as f64 * CELL;
    let (ox, oy) = (MARGIN + 20.0, MARGIN + 20.0);
    let width = ox + side + MARGIN;
    let height = oy + side + MARGIN;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (r, row) in cm.counts.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let opacity = if max > 0 { v as f64 / max as f64 } else { 0.0 };
            let (x, y) = (ox + c as f64 * CELL, oy + r as f64 * CELL);
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{x:.1}" y="{y:.1}" width="{CELL:.1}" height="{CELL:.1}" fill="#1f4e99" fill-opacity="{opacity:.6}" stroke="#cccccc"><title>true {r}, predicted {c}: {v}</title></rect>"##
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" text-anchor="middle">{v}</text>"#,
                x + CELL / 2.0,
                y + CELL / 2.0 + 4.0
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">predicted</text>"#,
        ox + side / 2.0,
        oy - 6.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle" transform="rotate(-90 {:.1} {:.1})">true</text>"#,
        ox - 8.0,
        oy + side / 2.0,
        ox - 8.0,
        oy + side / 2.0
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn render_confusion_heatmap(title: &str, cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    container::write_file(path, confusion_heatmap_svg(title, cm)?.as_bytes())
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEntry {
    pub kind: String,
    pub metrics: MetricsBundle,
}

/// Aggregate report. Absent sections are omitted from the JSON rather than
/// written as `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<MetricsBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetuned: Option<MetricsBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_clean: Option<MetricsBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetuned_clean: Option<MetricsBundle>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attack_success: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub detectors: Vec<DetectorEntry>,
}

impl Report {
    pub fn is_empty(&self) -> bool {
        self.baseline.is_none()
            && self.finetuned.is_none()
            && self.baseline_clean.is_none()
            && self.finetuned_clean.is_none()
            && self.attack_success.is_empty()
            && self.detectors.is_empty()
    }

    /// Pretty JSON with keys in sorted order.
    pub fn to_json(&self) -> Result<String> {
        // Round-tripping through `Value` sorts struct keys (its map is a BTreeMap).
        let value = serde_json::to_value(self)?;
        let mut s = serde_json::to_string_pretty(&value)?;
        s.push('\n');
        Ok(s)
    }
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    if report.is_empty() {
        return Err(Error::input("report has no sections"));
    }
    container::write_file(path, report.to_json()?.as_bytes())
}

pub fn read_report(path: &Path) -> Result<Report> {
    Ok(serde_json::from_slice(&container::read_file(path)?)?)
}

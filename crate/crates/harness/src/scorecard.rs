//! Cross-model radar scorecard built from per-model metric reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::loader::read_text;
use crate::metrics::{aggregate_capability, default_grouping, minmax_normalize, Dimension, Grouping, MetricReport, Orientation};

/// Score given to every model when a metric has no spread.
pub const DEGENERATE_SCORE: f64 = 50.0;

pub const GROUPING_FILE: &str = "grouping.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSet {
    pub model: String,
    pub reports: Vec<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub model: String,
    /// One entry per axis; `None` when the model has no metric there.
    pub scores: Vec<Option<f64>>,
    pub normalized: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scorecard {
    pub axes: Vec<Dimension>,
    pub models: Vec<ModelScores>,
    pub warnings: Vec<String>,
}

pub fn scorecard(sets: &[ReportSet], grouping: &Grouping) -> Result<Scorecard> {
    if sets.len() < 2 {
        return Err(HarnessError::TooFewReports(sets.len()));
    }
    let mut warnings = Vec::new();
    let mut columns: BTreeMap<&str, (Orientation, Vec<(usize, f64)>)> = BTreeMap::new();
    for (i, set) in sets.iter().enumerate() {
        for r in &set.reports {
            r.validate()?;
            let entry = columns.entry(&r.metric).or_insert((r.orientation, Vec::new()));
            if entry.0 != r.orientation {
                return Err(HarnessError::InvalidValue(format!(
                    "metric `{}` has conflicting orientations",
                    r.metric
                )));
            }
            if entry.1.iter().any(|(j, _)| *j == i) {
                return Err(HarnessError::InvalidValue(format!(
                    "metric `{}` reported twice for `{}`",
                    r.metric, set.model
                )));
            }
            entry.1.push((i, r.value));
        }
    }
    let mut normalized: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); sets.len()];
    for (metric, (orientation, cells)) in &columns {
        let values: Vec<f64> = cells.iter().map(|c| c.1).collect();
        let scores = match minmax_normalize(&values, *orientation) {
            Ok(s) => s,
            Err(HarnessError::DegenerateRange) => {
                warnings.push(format!("metric `{metric}` has no spread; scored {DEGENERATE_SCORE}"));
                vec![DEGENERATE_SCORE; values.len()]
            }
            Err(e) => return Err(e),
        };
        for ((i, _), s) in cells.iter().zip(scores) {
            normalized[*i].insert(metric.to_string(), s);
        }
    }
    let mut models = Vec::with_capacity(sets.len());
    for (set, norm) in sets.iter().zip(normalized) {
        let flat: Vec<(String, f64)> = norm.iter().map(|(k, v)| (k.clone(), *v)).collect();
        let agg = aggregate_capability(&flat, grouping)?;
        warnings.extend(agg.warnings.into_iter().map(|w| format!("{}: {w}", set.model)));
        let scores = Dimension::ALL
            .iter()
            .map(|d| agg.scores.iter().find(|c| c.dimension == *d).map(|c| c.score))
            .collect();
        models.push(ModelScores {
            model: set.model.clone(),
            scores,
            normalized: norm,
        });
    }
    Ok(Scorecard {
        axes: Dimension::ALL.to_vec(),
        models,
        warnings,
    })
}

/// Reads every `*.json` report set in `dir`, sorted by file name, plus an
/// optional grouping file layered over [`default_grouping`].
pub fn load_reports(dir: &Path) -> Result<(Vec<ReportSet>, Grouping)> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let p = e.map_err(|e| HarnessError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "json") {
            paths.push(p);
        }
    }
    paths.sort();
    let mut grouping = default_grouping();
    let mut sets = Vec::new();
    for p in paths {
        let text = read_text(&p)?;
        if p.file_name().is_some_and(|n| n == GROUPING_FILE) {
            let extra: BTreeMap<String, Dimension> =
                serde_json::from_str(&text).map_err(|e| HarnessError::io(&p, e))?;
            grouping.extend(extra);
        } else {
            sets.push(serde_json::from_str(&text).map_err(|e| HarnessError::io(&p, e))?);
        }
    }
    Ok((sets, grouping))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Static radar chart; missing axes are drawn at zero.
pub fn radar_svg(card: &Scorecard) -> String {
    let (cx, cy, r) = (260.0, 240.0, 160.0);
    let n = card.axes.len();
    let point = |k: usize, frac: f64| {
        let a = -std::f64::consts::FRAC_PI_2 + 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        (cx + r * frac * a.cos(), cy + r * frac * a.sin())
    };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="520" height="{}" font-family="sans-serif" font-size="12">"#,
        500 + 18 * card.models.len()
    );
    for ring in [0.25, 0.5, 0.75, 1.0] {
        let pts: Vec<String> = (0..n).map(|k| point(k, ring)).map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        let _ = writeln!(s, r##"<polygon points="{}" fill="none" stroke="#ccc"/>"##, pts.join(" "));
    }
    for (k, axis) in card.axes.iter().enumerate() {
        let (x, y) = point(k, 1.0);
        let (lx, ly) = point(k, 1.15);
        let _ = writeln!(s, r##"<line x1="{cx}" y1="{cy}" x2="{x:.1}" y2="{y:.1}" stroke="#999"/>"##);
        let _ = writeln!(s, r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle">{axis}</text>"#);
    }
    for (m, model) in card.models.iter().enumerate() {
        let color = PALETTE[m % PALETTE.len()];
        let pts: Vec<String> = model
            .scores
            .iter()
            .enumerate()
            .map(|(k, v)| point(k, v.unwrap_or(0.0) / 100.0))
            .map(|(x, y)| format!("{x:.1},{y:.1}"))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let y = 480 + 18 * m;
        let _ = writeln!(s, r#"<rect x="20" y="{}" width="12" height="12" fill="{color}"/>"#, y - 10);
        let _ = writeln!(s, r#"<text x="38" y="{y}">{}</text>"#, escape(&model.model));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

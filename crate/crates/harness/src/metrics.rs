//! Evaluation metrics and capability-score aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

/// One raw metric value for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub orientation: Orientation,
    pub value: f64,
    pub samples: usize,
}

impl MetricReport {
    pub fn new(metric: impl Into<String>, orientation: Orientation, value: f64, samples: usize) -> Result<Self> {
        let r = MetricReport {
            metric: metric.into(),
            orientation,
            value,
            samples,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(HarnessError::InvalidValue(format!("`{}` has zero samples", self.metric)));
        }
        if !self.value.is_finite() {
            return Err(HarnessError::InvalidValue(format!("`{}` = {}", self.metric, self.value)));
        }
        Ok(())
    }
}

/// Scales `values` to [0, 100] by min-max; lower-better values are negated
/// first so that 100 is always best. The extremes map to exactly 0 and 100.
pub fn minmax_normalize(values: &[f64], orientation: Orientation) -> Result<Vec<f64>> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(HarnessError::InvalidValue(v.to_string()));
    }
    let xs: Vec<f64> = match orientation {
        Orientation::HigherBetter => values.to_vec(),
        Orientation::LowerBetter => values.iter().map(|v| -v).collect(),
    };
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if xs.len() < 2 || lo == hi {
        return Err(HarnessError::DegenerateRange);
    }
    Ok(xs.iter().map(|x| (x - lo) / (hi - lo) * 100.0).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Dimension {
    #[serde(rename = "Knowledge Core")]
    KnowledgeCore,
    #[serde(rename = "Mol-Text Translation")]
    MolTextTranslation,
    #[serde(rename = "Molecule Generation")]
    MoleculeGeneration,
    #[serde(rename = "Quantitative Prediction")]
    QuantitativePrediction,
    #[serde(rename = "Synthesis Reasoning")]
    SynthesisReasoning,
}

impl Dimension {
    pub const ALL: [Dimension; 5] = [
        Dimension::KnowledgeCore,
        Dimension::MolTextTranslation,
        Dimension::MoleculeGeneration,
        Dimension::QuantitativePrediction,
        Dimension::SynthesisReasoning,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::KnowledgeCore => "Knowledge Core",
            Dimension::MolTextTranslation => "Mol-Text Translation",
            Dimension::MoleculeGeneration => "Molecule Generation",
            Dimension::QuantitativePrediction => "Quantitative Prediction",
            Dimension::SynthesisReasoning => "Synthesis Reasoning",
        }
    }
}

impl fmt::Display for Dimension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dimension {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Dimension::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| HarnessError::InvalidValue(format!("unknown dimension `{s}`")))
    }
}

/// Metric name to capability dimension.
pub type Grouping = BTreeMap<String, Dimension>;

/// Grouping for the metric names produced by `scicore eval`.
pub fn default_grouping() -> Grouping {
    use Dimension::*;
    [
        ("knowledge_accuracy", KnowledgeCore),
        ("qa_accuracy", KnowledgeCore),
        ("caption_f1", MolTextTranslation),
        ("name_accuracy", MolTextTranslation),
        ("validity", MoleculeGeneration),
        ("exact_match", MoleculeGeneration),
        ("similarity", MoleculeGeneration),
        ("property_mae", QuantitativePrediction),
        ("property_rmse", QuantitativePrediction),
        ("property_accuracy", QuantitativePrediction),
        ("yield_mae", SynthesisReasoning),
        ("retrieval_accuracy", SynthesisReasoning),
        ("ndcg", SynthesisReasoning),
    ]
    .into_iter()
    .map(|(m, d)| (m.to_string(), d))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityScore {
    pub dimension: Dimension,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub scores: Vec<CapabilityScore>,
    pub warnings: Vec<String>,
}

/// Per-dimension arithmetic mean of normalized metric scores. Dimensions
/// without metrics are left out and noted in `warnings`.
pub fn aggregate_capability(normalized: &[(String, f64)], grouping: &Grouping) -> Result<Aggregate> {
    let mut members: BTreeMap<Dimension, Vec<f64>> = BTreeMap::new();
    for (metric, score) in normalized {
        let dim = grouping
            .get(metric)
            .ok_or_else(|| HarnessError::UngroupedMetric(metric.clone()))?;
        members.entry(*dim).or_default().push(*score);
    }
    let mut out = Aggregate::default();
    for dim in Dimension::ALL {
        match members.get_mut(&dim) {
            Some(v) => {
                // summing in sorted order keeps the mean independent of input order
                v.sort_by(f64::total_cmp);
                let score = v.iter().sum::<f64>() / v.len() as f64;
                out.scores.push(CapabilityScore { dimension: dim, score });
            }
            None => out.warnings.push(format!("no metrics for dimension `{dim}`; omitted")),
        }
    }
    Ok(out)
}

/// nDCG with linear gain: `ranking` lists item indices in predicted order
/// and `gains[i]` is the relevance of item `i`. All-zero gains score 1.
pub fn ndcg(ranking: &[usize], gains: &[f64]) -> Result<f64> {
    if ranking.is_empty() || gains.is_empty() {
        return Err(HarnessError::EmptyList);
    }
    if ranking.len() != gains.len() {
        return Err(HarnessError::LengthMismatch {
            pred: ranking.len(),
            gold: gains.len(),
        });
    }
    if let Some(g) = gains.iter().find(|g| !(g.is_finite() && **g >= 0.0)) {
        return Err(HarnessError::InvalidValue(format!("gain {g}")));
    }
    let mut seen = vec![false; gains.len()];
    for &i in ranking {
        if i >= gains.len() || std::mem::replace(&mut seen[i], true) {
            return Err(HarnessError::InvalidValue(format!("ranking is not a permutation (item {i})")));
        }
    }
    let dcg = |order: &mut dyn Iterator<Item = f64>| -> f64 {
        order.enumerate().map(|(k, g)| g / ((k + 2) as f64).log2()).sum()
    };
    let actual = dcg(&mut ranking.iter().map(|&i| gains[i]));
    let mut ideal_order = gains.to_vec();
    ideal_order.sort_by(|a, b| b.total_cmp(a));
    let ideal = dcg(&mut ideal_order.into_iter());
    if ideal == 0.0 {
        return Ok(1.0);
    }
    Ok((actual / ideal).min(1.0))
}

/// Ranking by descending score; ties keep the lower index first.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regression {
    pub mae: f64,
    pub rmse: f64,
}

fn check_lengths(pred: usize, gold: usize) -> Result<()> {
    if pred != gold {
        return Err(HarnessError::LengthMismatch { pred, gold });
    }
    if pred == 0 {
        return Err(HarnessError::EmptyList);
    }
    Ok(())
}

pub fn regression_metrics(pred: &[f64], gold: &[f64]) -> Result<Regression> {
    check_lengths(pred.len(), gold.len())?;
    let n = pred.len() as f64;
    let mae = pred.iter().zip(gold).map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let mse = pred.iter().zip(gold).map(|(p, g)| (p - g).powi(2)).sum::<f64>() / n;
    Ok(Regression { mae, rmse: mse.sqrt() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Classification {
    pub accuracy: f64,
    /// Of the `positive` label; 0 when precision and recall are both 0.
    pub f1: f64,
}

pub fn classification_metrics<T: PartialEq>(pred: &[T], gold: &[T], positive: &T) -> Result<Classification> {
    check_lengths(pred.len(), gold.len())?;
    let correct = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fnn == 0 { 0.0 } else { tp as f64 / (tp + fnn) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(Classification {
        accuracy: correct as f64 / pred.len() as f64,
        f1,
    })
}

//! Classification and extraction metrics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::ExtractionResult;
use crate::types::{CasePairRecord, MatchLabel, RationaleKind};

/// Macro-averaged match metrics. Classes that occur in neither the gold labels nor the
/// predictions are left out of the averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[gold][predicted]`.
    pub confusion: [[usize; 3]; 3],
    pub classes_averaged: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extraction: Option<ExtractionMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn report_from_confusion(confusion: [[usize; 3]; 3]) -> Result<MetricsReport> {
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    let correct: usize = (0..3).map(|c| confusion[c][c]).sum();
    let mut classes = Vec::new();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..3 {
        let gold: usize = confusion[c].iter().sum();
        let predicted: usize = (0..3).map(|g| confusion[g][c]).sum();
        if gold == 0 && predicted == 0 {
            continue;
        }
        classes.push(c);
        let p = ratio(confusion[c][c], predicted);
        let r = ratio(confusion[c][c], gold);
        p_sum += p;
        r_sum += r;
        f_sum += harmonic(p, r);
    }
    let k = classes.len() as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / total as f64,
        precision: p_sum / k,
        recall: r_sum / k,
        f1: f_sum / k,
        confusion,
        classes_averaged: classes,
        extraction: None,
    })
}

pub fn compute_metrics(predictions: &[MatchLabel], gold: &[MatchLabel]) -> Result<MetricsReport> {
    if predictions.len() != gold.len() {
        return Err(Error::DimensionMismatch {
            context: "predictions vs gold".into(),
            expected: gold.len(),
            actual: predictions.len(),
        });
    }
    if gold.is_empty() {
        return Err(Error::EmptyInput("no predictions to score".into()));
    }
    let mut confusion = [[0usize; 3]; 3];
    for (p, g) in predictions.iter().zip(gold) {
        confusion[g.index()][p.index()] += 1;
    }
    report_from_confusion(confusion)
}

/// Pair-level scores of predicted pro pairs against the gold alignments, pooled over
/// the corpus, plus per-sentence rationale-label accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub rationale_accuracy: f64,
}

/// Predicted labels and pro pairs for one record.
pub struct PairOutcome<'a> {
    pub record: &'a CasePairRecord,
    pub labels_x: &'a [RationaleKind],
    pub labels_y: &'a [RationaleKind],
    pub extraction: &'a ExtractionResult,
}

/// Scores extractions against the gold positives (mask ignored) and gold rationale labels.
pub fn extraction_metrics<'a>(outcomes: impl IntoIterator<Item = PairOutcome<'a>>) -> Result<ExtractionMetrics> {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    let (mut correct, mut sentences) = (0usize, 0usize);
    for o in outcomes {
        let gold: BTreeSet<(usize, usize)> = o.record.alignments.positives().into_iter().collect();
        let pred: BTreeSet<(usize, usize)> = o.extraction.pro_pairs.iter().map(|p| (p.m, p.n)).collect();
        tp += gold.intersection(&pred).count();
        fp += pred.difference(&gold).count();
        fn_ += gold.difference(&pred).count();
        for (labels, case, side) in [(o.labels_x, &o.record.x, "x"), (o.labels_y, &o.record.y, "y")] {
            let g = case
                .rationale_labels
                .as_ref()
                .ok_or_else(|| Error::MissingLabels(format!("pair {} side {side}", o.record.id)))?;
            correct += g.iter().zip(labels).filter(|(a, b)| a == b).count();
            sentences += g.len();
        }
    }
    if sentences == 0 {
        return Err(Error::EmptyInput("no extractions to score".into()));
    }
    // With no gold and no predicted pairs the extraction is exact.
    let precision = if tp + fp == 0 {
        if fn_ == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        ratio(tp, tp + fp)
    };
    let recall = if tp + fn_ == 0 {
        if fp == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        ratio(tp, tp + fn_)
    };
    Ok(ExtractionMetrics {
        precision,
        recall,
        f1: harmonic(precision, recall),
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        rationale_accuracy: correct as f64 / sentences as f64,
    })
}

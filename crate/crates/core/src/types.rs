//! Domain records shared across the pipeline: sentence embeddings, cases,
//! partial alignment labels, case pairs and entropic transport problems.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

/// Default upper bound on sentences per case. Longer cases are rejected at ingestion.
pub const DEFAULT_MAX_SENTENCES: usize = 256;

/// Rationale category of a single sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RationaleKind {
    /// Not a rationale.
    Other = 0,
    KeyCircumstance = 1,
    ConstitutiveElement = 2,
    DisputeFocus = 3,
}

impl RationaleKind {
    pub const COUNT: usize = 4;
    pub const ALL: [RationaleKind; 4] = [
        RationaleKind::Other,
        RationaleKind::KeyCircumstance,
        RationaleKind::ConstitutiveElement,
        RationaleKind::DisputeFocus,
    ];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_rationale(self) -> bool {
        self != RationaleKind::Other
    }
}

/// Three-level relation between two cases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MatchLabel {
    Mismatched = 0,
    Partial = 1,
    Matched = 2,
}

impl MatchLabel {
    pub const COUNT: usize = 3;
    pub const ALL: [MatchLabel; 3] = [MatchLabel::Mismatched, MatchLabel::Partial, MatchLabel::Matched];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for MatchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MatchLabel::Mismatched => "mismatched",
            MatchLabel::Partial => "partially matched",
            MatchLabel::Matched => "matched",
        };
        f.write_str(s)
    }
}

/// A frozen sentence embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SentenceEmbedding(pub Vec<f64>);

impl SentenceEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// One document: an ordered list of sentence embeddings with optional gold rationale labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub sentences: Vec<SentenceEmbedding>,
    pub rationale_labels: Option<Vec<RationaleKind>>,
}

impl Case {
    pub fn new(sentences: Vec<SentenceEmbedding>) -> Self {
        Self {
            sentences,
            rationale_labels: None,
        }
    }

    pub fn with_labels(sentences: Vec<SentenceEmbedding>, labels: Vec<RationaleKind>) -> Self {
        Self {
            sentences,
            rationale_labels: Some(labels),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Embedding dimension of the first sentence (0 for an empty case).
    pub fn dim(&self) -> usize {
        self.sentences.first().map_or(0, SentenceEmbedding::dim)
    }

    /// Sentences stacked as a `len × d` matrix.
    pub fn matrix(&self) -> Result<Array2<f64>> {
        let d = self.dim();
        let mut out = Array2::zeros((self.len(), d));
        for (i, s) in self.sentences.iter().enumerate() {
            if s.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: format!("sentence {i}"),
                    expected: d,
                    actual: s.dim(),
                });
            }
            out.row_mut(i).assign(&ndarray::ArrayView1::from(s.as_slice()));
        }
        Ok(out)
    }
}

/// Binary alignment matrix with an observation mask. Unobserved entries carry no label.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentLabels {
    pub values: Array2<bool>,
    pub observed: Array2<bool>,
}

impl AlignmentLabels {
    /// Fully observed labels.
    pub fn full(values: Array2<bool>) -> Self {
        let observed = Array2::from_elem(values.raw_dim(), true);
        Self { values, observed }
    }

    pub fn unobserved(m: usize, n: usize) -> Self {
        Self {
            values: Array2::from_elem((m, n), false),
            observed: Array2::from_elem((m, n), false),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Entries that are both observed and positive.
    pub fn observed_positives(&self) -> Vec<(usize, usize)> {
        self.values
            .indexed_iter()
            .filter(|&((m, n), &v)| v && self.observed[[m, n]])
            .map(|(ix, _)| ix)
            .collect()
    }

    /// All positive entries regardless of the mask.
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.values.indexed_iter().filter(|(_, &v)| v).map(|(ix, _)| ix).collect()
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

/// One labeled tuple: two cases, their alignments, the match label and an optional explanation.
#[derive(Clone, Debug, PartialEq)]
pub struct CasePairRecord {
    pub id: String,
    pub x: Case,
    pub y: Case,
    pub alignments: AlignmentLabels,
    pub match_label: MatchLabel,
    pub explanation_text: Option<String>,
}

/// A single invariant failure found by [`validate_record`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn validate_case(side: &str, case: &Case, dim: usize, max_len: usize, out: &mut Vec<Violation>) {
    if case.is_empty() || case.len() > max_len {
        out.push(Violation {
            field: format!("{side}.sentences"),
            message: format!("length {} outside [1, {max_len}]", case.len()),
        });
    }
    for (i, s) in case.sentences.iter().enumerate() {
        if s.dim() != dim {
            out.push(Violation {
                field: format!("{side}.sentences[{i}]"),
                message: format!("embedding length {} != {dim}", s.dim()),
            });
        }
        if s.0.iter().any(|v| !v.is_finite()) {
            out.push(Violation {
                field: format!("{side}.sentences[{i}]"),
                message: "non-finite embedding entry".into(),
            });
        }
    }
    if let Some(labels) = &case.rationale_labels {
        if labels.len() != case.len() {
            out.push(Violation {
                field: format!("{side}.rationale_labels"),
                message: format!("{} labels for {} sentences", labels.len(), case.len()),
            });
        }
    }
}

/// Checks every record invariant, returning one violation per failure.
pub fn validate_record(record: &CasePairRecord, dim: usize) -> Vec<Violation> {
    validate_record_bounded(record, dim, DEFAULT_MAX_SENTENCES)
}

pub fn validate_record_bounded(record: &CasePairRecord, dim: usize, max_len: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    validate_case("x", &record.x, dim, max_len, &mut out);
    validate_case("y", &record.y, dim, max_len, &mut out);

    let expected = (record.x.len(), record.y.len());
    let a = &record.alignments;
    if a.values.dim() != expected || a.observed.dim() != expected {
        out.push(Violation {
            field: "alignments".into(),
            message: format!(
                "shape {:?}/{:?} does not match cases {:?}",
                a.values.dim(),
                a.observed.dim(),
                expected
            ),
        });
        return out;
    }
    let gold = match (&record.x.rationale_labels, &record.y.rationale_labels) {
        (Some(rx), Some(ry)) if rx.len() == expected.0 && ry.len() == expected.1 => Some((rx, ry)),
        _ => None,
    };
    for ((m, n), &v) in a.values.indexed_iter() {
        if !v {
            continue;
        }
        if !a.observed[[m, n]] {
            out.push(Violation {
                field: format!("alignments({m},{n})"),
                message: "positive entry is not observed".into(),
            });
        }
        if let Some((rx, ry)) = gold {
            if rx[m] != ry[n] || !rx[m].is_rationale() {
                out.push(Violation {
                    field: format!("alignments({m},{n})"),
                    message: format!("aligns rationale kinds {} and {}", rx[m].index(), ry[n].index()),
                });
            }
        }
    }
    out
}

/// An entropic optimal transport problem between two discrete distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportProblem {
    pub cost: Array2<f64>,
    pub mu: Array1<f64>,
    pub nu: Array1<f64>,
    pub gamma: f64,
}

impl TransportProblem {
    /// Uniform marginals `1/M` and `1/N`.
    pub fn uniform(cost: Array2<f64>, gamma: f64) -> Self {
        let (m, n) = cost.dim();
        Self {
            cost,
            mu: Array1::from_elem(m, 1.0 / m as f64),
            nu: Array1::from_elem(n, 1.0 / n as f64),
            gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.cost.dim();
        if m == 0 || n == 0 {
            return Err(Error::InvalidProblem("empty cost matrix".into()));
        }
        if self.mu.len() != m || self.nu.len() != n {
            return Err(Error::InvalidProblem(format!(
                "marginal lengths ({}, {}) do not match cost shape ({m}, {n})",
                self.mu.len(),
                self.nu.len()
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidProblem(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidProblem("non-finite cost entry".into()));
        }
        for (name, w) in [("mu", &self.mu), ("nu", &self.nu)] {
            if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidProblem(format!("{name} has a non-positive entry")));
            }
            let s: f64 = w.sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidProblem(format!("{name} sums to {s}, not 1")));
            }
        }
        Ok(())
    }
}

/// Converged entropic transport plan with its log-domain scaling potentials.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Array2<f64>,
    pub log_u: Array1<f64>,
    pub log_v: Array1<f64>,
    pub iterations: usize,
    pub marginal_violation: f64,
}

impl TransportPlan {
    pub fn shape(&self) -> (usize, usize) {
        self.plan.dim()
    }
}

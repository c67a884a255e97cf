//! Template explanations and explanation feature vectors.
//!
//! Three label-specific templates stand in for three label-specific text
//! generators: each renders the same extraction under a different match
//! hypothesis, and each yields a fixed-length feature vector the matcher scores.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::extract::ExtractionResult;
use crate::types::{MatchLabel, RationaleKind};

/// Kind-and-polarity marker preceding each rationale in the input sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RationaleToken {
    pub kind: RationaleKind,
    pub pro: bool,
}

impl fmt::Display for RationaleToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            RationaleKind::KeyCircumstance => 'A',
            RationaleKind::ConstitutiveElement => 'Y',
            RationaleKind::DisputeFocus => 'Z',
            RationaleKind::Other => unreachable!("non-rationales carry no token"),
        };
        write!(f, "[{k}{}]", if self.pro { 'I' } else { 'O' })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SeqItem {
    Token(RationaleToken),
    Sentence(Side, usize),
}

impl fmt::Display for SeqItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SeqItem::Token(t) => t.fmt(f),
            SeqItem::Sentence(Side::X, i) => write!(f, "x_{i}"),
            SeqItem::Sentence(Side::Y, i) => write!(f, "y_{i}"),
        }
    }
}

/// Per-side list of `(index, kind, is_pro)` in sentence order.
fn side_rationales(extraction: &ExtractionResult, side: Side) -> Vec<(usize, RationaleKind, bool)> {
    let mut items: Vec<(usize, RationaleKind, bool)> = Vec::new();
    for p in &extraction.pro_pairs {
        let (i, k) = match side {
            Side::X => (p.m, p.kind_x),
            Side::Y => (p.n, p.kind_y),
        };
        if !items.iter().any(|&(j, _, _)| j == i) {
            items.push((i, k, true));
        }
    }
    let cons = match side {
        Side::X => &extraction.con_x,
        Side::Y => &extraction.con_y,
    };
    items.extend(cons.iter().map(|c| (c.index, c.kind, false)));
    items.sort_by_key(|&(i, _, _)| i);
    items
}

/// `[T; x_i; ...; T; y_j; ...]` over the rationales of both cases, in sentence order.
pub fn build_input_sequence(extraction: &ExtractionResult) -> Vec<SeqItem> {
    let mut seq = Vec::new();
    for side in [Side::X, Side::Y] {
        for (i, kind, pro) in side_rationales(extraction, side) {
            seq.push(SeqItem::Token(RationaleToken { kind, pro }));
            seq.push(SeqItem::Sentence(side, i));
        }
    }
    seq
}

pub fn sequence_to_string(seq: &[SeqItem]) -> String {
    seq.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ")
}

/// Number of count and label slots before the pooled embeddings.
pub const COUNT_SLOTS: usize = 2 * 3 + MatchLabel::COUNT;

/// Feature length for embedding width `d`.
pub fn feature_dim(d: usize) -> usize {
    COUNT_SLOTS + 2 * d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub label_hypothesis: MatchLabel,
    pub text: String,
    pub features: Vec<f64>,
}

fn kind_name(k: RationaleKind) -> &'static str {
    match k {
        RationaleKind::Other => "other",
        RationaleKind::KeyCircumstance => "key circumstance",
        RationaleKind::ConstitutiveElement => "constitutive element",
        RationaleKind::DisputeFocus => "dispute focus",
    }
}

fn mean_rows(rows: impl Iterator<Item = Array1<f64>>, d: usize) -> Array1<f64> {
    let mut acc = Array1::zeros(d);
    let mut count = 0usize;
    for r in rows {
        acc += &r;
        count += 1;
    }
    if count > 0 {
        acc /= count as f64;
    }
    acc
}

/// Feature vector: pro pair counts per kind, con counts per kind, hypothesis one-hot,
/// mean embedding of pro sentences, mean embedding of con sentences.
pub fn explanation_features(extraction: &ExtractionResult, x: ArrayView2<f64>, y: ArrayView2<f64>, hypothesis: MatchLabel) -> Vec<f64> {
    let d = x.ncols();
    let mut f = Array1::zeros(feature_dim(d));
    for p in &extraction.pro_pairs {
        f[p.kind_x.index() - 1] += 1.0;
    }
    for c in extraction.con_x.iter().chain(&extraction.con_y) {
        f[3 + c.kind.index() - 1] += 1.0;
    }
    f[6 + hypothesis.index()] = 1.0;
    let pro = extraction
        .pro_x()
        .into_iter()
        .map(|m| x.row(m).to_owned())
        .chain(extraction.pro_y().into_iter().map(|n| y.row(n).to_owned()));
    f.slice_mut(s![COUNT_SLOTS..COUNT_SLOTS + d]).assign(&mean_rows(pro, d));
    let con = extraction
        .con_x
        .iter()
        .map(|c| x.row(c.index).to_owned())
        .chain(extraction.con_y.iter().map(|c| y.row(c.index).to_owned()));
    f.slice_mut(s![COUNT_SLOTS + d..]).assign(&mean_rows(con, d));
    f.to_vec()
}

/// Renders the template for `hypothesis` and computes the matching feature vector.
pub fn render_explanation(
    extraction: &ExtractionResult,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    hypothesis: MatchLabel,
) -> ExplanationRecord {
    let pro = extraction.pro_pairs.len();
    let con = extraction.con_count();
    let pros: Vec<String> = extraction
        .pro_pairs
        .iter()
        .map(|p| format!("x_{}~y_{} ({})", p.m, p.n, kind_name(p.kind_x)))
        .collect();
    let cons: Vec<String> = extraction
        .con_x
        .iter()
        .map(|c| format!("x_{} ({})", c.index, kind_name(c.kind)))
        .chain(extraction.con_y.iter().map(|c| format!("y_{} ({})", c.index, kind_name(c.kind))))
        .collect();
    let support = if pro == 0 {
        "The cases share no aligned rationales.".to_string()
    } else {
        format!("Aligned rationales: {}.", pros.join(", "))
    };
    let rebut = if con == 0 {
        "Every rationale has a counterpart.".to_string()
    } else {
        format!("Unaligned rationales: {}.", cons.join(", "))
    };
    let verdict = match hypothesis {
        MatchLabel::Matched => "The cases match: the aligned rationales outweigh the unaligned ones.",
        MatchLabel::Partial => "The cases match partially: some rationales align while others do not.",
        MatchLabel::Mismatched => "The cases do not match: the unaligned rationales outweigh the aligned ones.",
    };
    let text = format!("[{hypothesis}] [pro={pro} con={con}] {support} {rebut} {verdict}");
    ExplanationRecord {
        label_hypothesis: hypothesis,
        text,
        features: explanation_features(extraction, x, y, hypothesis),
    }
}

/// The three candidates, one per hypothesis label.
pub fn render_candidates(extraction: &ExtractionResult, x: ArrayView2<f64>, y: ArrayView2<f64>) -> [ExplanationRecord; 3] {
    MatchLabel::ALL.map(|l| render_explanation(extraction, x, y, l))
}

/// Reads `(pro, con)` back from a rendered text.
pub fn parse_counts(text: &str) -> Option<(usize, usize)> {
    let start = text.find("[pro=")?;
    let rest = &text[start + 5..];
    let (pro, rest) = rest.split_once(" con=")?;
    let (con, _) = rest.split_once(']')?;
    Some((pro.parse().ok()?, con.parse().ok()?))
}

/// Stacks the candidates' features into a `3 × F` matrix.
pub fn candidate_matrix(candidates: &[ExplanationRecord; 3]) -> Array2<f64> {
    let f = candidates[0].features.len();
    Array2::from_shape_fn((3, f), |(k, j)| candidates[k].features[j])
}

//! Synthetic corpora with planted alignments, JSONL ingestion and label masking.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, WeightedIndex};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::types::{validate_record, AlignmentLabels, Case, CasePairRecord, MatchLabel, RationaleKind, SentenceEmbedding};

/// Generator settings. Every sentence is `centroid(kind) + topic + noise`; aligned
/// sentences on the two sides share their topic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub pairs: usize,
    pub dim: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Probabilities of `Other` and the three rationale kinds for unaligned sentences.
    pub kind_proportions: [f64; 4],
    /// Planted aligned-pair count is uniform on `0..=max_aligned`.
    pub max_aligned: usize,
    /// Aligned-pair counts at which the label moves to partial and to matched.
    pub thresholds: [usize; 2],
    /// Probability that a planted pair is left out of the alignment labels.
    pub alignment_noise: f64,
    pub noise_scale: f64,
    pub centroid_scale: f64,
    pub topic_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            pairs: 200,
            dim: 32,
            min_sentences: 14,
            max_sentences: 16,
            kind_proportions: [0.5, 0.2, 0.15, 0.15],
            max_aligned: 5,
            thresholds: [2, 4],
            alignment_noise: 0.0,
            noise_scale: 0.3,
            centroid_scale: 0.7,
            topic_scale: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.min_sentences == 0 || self.min_sentences > self.max_sentences {
            return bad(format!("sentence range [{}, {}] is empty", self.min_sentences, self.max_sentences));
        }
        if self.max_aligned > self.min_sentences {
            return bad("max_aligned exceeds min_sentences".into());
        }
        let sum: f64 = self.kind_proportions.iter().sum();
        if self.kind_proportions.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("kind proportions must be nonnegative and sum to 1, got {sum}"));
        }
        if self.kind_proportions[1..].iter().all(|&p| p == 0.0) && self.max_aligned > 0 {
            return bad("aligned pairs need at least one rationale kind with positive weight".into());
        }
        if self.thresholds[0] >= self.thresholds[1] {
            return bad("thresholds must be strictly increasing".into());
        }
        if !(0.0..=1.0).contains(&self.alignment_noise) {
            return bad("alignment_noise must lie in [0, 1]".into());
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("centroid_scale", self.centroid_scale),
            ("topic_scale", self.topic_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Match label for a planted aligned-pair count.
    pub fn label_for(&self, aligned: usize) -> MatchLabel {
        if aligned < self.thresholds[0] {
            MatchLabel::Mismatched
        } else if aligned < self.thresholds[1] {
            MatchLabel::Partial
        } else {
            MatchLabel::Matched
        }
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; dim];
    }
    let normal = Normal::new(0.0, std).expect("valid std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

/// Places `aligned` slots among `len` positions and fills the rest with sampled kinds.
fn layout<R: Rng>(
    rng: &mut R,
    len: usize,
    aligned_kinds: &[RationaleKind],
    kinds: &WeightedIndex<f64>,
) -> (Vec<RationaleKind>, Vec<Option<usize>>) {
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(rng);
    let mut labels = vec![RationaleKind::Other; len];
    let mut topic_of = vec![None; len];
    for (t, &pos) in slots.iter().take(aligned_kinds.len()).enumerate() {
        labels[pos] = aligned_kinds[t];
        topic_of[pos] = Some(t);
    }
    for &pos in slots.iter().skip(aligned_kinds.len()) {
        labels[pos] = RationaleKind::from_index(kinds.sample(rng)).expect("four kinds");
    }
    (labels, topic_of)
}

fn embed<R: Rng>(
    rng: &mut R,
    config: &SyntheticConfig,
    centroids: &[Vec<f64>],
    labels: &[RationaleKind],
    topic_of: &[Option<usize>],
    topics: &[Vec<f64>],
) -> Vec<SentenceEmbedding> {
    labels
        .iter()
        .zip(topic_of)
        .map(|(k, t)| {
            let topic = match t {
                Some(i) => topics[*i].clone(),
                None => gaussian_vec(rng, config.dim, config.topic_scale),
            };
            let noise = gaussian_vec(rng, config.dim, config.noise_scale);
            let c = &centroids[k.index()];
            SentenceEmbedding((0..config.dim).map(|j| c[j] + topic[j] + noise[j]).collect())
        })
        .collect()
}

/// Generates `config.pairs` records. Pair `i` draws from its own stream, so a longer
/// corpus extends a shorter one with the same seed.
pub fn generate_synthetic_corpus(config: &SyntheticConfig) -> Result<Vec<CasePairRecord>> {
    config.validate()?;
    let mut base = ChaCha8Rng::seed_from_u64(config.seed);
    let centroids: Vec<Vec<f64>> = (0..RationaleKind::COUNT)
        .map(|_| gaussian_vec(&mut base, config.dim, config.centroid_scale))
        .collect();
    let kinds = WeightedIndex::new(config.kind_proportions).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let rationale_kinds = WeightedIndex::new(&config.kind_proportions[1..]).ok();

    let mut out = Vec::with_capacity(config.pairs);
    for i in 0..config.pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(i as u64 + 1);
        let m = rng.gen_range(config.min_sentences..=config.max_sentences);
        let n = rng.gen_range(config.min_sentences..=config.max_sentences);
        let aligned = rng.gen_range(0..=config.max_aligned);
        let aligned_kinds: Vec<RationaleKind> = (0..aligned)
            .map(|_| {
                let w = rationale_kinds.as_ref().expect("validated");
                RationaleKind::from_index(1 + w.sample(&mut rng)).expect("rationale kind")
            })
            .collect();
        let topics: Vec<Vec<f64>> = (0..aligned)
            .map(|_| gaussian_vec(&mut rng, config.dim, config.topic_scale))
            .collect();
        let (lx, tx) = layout(&mut rng, m, &aligned_kinds, &kinds);
        let (ly, ty) = layout(&mut rng, n, &aligned_kinds, &kinds);
        let sx = embed(&mut rng, config, &centroids, &lx, &tx, &topics);
        let sy = embed(&mut rng, config, &centroids, &ly, &ty, &topics);

        let mut values = Array2::from_elem((m, n), false);
        for (a, ta) in tx.iter().enumerate() {
            let Some(t) = ta else { continue };
            let b = ty.iter().position(|tb| tb == &Some(*t)).expect("topic placed on both sides");
            if config.alignment_noise == 0.0 || rng.gen::<f64>() >= config.alignment_noise {
                values[[a, b]] = true;
            }
        }
        out.push(CasePairRecord {
            id: format!("pair-{i:05}"),
            x: Case::with_labels(sx, lx),
            y: Case::with_labels(sy, ly),
            alignments: AlignmentLabels::full(values),
            match_label: config.label_for(aligned),
            explanation_text: None,
        });
    }
    Ok(out)
}

/// Keeps `ceil(ratio * observed)` uniformly chosen observed entries per record.
/// Positives that lose their observation are dropped from the labels.
pub fn mask_alignments(records: &[CasePairRecord], ratio: f64, seed: u64) -> Result<Vec<CasePairRecord>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!("label ratio must lie in [0, 1], got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = records.to_vec();
    for r in &mut out {
        let mut observed: Vec<(usize, usize)> = r.alignments.observed.indexed_iter().filter(|(_, &o)| o).map(|(ix, _)| ix).collect();
        let total = observed.len();
        // Guard against products like 0.7 * 10 landing just above an integer.
        let keep = ((ratio * total as f64) - 1e-9).ceil().max(0.0) as usize;
        if keep >= total {
            continue;
        }
        observed.shuffle(&mut rng);
        for &ix in &observed[keep..] {
            r.alignments.observed[ix] = false;
            r.alignments.values[ix] = false;
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CaseJson {
    sentences: Vec<Vec<f64>>,
    #[serde(default)]
    rationale_labels: Option<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct AlignmentsJson {
    positives: Vec<[usize; 2]>,
    observed: Vec<[usize; 2]>,
}

#[derive(Serialize)]
struct RecordJson<'a> {
    id: &'a str,
    x: CaseJson,
    y: CaseJson,
    alignments: AlignmentsJson,
    match_label: u8,
    explanation: Option<&'a str>,
}

fn case_json(c: &Case) -> CaseJson {
    CaseJson {
        sentences: c.sentences.iter().map(|s| s.0.clone()).collect(),
        rationale_labels: c.rationale_labels.as_ref().map(|l| l.iter().map(|k| k.index() as u8).collect()),
    }
}

fn cells(mask: &Array2<bool>) -> Vec<[usize; 2]> {
    mask.indexed_iter().filter(|(_, &v)| v).map(|((m, n), _)| [m, n]).collect()
}

pub fn record_to_json_line(r: &CasePairRecord) -> String {
    let json = RecordJson {
        id: &r.id,
        x: case_json(&r.x),
        y: case_json(&r.y),
        alignments: AlignmentsJson {
            positives: cells(&r.alignments.values),
            observed: cells(&r.alignments.observed),
        },
        match_label: r.match_label.index() as u8,
        explanation: r.explanation_text.as_deref(),
    };
    serde_json::to_string(&json).expect("record serializes")
}

fn parse_err(line: usize, field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.into(),
        message: message.into(),
    }
}

fn field<T: serde::de::DeserializeOwned>(obj: &serde_json::Map<String, Value>, name: &str, line: usize) -> Result<T> {
    let v = obj.get(name).ok_or_else(|| parse_err(line, name, "missing field"))?;
    T::deserialize(v).map_err(|e| parse_err(line, name, e.to_string()))
}

fn case_from_json(c: CaseJson, side: &str, line: usize) -> Result<Case> {
    let sentences = c.sentences.into_iter().map(SentenceEmbedding).collect();
    let labels = match c.rationale_labels {
        None => None,
        Some(ls) => Some(
            ls.into_iter()
                .enumerate()
                .map(|(i, v)| {
                    RationaleKind::from_index(v as usize)
                        .ok_or_else(|| parse_err(line, format!("{side}.rationale_labels[{i}]"), format!("unknown rationale kind {v}")))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    Ok(Case {
        sentences,
        rationale_labels: labels,
    })
}

fn mask_from_cells(cells: &[[usize; 2]], shape: (usize, usize), name: &str, line: usize) -> Result<Array2<bool>> {
    let mut mask = Array2::from_elem(shape, false);
    for &[m, n] in cells {
        if m >= shape.0 || n >= shape.1 {
            return Err(parse_err(
                line,
                format!("alignments.{name}"),
                format!("entry ({m},{n}) outside {shape:?}"),
            ));
        }
        mask[[m, n]] = true;
    }
    Ok(mask)
}

/// Parses one JSONL line. `dim` fixes the expected embedding width, taken from the
/// first record when `None`.
pub fn parse_record_line(text: &str, line: usize, dim: Option<usize>) -> Result<CasePairRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| parse_err(line, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| parse_err(line, "<record>", "expected a JSON object"))?;
    let id: String = field(obj, "id", line)?;
    let x = case_from_json(field(obj, "x", line)?, "x", line)?;
    let y = case_from_json(field(obj, "y", line)?, "y", line)?;
    let alignments: AlignmentsJson = field(obj, "alignments", line)?;
    let label: u8 = field(obj, "match_label", line)?;
    let match_label =
        MatchLabel::from_index(label as usize).ok_or_else(|| parse_err(line, "match_label", format!("unknown match label {label}")))?;
    let explanation_text: Option<String> = match obj.get("explanation") {
        None | Some(Value::Null) => None,
        Some(_) => field(obj, "explanation", line)?,
    };
    let shape = (x.len(), y.len());
    let record = CasePairRecord {
        id,
        alignments: AlignmentLabels {
            values: mask_from_cells(&alignments.positives, shape, "positives", line)?,
            observed: mask_from_cells(&alignments.observed, shape, "observed", line)?,
        },
        x,
        y,
        match_label,
        explanation_text,
    };
    let dim = dim.unwrap_or_else(|| record.x.dim());
    if let Some(v) = validate_record(&record, dim).into_iter().next() {
        return Err(parse_err(line, format!("{}: {}", record.id, v.field), v.message));
    }
    Ok(record)
}

/// Parses JSONL text, skipping blank lines and `#` comment lines.
pub fn parse_jsonl(text: &str) -> Result<Vec<CasePairRecord>> {
    let mut out: Vec<CasePairRecord> = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let t = l.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let dim = out.first().map(|r| r.x.dim());
        out.push(parse_record_line(t, i + 1, dim)?);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<CasePairRecord>> {
    parse_jsonl(&std::fs::read_to_string(path)?)
}

pub fn to_jsonl(records: &[CasePairRecord], header: &str) -> String {
    let mut out = String::from(header);
    if !out.is_empty() && !out.ends_with('\n') {
        out.push('\n');
    }
    for r in records {
        out.push_str(&record_to_json_line(r));
        out.push('\n');
    }
    out
}

/// Writes records atomically, preceded by `header` (comment lines or empty).
pub fn save_jsonl(records: &[CasePairRecord], path: &Path, header: &str) -> Result<()> {
    write_atomic(path, to_jsonl(records, header).as_bytes())
}

/// Majority-class share of a label list.
pub fn majority_share(labels: &[MatchLabel]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = [0usize; 3];
    for l in labels {
        counts[l.index()] += 1;
    }
    *counts.iter().max().expect("three classes") as f64 / labels.len() as f64
}

/// Distinct ids; duplicates are reported by position.
pub fn check_unique_ids(records: &[CasePairRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (i, r) in records.iter().enumerate() {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate record id `{}` at position {i}", r.id)));
        }
    }
    Ok(())
}

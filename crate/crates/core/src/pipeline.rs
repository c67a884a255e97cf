//! End-to-end glue: extraction over a corpus, matcher example assembly,
//! prediction records and the label-ratio sweep.

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{forward_pair, ExtractorParams, ForwardOptions};
use crate::config::{InputMode, TrainConfig};
use crate::data::mask_alignments;
use crate::error::{Error, Result};
use crate::explain::render_explanation;
use crate::extract::{extract_rationale_pairs, ConRationale, ExtractionResult, ProPair};
use crate::iot::train_extractor;
use crate::matching::{build_matcher_input, gate_features, predict_match, MatcherExample, MatcherParams};
use crate::metrics::{compute_metrics, extraction_metrics, ExtractionMetrics, MetricsReport, PairOutcome};
use crate::sinkhorn::solve_entropic_ot;
use crate::types::{CasePairRecord, MatchLabel, RationaleKind, TransportPlan, TransportProblem};

/// Noise-free stage-1 output for one pair.
#[derive(Clone, Debug)]
pub struct PairExtraction {
    pub plan: TransportPlan,
    pub labels_x: Vec<RationaleKind>,
    pub labels_y: Vec<RationaleKind>,
    pub extraction: ExtractionResult,
}

pub fn extract_pair(params: &ExtractorParams, record: &CasePairRecord, config: &TrainConfig) -> Result<PairExtraction> {
    let (x, y) = (record.x.matrix()?, record.y.matrix()?);
    let fwd = forward_pair(
        params,
        x.view(),
        y.view(),
        config.epsilon,
        &ForwardOptions::default(),
        None::<&mut ChaCha8Rng>,
    )?;
    let problem = TransportProblem::uniform(fwd.bundle.c_total.clone(), config.gamma);
    let plan = solve_entropic_ot(&problem, config.solver_tol, config.solver_max_iter).map_err(|e| Error::PairSolve {
        pair_id: record.id.clone(),
        source: Box::new(e),
    })?;
    let extraction = extract_rationale_pairs(&plan.plan, &fwd.labels_x, &fwd.labels_y, config.tau);
    Ok(PairExtraction {
        plan,
        labels_x: fwd.labels_x,
        labels_y: fwd.labels_y,
        extraction,
    })
}

pub fn extract_corpus(params: &ExtractorParams, records: &[CasePairRecord], config: &TrainConfig) -> Result<Vec<PairExtraction>> {
    records.iter().map(|r| extract_pair(params, r, config)).collect()
}

/// Scores extractions against the unmasked gold of `records`.
pub fn score_extractions(records: &[CasePairRecord], extractions: &[PairExtraction]) -> Result<ExtractionMetrics> {
    if records.len() != extractions.len() {
        return Err(Error::DimensionMismatch {
            context: "extractions vs records".into(),
            expected: records.len(),
            actual: extractions.len(),
        });
    }
    extraction_metrics(records.iter().zip(extractions).map(|(record, e)| PairOutcome {
        record,
        labels_x: &e.labels_x,
        labels_y: &e.labels_y,
        extraction: &e.extraction,
    }))
}

/// Extraction implied by the gold labels: every gold positive is a pro pair.
pub fn gold_extraction(record: &CasePairRecord) -> Result<ExtractionResult> {
    let kx = record
        .x
        .rationale_labels
        .as_deref()
        .ok_or_else(|| Error::MissingLabels(format!("pair {} side x", record.id)))?;
    let ky = record
        .y
        .rationale_labels
        .as_deref()
        .ok_or_else(|| Error::MissingLabels(format!("pair {} side y", record.id)))?;
    let plan = record.alignments.values.mapv(|v| if v { 1.0 } else { 0.0 });
    Ok(extract_rationale_pairs(&plan, kx, ky, 0.5))
}

/// Matcher inputs from stage-1 extractions; gold explanation features come from the gold extraction.
pub fn matcher_examples(records: &[CasePairRecord], extractions: &[PairExtraction], mode: InputMode) -> Result<Vec<MatcherExample>> {
    records
        .iter()
        .zip(extractions)
        .map(|(r, e)| {
            let (x, y) = (r.x.matrix()?, r.y.matrix()?);
            let (input, _) = build_matcher_input(&e.extraction, x.view(), y.view(), mode);
            let gold = gold_extraction(r)?;
            let mut gold_features = Array1::from(render_explanation(&gold, x.view(), y.view(), r.match_label).features);
            gate_features(gold_features.view_mut(), mode);
            Ok(MatcherExample {
                input,
                gold: r.match_label,
                gold_features,
            })
        })
        .collect()
}

/// Per-pair prediction output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPrediction {
    pub id: String,
    pub label: u8,
    pub distribution: [f64; 3],
    pub chosen_explanation_text: String,
    pub labels_x: Vec<RationaleKind>,
    pub labels_y: Vec<RationaleKind>,
    pub pro_pairs: Vec<ProPair>,
    pub con_x: Vec<ConRationale>,
    pub con_y: Vec<ConRationale>,
}

impl PairPrediction {
    pub fn match_label(&self) -> Result<MatchLabel> {
        MatchLabel::from_index(self.label as usize)
            .ok_or_else(|| Error::InvalidConfig(format!("prediction {}: label {} out of range", self.id, self.label)))
    }

    pub fn extraction(&self) -> ExtractionResult {
        ExtractionResult {
            pro_pairs: self.pro_pairs.clone(),
            con_x: self.con_x.clone(),
            con_y: self.con_y.clone(),
        }
    }
}

/// Match and extraction metrics of `predictions` against `records`, joined by id.
pub fn evaluate_predictions(records: &[CasePairRecord], predictions: &[PairPrediction]) -> Result<MetricsReport> {
    let by_id: HashMap<&str, &CasePairRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut gold = Vec::with_capacity(predictions.len());
    let mut predicted = Vec::with_capacity(predictions.len());
    let mut joined = Vec::with_capacity(predictions.len());
    for p in predictions {
        let record = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::EmptyInput(format!("no record with id {} in the data file", p.id)))?;
        gold.push(record.match_label);
        predicted.push(p.match_label()?);
        joined.push((*record, p, p.extraction()));
    }
    let mut report = compute_metrics(&predicted, &gold)?;
    let with_labels = joined
        .iter()
        .all(|(r, _, _)| r.x.rationale_labels.is_some() && r.y.rationale_labels.is_some());
    if with_labels {
        report.extraction = Some(extraction_metrics(joined.iter().map(|(record, p, e)| PairOutcome {
            record,
            labels_x: &p.labels_x,
            labels_y: &p.labels_y,
            extraction: e,
        }))?);
    }
    Ok(report)
}

pub fn predict_pairs(
    matcher: &MatcherParams,
    records: &[CasePairRecord],
    extractions: &[PairExtraction],
    mode: InputMode,
) -> Result<Vec<PairPrediction>> {
    records
        .iter()
        .zip(extractions)
        .map(|(r, e)| {
            let (x, y): (Array2<f64>, Array2<f64>) = (r.x.matrix()?, r.y.matrix()?);
            let (input, candidates) = build_matcher_input(&e.extraction, x.view(), y.view(), mode);
            let p = predict_match(matcher, &input)?;
            Ok(PairPrediction {
                id: r.id.clone(),
                label: p.label.index() as u8,
                distribution: p.distribution,
                chosen_explanation_text: candidates[p.chosen].text.clone(),
                labels_x: e.labels_x.clone(),
                labels_y: e.labels_y.clone(),
                pro_pairs: e.extraction.pro_pairs.clone(),
                con_x: e.extraction.con_x.clone(),
                con_y: e.extraction.con_y.clone(),
            })
        })
        .collect()
}

pub const SWEEP_RATIOS: [f64; 5] = [0.0, 0.1, 0.2, 0.5, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub seed: u64,
    pub extraction_accuracy: f64,
    pub f1: f64,
}

/// Trains stage 1 on `records` masked to `ratio` and scores it against the unmasked gold.
pub fn run_label_ratio(records: &[CasePairRecord], config: &TrainConfig, ratio: f64, seed: u64) -> Result<SweepRow> {
    let masked = mask_alignments(records, ratio, seed)?;
    let cfg = TrainConfig { seed, ..config.clone() };
    let (params, _) = train_extractor(&masked, &cfg)?;
    let metrics = score_extractions(records, &extract_corpus(&params, records, &cfg)?)?;
    Ok(SweepRow {
        ratio,
        seed,
        extraction_accuracy: metrics.rationale_accuracy,
        f1: metrics.f1,
    })
}

pub fn sweep_labels(records: &[CasePairRecord], config: &TrainConfig, ratios: &[f64], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(ratios.len() * seeds.len());
    for &ratio in ratios {
        for &seed in seeds {
            rows.push(run_label_ratio(records, config, ratio, seed)?);
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ratio,seed,extraction_accuracy,f1\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.ratio, r.seed, r.extraction_accuracy, r.f1));
    }
    out
}

//! Stage-3 matcher: scores the three candidate explanations against the pooled
//! rationale embeddings and predicts the match label.
//!
//! One sigmoid perceptron scores every candidate; a 3×3 head maps the three
//! scores to class logits. A separate tanh projection of the pooled case
//! embeddings feeds the two cosine hinge losses.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{InputMode, SentenceSelection, TrainConfig};
use crate::error::{Error, Result};
use crate::explain::{candidate_matrix, feature_dim, render_candidates, ExplanationRecord, COUNT_SLOTS};
use crate::extract::ExtractionResult;
use crate::nn::{self, Adam, Parameters};
use crate::types::MatchLabel;

#[derive(Clone, Debug, PartialEq)]
pub struct MatcherParams {
    pub embed_dim: usize,
    pub scorer_w1: Array2<f64>,
    pub scorer_b1: Array1<f64>,
    pub scorer_w2: Array1<f64>,
    pub scorer_b2: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    pub sim_w: Array2<f64>,
    pub sim_b: Array1<f64>,
}

impl MatcherParams {
    pub fn zeros(embed_dim: usize, hidden: usize) -> Self {
        let f = feature_dim(embed_dim);
        let input = 2 * embed_dim + f;
        Self {
            embed_dim,
            scorer_w1: Array2::zeros((hidden, input)),
            scorer_b1: Array1::zeros(hidden),
            scorer_w2: Array1::zeros(hidden),
            scorer_b2: Array1::zeros(1),
            head_w: Array2::zeros((3, 3)),
            head_b: Array1::zeros(3),
            sim_w: Array2::zeros((f, 2 * embed_dim)),
            sim_b: Array1::zeros(f),
        }
    }

    pub fn init<R: Rng>(embed_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(embed_dim, hidden);
        p.scorer_w1 = nn::glorot(rng, p.scorer_w1.nrows(), p.scorer_w1.ncols());
        p.scorer_w2 = nn::glorot(rng, 1, hidden).row(0).to_owned();
        p.head_w = nn::glorot(rng, 3, 3);
        p.sim_w = nn::glorot(rng, p.sim_w.nrows(), p.sim_w.ncols());
        p
    }

    pub fn hidden(&self) -> usize {
        self.scorer_b1.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.sim_b.len()
    }
}

impl Parameters for MatcherParams {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        vec![
            ("scorer.w1".into(), nn::shape_of(&self.scorer_w1), nn::slice_of(&self.scorer_w1)),
            ("scorer.b1".into(), nn::shape_of(&self.scorer_b1), nn::slice_of(&self.scorer_b1)),
            ("scorer.w2".into(), nn::shape_of(&self.scorer_w2), nn::slice_of(&self.scorer_w2)),
            ("scorer.b2".into(), nn::shape_of(&self.scorer_b2), nn::slice_of(&self.scorer_b2)),
            ("head.w".into(), nn::shape_of(&self.head_w), nn::slice_of(&self.head_w)),
            ("head.b".into(), nn::shape_of(&self.head_b), nn::slice_of(&self.head_b)),
            ("sim.w".into(), nn::shape_of(&self.sim_w), nn::slice_of(&self.sim_w)),
            ("sim.b".into(), nn::shape_of(&self.sim_b), nn::slice_of(&self.sim_b)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            nn::slice_of_mut(&mut self.scorer_w1),
            nn::slice_of_mut(&mut self.scorer_b1),
            nn::slice_of_mut(&mut self.scorer_w2),
            nn::slice_of_mut(&mut self.scorer_b2),
            nn::slice_of_mut(&mut self.head_w),
            nn::slice_of_mut(&mut self.head_b),
            nn::slice_of_mut(&mut self.sim_w),
            nn::slice_of_mut(&mut self.sim_b),
        ]
    }
}

fn mean_of_rows(x: ArrayView2<f64>, rows: impl IntoIterator<Item = usize>) -> Array1<f64> {
    let mut acc = Array1::zeros(x.ncols());
    let mut count = 0;
    for r in rows {
        acc += &x.row(r);
        count += 1;
    }
    if count > 0 {
        acc /= count as f64;
    }
    acc
}

/// Mean embedding of the extracted rationales on each side; zeros for a side with none.
pub fn pool_rationales(extraction: &ExtractionResult, x: ArrayView2<f64>, y: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    (
        mean_of_rows(x, extraction.rationales_x()),
        mean_of_rows(y, extraction.rationales_y()),
    )
}

/// Pooled case embeddings under a sentence selection.
pub fn pool_sentences(
    selection: SentenceSelection,
    extraction: &ExtractionResult,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
) -> (Array1<f64>, Array1<f64>) {
    match selection {
        SentenceSelection::Rationales => pool_rationales(extraction, x, y),
        SentenceSelection::All => (mean_of_rows(x, 0..x.nrows()), mean_of_rows(y, 0..y.nrows())),
        SentenceSelection::NonRationales => {
            let (rx, ry) = (extraction.rationales_x(), extraction.rationales_y());
            (
                mean_of_rows(x, (0..x.nrows()).filter(|i| !rx.contains(i))),
                mean_of_rows(y, (0..y.nrows()).filter(|i| !ry.contains(i))),
            )
        }
    }
}

/// Everything the matcher reads for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MatcherInput {
    pub s_x: Array1<f64>,
    pub s_y: Array1<f64>,
    /// `3 × F` candidate features, row `k` for hypothesis `k`.
    pub candidates: Array2<f64>,
}

/// Gates the evidence by input mode. Without explanations only the hypothesis
/// one-hot survives in each candidate row; without sentences `s_x`, `s_y` are zero.
pub fn build_matcher_input(
    extraction: &ExtractionResult,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    mode: InputMode,
) -> (MatcherInput, [ExplanationRecord; 3]) {
    let d = x.ncols();
    let (s_x, s_y) = match mode.sentence_selection() {
        Some(sel) => pool_sentences(sel, extraction, x, y),
        None => (Array1::zeros(d), Array1::zeros(d)),
    };
    let records = render_candidates(extraction, x, y);
    let mut candidates = candidate_matrix(&records);
    for row in candidates.outer_iter_mut() {
        gate_features(row, mode);
    }
    (MatcherInput { s_x, s_y, candidates }, records)
}

/// Zeroes everything but the hypothesis one-hot when `mode` excludes explanations.
pub fn gate_features(mut features: ArrayViewMut1<f64>, mode: InputMode) {
    if !mode.uses_explanations() {
        features.slice_mut(s![..COUNT_SLOTS - MatchLabel::COUNT]).fill(0.0);
        features.slice_mut(s![COUNT_SLOTS..]).fill(0.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPrediction {
    pub label: MatchLabel,
    /// Index of the candidate with the highest score.
    pub chosen: usize,
    pub distribution: [f64; 3],
    pub scores: [f64; 3],
}

struct ScorerCache {
    inputs: Array2<f64>,
    hidden: Array2<f64>,
    scores: Array1<f64>,
}

fn scorer_forward(params: &MatcherParams, input: &MatcherInput) -> ScorerCache {
    let rep = concatenate![Axis(0), input.s_x, input.s_y];
    let mut inputs = Array2::zeros((3, rep.len() + input.candidates.ncols()));
    for k in 0..3 {
        inputs.slice_mut(s![k, ..rep.len()]).assign(&rep);
        inputs.slice_mut(s![k, rep.len()..]).assign(&input.candidates.row(k));
    }
    let mut hidden = inputs.dot(&params.scorer_w1.t()) + &params.scorer_b1;
    hidden.mapv_inplace(nn::sigmoid);
    let scores = (hidden.dot(&params.scorer_w2) + params.scorer_b2[0]).mapv(nn::sigmoid);
    ScorerCache { inputs, hidden, scores }
}

/// Head map from candidate scores to a class distribution.
pub fn head_distribution(params: &MatcherParams, scores: ArrayView1<f64>) -> Array1<f64> {
    let logits = params.head_w.dot(&scores) + &params.head_b;
    nn::softmax(logits.view())
}

fn check_input(params: &MatcherParams, input: &MatcherInput) -> Result<()> {
    let d = params.embed_dim;
    if input.s_x.len() != d || input.s_y.len() != d {
        return Err(Error::DimensionMismatch {
            context: "pooled embeddings".into(),
            expected: d,
            actual: input.s_x.len().max(input.s_y.len()),
        });
    }
    if input.candidates.dim() != (3, params.feature_dim()) {
        return Err(Error::DimensionMismatch {
            context: "candidate features".into(),
            expected: params.feature_dim(),
            actual: input.candidates.ncols(),
        });
    }
    Ok(())
}

pub fn predict_match(params: &MatcherParams, input: &MatcherInput) -> Result<MatchPrediction> {
    check_input(params, input)?;
    let cache = scorer_forward(params, input);
    let dist = head_distribution(params, cache.scores.view());
    let label = MatchLabel::from_index(nn::argmax(dist.view())).expect("three classes");
    Ok(MatchPrediction {
        label,
        chosen: nn::argmax(cache.scores.view()),
        distribution: [dist[0], dist[1], dist[2]],
        scores: [cache.scores[0], cache.scores[1], cache.scores[2]],
    })
}

/// Negative log-probability of the gold class.
pub fn loss_match(distribution: &[f64; 3], gold: MatchLabel) -> f64 {
    -distribution[gold.index()].max(f64::MIN_POSITIVE).ln()
}

/// `tanh(W [s_x; s_y] + b)`.
pub fn sim_project(params: &MatcherParams, s_x: ArrayView1<f64>, s_y: ArrayView1<f64>) -> Array1<f64> {
    let v = concatenate![Axis(0), s_x, s_y];
    (params.sim_w.dot(&v) + &params.sim_b).mapv(f64::tanh)
}

/// `sum_k max(0, cos(q, c_k) - cos(q, gold))` over the rows of `candidates`.
pub fn fidelity_hinge(q: ArrayView1<f64>, candidates: ArrayView2<f64>, gold: ArrayView1<f64>) -> f64 {
    let g = nn::cosine(q, gold);
    candidates.outer_iter().map(|c| (nn::cosine(q, c) - g).max(0.0)).sum()
}

/// `sum_k sum_l max(0, cos(q, neg_l[k]) - cos(q, c_k))`.
pub fn contrastive_hinge(q: ArrayView1<f64>, candidates: ArrayView2<f64>, negatives: &[ArrayView2<f64>]) -> f64 {
    let mut total = 0.0;
    for (k, c) in candidates.outer_iter().enumerate() {
        let pos = nn::cosine(q, c);
        for neg in negatives {
            total += (nn::cosine(q, neg.row(k)) - pos).max(0.0);
        }
    }
    total
}

pub fn loss_explanation_fidelity(params: &MatcherParams, input: &MatcherInput, gold_features: ArrayView1<f64>) -> f64 {
    let q = sim_project(params, input.s_x.view(), input.s_y.view());
    fidelity_hinge(q.view(), input.candidates.view(), gold_features)
}

pub fn loss_contrastive(params: &MatcherParams, input: &MatcherInput, negatives: &[ArrayView2<f64>]) -> f64 {
    let q = sim_project(params, input.s_x.view(), input.s_y.view());
    contrastive_hinge(q.view(), input.candidates.view(), negatives)
}

/// A training example: matcher input, gold label and the gold explanation features.
#[derive(Clone, Debug, PartialEq)]
pub struct MatcherExample {
    pub input: MatcherInput,
    pub gold: MatchLabel,
    pub gold_features: Array1<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatcherLosses {
    pub l_match: f64,
    pub l_fidelity: f64,
    pub l_contrastive: f64,
}

impl MatcherLosses {
    pub fn total(&self, gamma3: f64) -> f64 {
        self.l_match + gamma3 * (self.l_fidelity + self.l_contrastive)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatcherEpoch {
    pub epoch: usize,
    pub losses: MatcherLosses,
}

/// Accumulates `d(-log p_gold)` for one example into `grad`.
fn match_backward(params: &MatcherParams, input: &MatcherInput, gold: MatchLabel, scale: f64, grad: &mut MatcherParams) -> f64 {
    let cache = scorer_forward(params, input);
    let dist = head_distribution(params, cache.scores.view());
    let loss = -dist[gold.index()].max(f64::MIN_POSITIVE).ln();
    let mut d_logits = dist;
    d_logits[gold.index()] -= 1.0;
    d_logits *= scale;
    for i in 0..3 {
        for j in 0..3 {
            grad.head_w[[i, j]] += d_logits[i] * cache.scores[j];
        }
    }
    grad.head_b += &d_logits;
    let d_scores = params.head_w.t().dot(&d_logits);
    for k in 0..3 {
        let z = cache.scores[k];
        let d_pre2 = d_scores[k] * z * (1.0 - z);
        let h = cache.hidden.row(k);
        grad.scorer_w2.scaled_add(d_pre2, &h);
        grad.scorer_b2[0] += d_pre2;
        let d_pre1 = Array1::from_shape_fn(h.len(), |j| d_pre2 * params.scorer_w2[j] * h[j] * (1.0 - h[j]));
        for (j, &g) in d_pre1.iter().enumerate() {
            if g != 0.0 {
                grad.scorer_w1.row_mut(j).scaled_add(g, &cache.inputs.row(k));
            }
        }
        grad.scorer_b1 += &d_pre1;
    }
    loss
}

/// Hinge terms for one example and their gradient into the similarity projection.
fn hinge_backward(
    params: &MatcherParams,
    input: &MatcherInput,
    gold_features: ArrayView1<f64>,
    negatives: &[ArrayView2<f64>],
    scale: f64,
    grad: &mut MatcherParams,
) -> (f64, f64) {
    let v = concatenate![Axis(0), input.s_x, input.s_y];
    let q = (params.sim_w.dot(&v) + &params.sim_b).mapv(f64::tanh);
    let mut d_q = Array1::zeros(q.len());
    let g_cos = nn::cosine(q.view(), gold_features);
    let mut l_e = 0.0;
    let mut l_c = 0.0;
    for (k, c) in input.candidates.outer_iter().enumerate() {
        let c_cos = nn::cosine(q.view(), c);
        let term = c_cos - g_cos;
        if term > 0.0 {
            l_e += term;
            d_q += &nn::cosine_grad_a(q.view(), c);
            d_q -= &nn::cosine_grad_a(q.view(), gold_features);
        }
        for neg in negatives {
            let term = nn::cosine(q.view(), neg.row(k)) - c_cos;
            if term > 0.0 {
                l_c += term;
                d_q += &nn::cosine_grad_a(q.view(), neg.row(k));
                d_q -= &nn::cosine_grad_a(q.view(), c);
            }
        }
    }
    if scale != 0.0 {
        let d_pre = Array1::from_shape_fn(q.len(), |i| scale * d_q[i] * (1.0 - q[i] * q[i]));
        for (i, &g) in d_pre.iter().enumerate() {
            if g != 0.0 {
                grad.sim_w.row_mut(i).scaled_add(g, &v);
            }
        }
        grad.sim_b += &d_pre;
    }
    (l_e, l_c)
}

/// Mean losses over a batch and the gradient of `L_M + gamma3 (L_E + L_C)`.
///
/// Negatives for each example are the candidates of every other example in the batch;
/// row `k` of a negative is compared with row `k` of the example, so only same-hypothesis
/// candidates are contrasted.
pub fn batch_loss_and_grad(params: &MatcherParams, batch: &[&MatcherExample], gamma3: f64) -> (MatcherLosses, MatcherParams) {
    let mut grad = params.zeros_like();
    let mut losses = MatcherLosses::default();
    let scale = 1.0 / batch.len().max(1) as f64;
    for (i, ex) in batch.iter().enumerate() {
        losses.l_match += match_backward(params, &ex.input, ex.gold, scale, &mut grad);
        let negatives: Vec<ArrayView2<f64>> = batch
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, other)| other.input.candidates.view())
            .collect();
        let (l_e, l_c) = hinge_backward(params, &ex.input, ex.gold_features.view(), &negatives, scale * gamma3, &mut grad);
        losses.l_fidelity += l_e;
        losses.l_contrastive += l_c;
    }
    losses.l_match *= scale;
    losses.l_fidelity *= scale;
    losses.l_contrastive *= scale;
    (losses, grad)
}

pub fn init_matcher(embed_dim: usize, config: &TrainConfig) -> MatcherParams {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    MatcherParams::init(embed_dim, config.matcher_hidden, &mut rng)
}

/// Mini-batch Adam on `L_M + gamma3 (L_E + L_C)` with rate `eta3` and batch `batch3`.
pub fn train_matcher(examples: &[MatcherExample], config: &TrainConfig) -> Result<(MatcherParams, Vec<MatcherEpoch>)> {
    config.validate()?;
    let first = examples.first().ok_or_else(|| Error::EmptyInput("matcher training set".into()))?;
    let mut params = init_matcher(first.input.s_x.len(), config);
    for ex in examples {
        check_input(&params, &ex.input)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);
    let mut adam = Adam::new(config.eta3, params.num_params());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs3);
    for epoch in 0..config.epochs3 {
        order.shuffle(&mut rng);
        let mut sum = MatcherLosses::default();
        for chunk in order.chunks(config.batch3) {
            let batch: Vec<&MatcherExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let (losses, mut grad) = batch_loss_and_grad(&params, &batch, config.gamma3);
            let w = batch.len() as f64;
            sum.l_match += losses.l_match * w;
            sum.l_fidelity += losses.l_fidelity * w;
            sum.l_contrastive += losses.l_contrastive * w;
            nn::clip_global_norm(&mut grad, config.clip_norm);
            adam.step(&mut params, &grad);
        }
        let n = examples.len() as f64;
        trace.push(MatcherEpoch {
            epoch: epoch + 1,
            losses: MatcherLosses {
                l_match: sum.l_match / n,
                l_fidelity: sum.l_fidelity / n,
                l_contrastive: sum.l_contrastive / n,
            },
        });
    }
    Ok((params, trace))
}

pub fn matcher_trace_to_csv(trace: &[MatcherEpoch]) -> String {
    let mut out = String::from("epoch,l_match,l_fidelity,l_contrastive\n");
    for row in trace {
        out.push_str(&format!(
            "{},{:.10},{:.10},{:.10}\n",
            row.epoch, row.losses.l_match, row.losses.l_fidelity, row.losses.l_contrastive
        ));
    }
    out
}

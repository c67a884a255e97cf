//! Learnable affinity matrix `C = epsilon * C_r + C_s`.
//!
//! `C_s` is the distance between projected sentence embeddings; `C_r` marks
//! sentence pairs that the classifier assigns the same rationale kind. The
//! hard kinds enter `C_r` through a straight-through Gumbel one-hot, so both
//! branches receive gradients from any loss on `C`.

mod classifier;
mod gumbel;
mod params;
mod projection;

pub use classifier::{
    classify_backward, classify_forward, classify_forward_masked, classify_rationales, labels_from_logits, Classification, ClassifierCache,
};
pub use gumbel::{gumbel_one_hot, one_hot_rows, rationale_cost, rationale_cost_backward, sample_gumbel, GumbelSample, Noise};
pub use params::{ExtractorParams, GatedConvLayer};
pub use projection::{project, project_backward, project_forward, semantic_cost, semantic_cost_backward, ProjectionCache};

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::RationaleKind;

/// The assembled affinity matrix and its two components.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityBundle {
    pub c_semantic: Array2<f64>,
    pub c_rationale: Array2<f64>,
    pub mask: Array2<f64>,
    pub epsilon: f64,
    pub c_total: Array2<f64>,
}

/// `c_total = epsilon * c_rationale + c_semantic`.
pub fn assemble_affinity(c_rationale: Array2<f64>, c_semantic: Array2<f64>, mask: Array2<f64>, epsilon: f64) -> Result<AffinityBundle> {
    if c_rationale.dim() != c_semantic.dim() || mask.dim() != c_semantic.dim() {
        return Err(Error::DimensionMismatch {
            context: "affinity components".into(),
            expected: c_semantic.len(),
            actual: c_rationale.len(),
        });
    }
    if !(epsilon <= 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be <= 0, got {epsilon}")));
    }
    let c_total = &c_rationale * epsilon + &c_semantic;
    Ok(AffinityBundle {
        c_semantic,
        c_rationale,
        mask,
        epsilon,
        c_total,
    })
}

/// How the rationale one-hots are formed in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// Hard one-hot forward, softmax backward.
    StraightThrough,
    /// Soft rows in the forward pass too; the differentiable surrogate used by gradient checks.
    Relaxed,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub temperature: f64,
    pub relaxation: Relaxation,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            relaxation: Relaxation::StraightThrough,
        }
    }
}

/// Everything computed for one case pair, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct PairForward {
    pub bundle: AffinityBundle,
    pub proj_x: ProjectionCache,
    pub proj_y: ProjectionCache,
    pub cls_x: ClassifierCache,
    pub cls_y: ClassifierCache,
    pub samples_x: Vec<GumbelSample>,
    pub samples_y: Vec<GumbelSample>,
    pub rows_x: Array2<f64>,
    pub rows_y: Array2<f64>,
    /// Kinds that entered `C_r` (noisy during training, plain argmax otherwise).
    pub labels_x: Vec<RationaleKind>,
    pub labels_y: Vec<RationaleKind>,
}

fn sample_rows<R: Rng>(
    logits: &Array2<f64>,
    opts: &ForwardOptions,
    rng: &mut Option<&mut R>,
) -> (Vec<GumbelSample>, Array2<f64>, Vec<RationaleKind>) {
    let mut samples = Vec::with_capacity(logits.nrows());
    for row in logits.outer_iter() {
        let noise = match rng {
            Some(r) => Noise::Sampled(&mut **r),
            None => Noise::Off,
        };
        samples.push(gumbel_one_hot(row, opts.temperature, noise));
    }
    let mut rows = Array2::zeros(logits.raw_dim());
    for (i, s) in samples.iter().enumerate() {
        let src = match opts.relaxation {
            Relaxation::StraightThrough => &s.one_hot,
            Relaxation::Relaxed => &s.soft,
        };
        rows.row_mut(i).assign(src);
    }
    let labels = samples
        .iter()
        .map(|s| RationaleKind::from_index(s.index).expect("four classes"))
        .collect();
    (samples, rows, labels)
}

/// Builds the affinity matrix for a pair. Pass `rng` to draw Gumbel noise.
pub fn forward_pair<R: Rng>(
    params: &ExtractorParams,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    epsilon: f64,
    opts: &ForwardOptions,
    mut rng: Option<&mut R>,
) -> Result<PairForward> {
    let proj_x = project_forward(params, x)?;
    let proj_y = project_forward(params, y)?;
    let cls_x = classify_forward(params, x)?;
    let cls_y = classify_forward(params, y)?;
    let (samples_x, rows_x, labels_x) = sample_rows(&cls_x.logits, opts, &mut rng);
    let (samples_y, rows_y, labels_y) = sample_rows(&cls_y.logits, opts, &mut rng);
    let mask = Array2::ones((x.nrows(), y.nrows()));
    let c_r = rationale_cost(&rows_x, &rows_y, &mask);
    let c_s = semantic_cost(proj_x.output.view(), proj_y.output.view(), params.arch.metric);
    let bundle = assemble_affinity(c_r, c_s, mask, epsilon)?;
    Ok(PairForward {
        bundle,
        proj_x,
        proj_y,
        cls_x,
        cls_y,
        samples_x,
        samples_y,
        rows_x,
        rows_y,
        labels_x,
        labels_y,
    })
}

/// Backpropagates `d_cost` (gradient w.r.t. `c_total`) plus optional direct logit
/// gradients into `grad`.
pub fn backward_pair(
    params: &ExtractorParams,
    fwd: &PairForward,
    d_cost: &Array2<f64>,
    d_logits_x: Option<&Array2<f64>>,
    d_logits_y: Option<&Array2<f64>>,
    grad: &mut ExtractorParams,
) {
    let b = &fwd.bundle;
    let (dpx, dpy) = semantic_cost_backward(
        fwd.proj_x.output.view(),
        fwd.proj_y.output.view(),
        &b.c_semantic,
        d_cost,
        params.arch.metric,
    );
    project_backward(params, &fwd.proj_x, &dpx, grad);
    project_backward(params, &fwd.proj_y, &dpy, grad);

    let d_cr = d_cost * b.epsilon;
    let (drx, dry) = rationale_cost_backward(&fwd.rows_x, &fwd.rows_y, &b.mask, &d_cr);
    for (samples, d_rows, extra, cache) in [
        (&fwd.samples_x, drx, d_logits_x, &fwd.cls_x),
        (&fwd.samples_y, dry, d_logits_y, &fwd.cls_y),
    ] {
        let mut d_logits = Array2::zeros(cache.logits.raw_dim());
        if b.epsilon != 0.0 {
            for (i, s) in samples.iter().enumerate() {
                d_logits.row_mut(i).assign(&s.backward(d_rows.row(i)));
            }
        }
        if let Some(e) = extra {
            d_logits += e;
        }
        classify_backward(params, cache, &d_logits, grad);
    }
}

//! Stage 1: learning the affinity network by inverse optimal transport.
//!
//! Each step builds `C` for a pair, solves the entropic transport problem,
//! scores the plan against the observed alignment labels and pushes the
//! gradient with respect to `C` back into both affinity branches.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{backward_pair, forward_pair, AffinityBundle, ExtractorParams, ForwardOptions, Relaxation};
use crate::config::{CostGradient, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Adam, Parameters};
use crate::sinkhorn::solve_entropic_ot;
use crate::types::{AlignmentLabels, CasePairRecord, RationaleKind, TransportPlan, TransportProblem};

/// Stage-1 loss components for one pair or averaged over an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Losses {
    pub l_rationale: f64,
    pub l_alignment: f64,
    pub total: f64,
}

impl Stage1Losses {
    pub fn new(l_rationale: f64, l_alignment: f64, gamma1: f64) -> Self {
        Self {
            l_rationale,
            l_alignment,
            total: l_rationale + gamma1 * l_alignment,
        }
    }
}

/// One row of the stage-1 loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub losses: Stage1Losses,
}

/// Mean negative log-likelihood of the gold kinds over every sentence of both cases,
/// together with its gradient with respect to each logit matrix.
pub fn loss_rationale_with_grad(
    logits_x: &Array2<f64>,
    logits_y: &Array2<f64>,
    gold_x: Option<&[RationaleKind]>,
    gold_y: Option<&[RationaleKind]>,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let gold_x = gold_x.ok_or_else(|| Error::MissingLabels("x".into()))?;
    let gold_y = gold_y.ok_or_else(|| Error::MissingLabels("y".into()))?;
    for (logits, gold, side) in [(logits_x, gold_x, "x"), (logits_y, gold_y, "y")] {
        if logits.nrows() != gold.len() {
            return Err(Error::DimensionMismatch {
                context: format!("gold labels for {side}"),
                expected: logits.nrows(),
                actual: gold.len(),
            });
        }
    }
    let count = (gold_x.len() + gold_y.len()) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(2);
    for (logits, gold) in [(logits_x, gold_x), (logits_y, gold_y)] {
        let mut g = Array2::zeros(logits.raw_dim());
        for (i, (row, &k)) in logits.outer_iter().zip(gold).enumerate() {
            let lp = nn::log_softmax(row);
            loss -= lp[k.index()];
            let mut gr = lp.mapv(f64::exp);
            gr[k.index()] -= 1.0;
            g.row_mut(i).assign(&(gr / count));
        }
        grads.push(g);
    }
    let gy = grads.pop().expect("two sides");
    let gx = grads.pop().expect("two sides");
    Ok((loss / count, gx, gy))
}

pub fn loss_rationale(
    logits_x: &Array2<f64>,
    logits_y: &Array2<f64>,
    gold_x: Option<&[RationaleKind]>,
    gold_y: Option<&[RationaleKind]>,
) -> Result<f64> {
    loss_rationale_with_grad(logits_x, logits_y, gold_x, gold_y).map(|(l, _, _)| l)
}

/// Same nonzero predicted kind.
pub fn agreement_mask(kinds_x: &[RationaleKind], kinds_y: &[RationaleKind]) -> Array2<f64> {
    Array2::from_shape_fn((kinds_x.len(), kinds_y.len()), |(m, n)| {
        let (a, b) = (kinds_x[m], kinds_y[n]);
        if a == b && a.is_rationale() {
            1.0
        } else {
            0.0
        }
    })
}

/// Supervised and unsupervised parts of the alignment loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentLoss {
    pub supervised: f64,
    pub unsupervised: f64,
}

impl AlignmentLoss {
    pub fn total(&self) -> f64 {
        self.supervised + self.unsupervised
    }
}

/// `-(1/P) sum log a*_mn` over observed positives plus `gamma2 * sum_agree c_mn`.
pub fn loss_alignment(
    plan: &TransportPlan,
    labels: &AlignmentLabels,
    affinity: &AffinityBundle,
    kinds_x: &[RationaleKind],
    kinds_y: &[RationaleKind],
    gamma2: f64,
) -> AlignmentLoss {
    assert_eq!(plan.shape(), labels.shape(), "plan and labels shapes differ");
    let positives = labels.observed_positives();
    let supervised = if positives.is_empty() {
        0.0
    } else {
        -positives.iter().map(|&ix| plan.plan[ix].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / positives.len() as f64
    };
    let unsupervised = if gamma2 == 0.0 {
        0.0
    } else {
        gamma2 * (&agreement_mask(kinds_x, kinds_y) * &affinity.c_total).sum()
    };
    AlignmentLoss { supervised, unsupervised }
}

fn positive_weights(labels: &AlignmentLabels) -> (Array2<f64>, usize) {
    let positives = labels.observed_positives();
    let mut w = Array2::zeros(labels.shape());
    if positives.is_empty() {
        return (w, 0);
    }
    let p = positives.len() as f64;
    for ix in &positives {
        w[*ix] = 1.0 / p;
    }
    (w, positives.len())
}

/// Gradient of [`loss_alignment`] with respect to `c_total`.
///
/// `FixedPotentials` holds `log_u`, `log_v` constant, giving `A_obs / (P gamma)`.
/// `Implicit` differentiates through the marginal constraints of the converged
/// plan, which is the exact derivative of the re-solved loss.
pub fn grad_alignment_wrt_cost(
    plan: &TransportPlan,
    labels: &AlignmentLabels,
    gamma: f64,
    gamma2: f64,
    kinds_x: &[RationaleKind],
    kinds_y: &[RationaleKind],
    rule: CostGradient,
) -> Array2<f64> {
    let (w, count) = positive_weights(labels);
    let mut grad = if count == 0 {
        Array2::zeros(labels.shape())
    } else {
        match rule {
            CostGradient::FixedPotentials => &w / gamma,
            CostGradient::Implicit => implicit_supervised_grad(&plan.plan, &w, gamma),
        }
    };
    if gamma2 != 0.0 {
        grad.scaled_add(gamma2, &agreement_mask(kinds_x, kinds_y));
    }
    grad
}

/// Exact gradient of `-sum w_mn log a_mn` through the entropic plan.
///
/// With `a_mn = exp((f_m + g_n - c_mn)/gamma)` and the marginal constraints held by
/// implicit differentiation, the gradient is
/// `(w_kl + a_kl (alpha_k + beta_l)) / gamma`, where `(alpha, beta)` solves
/// `[[diag(A 1), A], [A^T, diag(A^T 1)]] (alpha, beta) = -(w 1, w^T 1)`.
/// The system has a one-dimensional null space `(1, -1)`; adding its outer product
/// fixes the gauge without changing the solution on the range.
fn implicit_supervised_grad(plan: &Array2<f64>, w: &Array2<f64>, gamma: f64) -> Array2<f64> {
    let (m, n) = plan.dim();
    let size = m + n;
    let rows = plan.sum_axis(Axis(1));
    let cols = plan.sum_axis(Axis(0));
    let mut k = DMatrix::<f64>::zeros(size, size);
    for i in 0..m {
        k[(i, i)] = rows[i];
        for j in 0..n {
            k[(i, m + j)] = plan[[i, j]];
            k[(m + j, i)] = plan[[i, j]];
        }
    }
    for j in 0..n {
        k[(m + j, m + j)] = cols[j];
    }
    // Scale the gauge term to the matrix so conditioning does not depend on M, N.
    let scale = 1.0 / (m.max(n) as f64);
    for a in 0..size {
        let za = if a < m { 1.0 } else { -1.0 };
        for b in 0..size {
            let zb = if b < m { 1.0 } else { -1.0 };
            k[(a, b)] += scale * za * zb;
        }
    }
    let wr = w.sum_axis(Axis(1));
    let wc = w.sum_axis(Axis(0));
    let rhs = DVector::from_iterator(size, wr.iter().chain(wc.iter()).map(|v| -v));
    let sol = match k.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => k.lu().solve(&rhs).expect("gauge-fixed system is nonsingular"),
    };
    Array2::from_shape_fn((m, n), |(i, j)| (w[[i, j]] + plan[[i, j]] * (sol[i] + sol[m + j])) / gamma)
}

fn opts(temperature: f64) -> ForwardOptions {
    ForwardOptions {
        temperature,
        relaxation: Relaxation::StraightThrough,
    }
}

fn case_matrix(record: &CasePairRecord) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((record.x.matrix()?, record.y.matrix()?))
}

/// Stage-1 loss of one pair and its gradient with respect to every extractor parameter.
/// `opts` selects the relaxation of the rationale one-hots; Gumbel noise is drawn from
/// `rng` when given.
pub fn pair_loss_and_grad(
    params: &ExtractorParams,
    record: &CasePairRecord,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    config: &TrainConfig,
    opts: &ForwardOptions,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Stage1Losses, ExtractorParams)> {
    let fwd = forward_pair(params, x, y, config.epsilon, opts, rng)?;
    let (l_r, dlx, dly) = loss_rationale_with_grad(
        &fwd.cls_x.logits,
        &fwd.cls_y.logits,
        record.x.rationale_labels.as_deref(),
        record.y.rationale_labels.as_deref(),
    )
    .map_err(|e| match e {
        Error::MissingLabels(side) => Error::MissingLabels(format!("pair {} side {side}", record.id)),
        other => other,
    })?;

    let mut grad = params.zeros_like();
    let l_a = if config.gamma1 != 0.0 {
        let problem = TransportProblem::uniform(fwd.bundle.c_total.clone(), config.gamma);
        let plan = solve_entropic_ot(&problem, config.solver_tol, config.solver_max_iter).map_err(|e| Error::PairSolve {
            pair_id: record.id.clone(),
            source: Box::new(e),
        })?;
        let la = loss_alignment(&plan, &record.alignments, &fwd.bundle, &fwd.labels_x, &fwd.labels_y, config.gamma2);
        let mut d_cost = grad_alignment_wrt_cost(
            &plan,
            &record.alignments,
            config.gamma,
            config.gamma2,
            &fwd.labels_x,
            &fwd.labels_y,
            config.cost_gradient,
        );
        d_cost *= config.gamma1;
        backward_pair(params, &fwd, &d_cost, Some(&dlx), Some(&dly), &mut grad);
        la.total()
    } else {
        let zero = Array2::zeros(fwd.bundle.c_total.raw_dim());
        backward_pair(params, &fwd, &zero, Some(&dlx), Some(&dly), &mut grad);
        0.0
    };
    Ok((Stage1Losses::new(l_r, l_a, config.gamma1), grad))
}

/// Deterministic initial parameters for a given config and embedding width.
pub fn init_extractor(config: &TrainConfig) -> ExtractorParams {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    ExtractorParams::init(&config.arch, &mut rng)
}

/// Trains the extractor from seeded initial parameters.
pub fn train_extractor(dataset: &[CasePairRecord], config: &TrainConfig) -> Result<(ExtractorParams, Vec<EpochLosses>)> {
    train_extractor_from(init_extractor(config), dataset, config)
}

/// Mini-batch Adam on `L_R + gamma1 * L_A`, starting from `params`.
pub fn train_extractor_from(
    mut params: ExtractorParams,
    dataset: &[CasePairRecord],
    config: &TrainConfig,
) -> Result<(ExtractorParams, Vec<EpochLosses>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training set".into()));
    }
    let matrices: Vec<(Array2<f64>, Array2<f64>)> = dataset.iter().map(case_matrix).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config.eta1, params.num_params());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs1);

    for epoch in 0..config.epochs1 {
        order.shuffle(&mut rng);
        let temperature = config.gumbel.temperature_at(epoch);
        let mut sum = Stage1Losses::default();
        for batch in order.chunks(config.batch1) {
            let mut grad = params.zeros_like();
            for &i in batch {
                let (x, y) = &matrices[i];
                let noise = if config.gumbel.noise { Some(&mut rng) } else { None };
                let (losses, g) = pair_loss_and_grad(&params, &dataset[i], x.view(), y.view(), config, &opts(temperature), noise)?;
                grad.add_scaled(&g, 1.0 / batch.len() as f64);
                sum.l_rationale += losses.l_rationale;
                sum.l_alignment += losses.l_alignment;
                sum.total += losses.total;
            }
            nn::clip_global_norm(&mut grad, config.clip_norm);
            adam.step(&mut params, &grad);
        }
        let count = dataset.len() as f64;
        trace.push(EpochLosses {
            epoch: epoch + 1,
            losses: Stage1Losses {
                l_rationale: sum.l_rationale / count,
                l_alignment: sum.l_alignment / count,
                total: sum.total / count,
            },
        });
    }
    Ok((params, trace))
}

/// Loss trace as CSV with columns `epoch,l_rationale,l_alignment,total`.
pub fn trace_to_csv(trace: &[EpochLosses]) -> String {
    let mut out = String::from("epoch,l_rationale,l_alignment,total\n");
    for row in trace {
        out.push_str(&format!(
            "{},{:.10},{:.10},{:.10}\n",
            row.epoch, row.losses.l_rationale, row.losses.l_alignment, row.losses.total
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn plan_from(matrix: Array2<f64>) -> TransportPlan {
        let (m, n) = matrix.dim();
        TransportPlan {
            plan: matrix,
            log_u: ndarray::Array1::zeros(m),
            log_v: ndarray::Array1::zeros(n),
            iterations: 0,
            marginal_violation: 0.0,
        }
    }

    fn bundle_zero(m: usize, n: usize) -> AffinityBundle {
        crate::affinity::assemble_affinity(Array2::zeros((m, n)), Array2::zeros((m, n)), Array2::ones((m, n)), 0.0).unwrap()
    }

    #[test]
    fn rationale_loss_examples() {
        use RationaleKind::*;
        let big = 50.0;
        let perfect = array![[big, 0.0, 0.0, 0.0], [0.0, big, 0.0, 0.0]];
        let l = loss_rationale(&perfect, &perfect, Some(&[Other, KeyCircumstance]), Some(&[Other, KeyCircumstance])).unwrap();
        assert!(l < 1e-20);

        let uniform = Array2::zeros((3, 4));
        let l = loss_rationale(&uniform, &uniform, Some(&[Other, DisputeFocus, Other]), Some(&[KeyCircumstance; 3])).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        // Probabilities (0.7, 0.1, 0.1, 0.1) on the correct class.
        let row = [0.7f64.ln(), 0.1f64.ln(), 0.1f64.ln(), 0.1f64.ln()];
        let lx = Array2::from_shape_fn((2, 4), |(_, k)| row[k]);
        let l = loss_rationale(&lx, &lx, Some(&[Other, Other]), Some(&[Other, Other])).unwrap();
        assert!((l - (-(0.7f64.ln()))).abs() < 1e-12);
        assert!((l - 0.3567).abs() < 1e-4);
    }

    #[test]
    fn rationale_loss_requires_gold() {
        let z = Array2::zeros((1, 4));
        assert!(matches!(
            loss_rationale(&z, &z, None, Some(&[RationaleKind::Other])),
            Err(Error::MissingLabels(_))
        ));
    }

    #[test]
    fn alignment_loss_on_permutation_plan_is_log_m() {
        let m = 3;
        let plan = plan_from(Array2::eye(m) / m as f64);
        let labels = AlignmentLabels::full(Array2::from_shape_fn((m, m), |(i, j)| i == j));
        let kinds = vec![RationaleKind::Other; m];
        let l = loss_alignment(&plan, &labels, &bundle_zero(m, m), &kinds, &kinds, 0.0);
        assert!((l.supervised - (m as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_on_two_by_two_oracle_plan() {
        let s2 = 0.5 / (1.0 + (-1.0f64).exp());
        let off = 0.5 - s2;
        let plan = plan_from(array![[s2, off], [off, s2]]);
        let mut values = Array2::from_elem((2, 2), false);
        values[[0, 0]] = true;
        let labels = AlignmentLabels::full(values);
        let kinds = vec![RationaleKind::Other; 2];
        let l = loss_alignment(&plan, &labels, &bundle_zero(2, 2), &kinds, &kinds, 0.0);
        // -ln(0.5 / (1 + e^-1)) = 1.006409; the rounded plan entry 0.3655 gives 1.00649.
        assert!((l.supervised - 1.006409).abs() < 1e-6);
        assert!((l.supervised - (-(0.3655f64).ln())).abs() < 1e-3);
    }

    #[test]
    fn alignment_loss_vanishes_without_labels() {
        let plan = plan_from(Array2::from_elem((2, 2), 0.25));
        let labels = AlignmentLabels::unobserved(2, 2);
        let kinds = vec![RationaleKind::KeyCircumstance; 2];
        let l = loss_alignment(&plan, &labels, &bundle_zero(2, 2), &kinds, &kinds, 0.0);
        assert_eq!(l.total(), 0.0);
    }

    #[test]
    fn fixed_potential_gradient_examples() {
        let plan = plan_from(Array2::from_elem((2, 2), 0.25));
        let mut values = Array2::from_elem((2, 2), false);
        values[[0, 0]] = true;
        let labels = AlignmentLabels::full(values);
        let kinds = vec![RationaleKind::Other; 2];
        let g = grad_alignment_wrt_cost(&plan, &labels, 1.0, 0.0, &kinds, &kinds, CostGradient::FixedPotentials);
        assert_eq!(g, array![[1.0, 0.0], [0.0, 0.0]]);
        let g = grad_alignment_wrt_cost(&plan, &labels, 0.5, 0.0, &kinds, &kinds, CostGradient::FixedPotentials);
        assert_eq!(g[[0, 0]], 2.0);
    }

    #[test]
    fn implicit_gradient_of_single_cell_is_zero() {
        let plan = plan_from(array![[1.0]]);
        let labels = AlignmentLabels::full(array![[true]]);
        let kinds = [RationaleKind::Other];
        let g = grad_alignment_wrt_cost(&plan, &labels, 1.0, 0.0, &kinds, &kinds, CostGradient::Implicit);
        assert!(g[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn unsupervised_gradient_marks_agreeing_pairs() {
        use RationaleKind::*;
        let plan = plan_from(Array2::from_elem((2, 2), 0.25));
        let labels = AlignmentLabels::unobserved(2, 2);
        let g = grad_alignment_wrt_cost(
            &plan,
            &labels,
            1.0,
            0.3,
            &[KeyCircumstance, Other],
            &[KeyCircumstance, Other],
            CostGradient::Implicit,
        );
        assert_eq!(g, array![[0.3, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let trace = vec![EpochLosses {
            epoch: 1,
            losses: Stage1Losses::new(1.0, 2.0, 0.5),
        }];
        let csv = trace_to_csv(&trace);
        assert!(csv.starts_with("epoch,l_rationale,l_alignment,total\n1,"));
        assert_eq!(trace[0].losses.total, 2.0);
    }
}

//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use casematch::nn::Parameters;
use casematch::sinkhorn::solve_entropic_ot;
use casematch::types::{AlignmentLabels, Case, CasePairRecord, MatchLabel, RationaleKind, SentenceEmbedding};
use casematch::TransportProblem;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Optimum of the unregularized transport LP and the objective gap to the next-best
/// distinct vertex.
pub struct LpSolution {
    pub plan: Array2<f64>,
    pub value: f64,
    pub gap: f64,
}

/// Exact optimum of the unregularized transport LP by enumerating basic feasible
/// solutions: supports of size `M + N - 1` whose equality system has a unique,
/// nonnegative solution.
pub fn lp_vertex_oracle(cost: &Array2<f64>, mu: &[f64], nu: &[f64]) -> Array2<f64> {
    lp_vertex_solution(cost, mu, nu).plan
}

pub fn lp_vertex_solution(cost: &Array2<f64>, mu: &[f64], nu: &[f64]) -> LpSolution {
    let (m, n) = cost.dim();
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let k = m + n - 1;
    let mut vertices: Vec<(f64, Array2<f64>)> = Vec::new();
    let mut support = vec![0usize; k];
    fn next(support: &mut [usize], total: usize) -> bool {
        let k = support.len();
        for i in (0..k).rev() {
            if support[i] < total - (k - i) {
                support[i] += 1;
                for j in i + 1..k {
                    support[j] = support[j - 1] + 1;
                }
                return true;
            }
        }
        false
    }
    for (i, s) in support.iter_mut().enumerate() {
        *s = i;
    }
    loop {
        // Row and column constraints, the last column constraint dropped as redundant.
        let mut a = DMatrix::<f64>::zeros(k, k);
        let mut b = DVector::<f64>::zeros(k);
        for (c, &cell) in support.iter().enumerate() {
            let (i, j) = cells[cell];
            a[(i, c)] = 1.0;
            if j < n - 1 {
                a[(m + j, c)] = 1.0;
            }
        }
        for i in 0..m {
            b[i] = mu[i];
        }
        for j in 0..n - 1 {
            b[m + j] = nu[j];
        }
        if let Some(x) = a.clone().lu().solve(&b) {
            let mut plan = Array2::zeros((m, n));
            for (c, &cell) in support.iter().enumerate() {
                plan[cells[cell]] = x[c];
            }
            let feasible = x.iter().all(|&v| v >= -1e-12)
                && (0..m).all(|i| (plan.row(i).sum() - mu[i]).abs() < 1e-9)
                && (0..n).all(|j| (plan.column(j).sum() - nu[j]).abs() < 1e-9);
            if feasible && a.determinant().abs() > 1e-12 {
                let value = (&plan * cost).sum();
                vertices.push((value, plan));
            }
        }
        if !next(&mut support, cells.len()) {
            break;
        }
    }
    vertices.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (value, plan) = vertices.first().cloned().expect("transportation polytope is nonempty");
    let gap = vertices
        .iter()
        .find(|(_, p)| total_variation(p, &plan) > 1e-9)
        .map_or(f64::INFINITY, |(v, _)| v - value);
    LpSolution { plan, value, gap }
}

pub fn total_variation(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    0.5 * (a - b).mapv(f64::abs).sum()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((m, n), || rng.gen_range(lo..hi))
}

/// `-(1/P) sum log a_mn` over `positives`, computed from a freshly solved plan.
pub fn resolved_supervised_loss(cost: &Array2<f64>, gamma: f64, positives: &[(usize, usize)]) -> f64 {
    let plan = solve_entropic_ot(&TransportProblem::uniform(cost.clone(), gamma), 1e-14, 1_000_000)
        .expect("converges")
        .plan;
    -positives.iter().map(|&p| plan[p].ln()).sum::<f64>() / positives.len() as f64
}

/// Central differences of `f` over every cost entry.
pub fn fd_cost_gradient(cost: &Array2<f64>, h: f64, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut out = Array2::zeros(cost.raw_dim());
    for ((i, j), g) in out.indexed_iter_mut() {
        let mut plus = cost.clone();
        plus[[i, j]] += h;
        let mut minus = cost.clone();
        minus[[i, j]] -= h;
        *g = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    out
}

/// Central differences of `f` over every parameter.
pub fn fd_param_gradient<P: Parameters>(params: &P, h: f64, f: impl Fn(&P) -> f64) -> Vec<f64> {
    let base = params.flatten();
    let mut p = params.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut buf = base.clone();
    for i in 0..base.len() {
        buf[i] = base[i] + h;
        p.set_flat(&buf);
        let fp = f(&p);
        buf[i] = base[i] - h;
        p.set_flat(&buf);
        let fm = f(&p);
        buf[i] = base[i];
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// `||a - b|| / ||b||` in the Euclidean norm, with a floor on the denominator.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

fn random_case(rng: &mut ChaCha8Rng, len: usize, d: usize, kinds: &[RationaleKind]) -> Case {
    let sentences = (0..len)
        .map(|_| SentenceEmbedding((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    Case::with_labels(sentences, kinds.to_vec())
}

/// Random labeled pair whose listed positives are same-kind rationales.
pub fn random_record(rng: &mut ChaCha8Rng, m: usize, n: usize, d: usize, positives: &[(usize, usize)]) -> CasePairRecord {
    let mut kx: Vec<RationaleKind> = (0..m).map(|_| RationaleKind::from_index(rng.gen_range(0..4)).unwrap()).collect();
    let mut ky: Vec<RationaleKind> = (0..n).map(|_| RationaleKind::from_index(rng.gen_range(0..4)).unwrap()).collect();
    let mut values = Array2::from_elem((m, n), false);
    for &(a, b) in positives {
        let k = RationaleKind::from_index(rng.gen_range(1..4)).unwrap();
        kx[a] = k;
        ky[b] = k;
        values[[a, b]] = true;
    }
    CasePairRecord {
        id: "random".into(),
        x: random_case(rng, m, d, &kx),
        y: random_case(rng, n, d, &ky),
        alignments: AlignmentLabels::full(values),
        match_label: MatchLabel::Partial,
        explanation_text: None,
    }
}

/// Macro F1 of a 3x3 confusion matrix `c[gold][pred]`, by direct arithmetic.
pub fn macro_f1_by_hand(c: [[usize; 3]; 3]) -> f64 {
    let mut sum = 0.0;
    let mut classes = 0.0;
    for k in 0..3 {
        let tp = c[k][k] as f64;
        let gold: f64 = c[k].iter().sum::<usize>() as f64;
        let pred: f64 = (0..3).map(|g| c[g][k]).sum::<usize>() as f64;
        if gold == 0.0 && pred == 0.0 {
            continue;
        }
        let p = if pred > 0.0 { tp / pred } else { 0.0 };
        let r = if gold > 0.0 { tp / gold } else { 0.0 };
        sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        classes += 1.0;
    }
    sum / classes
}

//! Semantic branch: two-layer projection of frozen embeddings and the pairwise distance matrix.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use super::params::ExtractorParams;
use crate::config::Metric;
use crate::error::{Error, Result};
use crate::nn;

/// Intermediates of [`project_forward`] needed for backpropagation.
#[derive(Clone, Debug)]
pub struct ProjectionCache {
    pub input: Array2<f64>,
    pub hidden: Array2<f64>,
    pub output: Array2<f64>,
}

pub(crate) fn check_dim(params: &ExtractorParams, x: &ArrayView2<f64>) -> Result<()> {
    if x.ncols() != params.arch.embed_dim {
        return Err(Error::DimensionMismatch {
            context: "sentence embedding".into(),
            expected: params.arch.embed_dim,
            actual: x.ncols(),
        });
    }
    Ok(())
}

pub fn project_forward(params: &ExtractorParams, x: ArrayView2<f64>) -> Result<ProjectionCache> {
    check_dim(params, &x)?;
    let act = params.arch.activation;
    let mut hidden = x.dot(&params.proj_w1.t()) + &params.proj_b1;
    hidden.mapv_inplace(|v| act.apply(v));
    let output = hidden.dot(&params.proj_w2.t()) + &params.proj_b2;
    Ok(ProjectionCache {
        input: x.to_owned(),
        hidden,
        output,
    })
}

/// Contextual sentence embeddings `W2 f(W1 x + b1) + b2`, one row per sentence.
pub fn project(params: &ExtractorParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(project_forward(params, x)?.output)
}

/// Accumulates parameter gradients given `d_output`.
pub fn project_backward(params: &ExtractorParams, cache: &ProjectionCache, d_output: &Array2<f64>, grad: &mut ExtractorParams) {
    let act = params.arch.activation;
    grad.proj_w2 += &d_output.t().dot(&cache.hidden);
    grad.proj_b2 += &d_output.sum_axis(Axis(0));
    let mut d_hidden = d_output.dot(&params.proj_w2);
    Zip::from(&mut d_hidden)
        .and(&cache.hidden)
        .for_each(|g, &y| *g *= act.derivative_from_output(y));
    grad.proj_w1 += &d_hidden.t().dot(&cache.input);
    grad.proj_b1 += &d_hidden.sum_axis(Axis(0));
}

fn distance(metric: Metric, a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    match metric {
        Metric::Euclidean | Metric::SquaredEuclidean => {
            let sq: f64 = a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            if metric == Metric::Euclidean {
                sq.sqrt()
            } else {
                sq
            }
        }
        Metric::Cosine => (1.0 - nn::cosine(a, b)).max(0.0),
    }
}

/// Pairwise distance matrix between two sets of contextual embeddings.
pub fn semantic_cost(sx: ArrayView2<f64>, sy: ArrayView2<f64>, metric: Metric) -> Array2<f64> {
    assert_eq!(sx.ncols(), sy.ncols(), "embedding widths differ");
    let mut c = Array2::zeros((sx.nrows(), sy.nrows()));
    for (m, a) in sx.outer_iter().enumerate() {
        for (n, b) in sy.outer_iter().enumerate() {
            c[[m, n]] = distance(metric, a, b);
        }
    }
    c
}

/// Gradients of `sum_mn g_mn c_mn` with respect to both embedding sets.
pub fn semantic_cost_backward(
    sx: ArrayView2<f64>,
    sy: ArrayView2<f64>,
    cost: &Array2<f64>,
    d_cost: &Array2<f64>,
    metric: Metric,
) -> (Array2<f64>, Array2<f64>) {
    let mut dx = Array2::zeros(sx.raw_dim());
    let mut dy = Array2::zeros(sy.raw_dim());
    for (m, a) in sx.outer_iter().enumerate() {
        for (n, b) in sy.outer_iter().enumerate() {
            let g = d_cost[[m, n]];
            if g == 0.0 {
                continue;
            }
            let dir: Array1<f64> = match metric {
                Metric::Euclidean => {
                    let dist = cost[[m, n]];
                    if dist == 0.0 {
                        continue;
                    }
                    (&a - &b) / dist
                }
                Metric::SquaredEuclidean => (&a - &b) * 2.0,
                Metric::Cosine => {
                    // d(1 - cos)/da = -dcos/da, and symmetrically for b.
                    let ga = nn::cosine_grad_a(a, b) * -g;
                    let gb = nn::cosine_grad_a(b, a) * -g;
                    dx.row_mut(m).scaled_add(1.0, &ga);
                    dy.row_mut(n).scaled_add(1.0, &gb);
                    continue;
                }
            };
            dx.row_mut(m).scaled_add(g, &dir);
            dy.row_mut(n).scaled_add(-g, &dir);
        }
    }
    (dx, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Activation, ArchConfig};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch(d: usize, h: usize, act: Activation) -> ArchConfig {
        ArchConfig {
            embed_dim: d,
            hidden: h,
            activation: act,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn zero_weights_project_to_zero() {
        let p = ExtractorParams::zeros(&arch(3, 4, Activation::Tanh));
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]];
        assert!(project(&p, x.view()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layers_reproduce_input() {
        let mut p = ExtractorParams::zeros(&arch(3, 3, Activation::Identity));
        p.proj_w1 = Array2::eye(3);
        p.proj_w2 = Array2::eye(3);
        let x = array![[1.0, -2.0, 3.0], [0.25, 0.5, -0.75]];
        assert_eq!(project(&p, x.view()).unwrap(), x);
    }

    #[test]
    fn forward_matches_reassociated_oracle() {
        let a = arch(6, 5, Activation::Tanh);
        let p = ExtractorParams::init(&a, &mut ChaCha8Rng::seed_from_u64(9));
        let x = crate::nn::gaussian(&mut ChaCha8Rng::seed_from_u64(10), &[4, 6], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let out = project(&p, x.view()).unwrap();
        // Column-vector form: W2 (f(W1 x^T + b1)) + b2, computed per sentence with explicit loops.
        for (i, row) in x.outer_iter().enumerate() {
            let mut hidden = [0.0; 5];
            for (j, hv) in hidden.iter_mut().enumerate() {
                let mut acc = p.proj_b1[j];
                for k in 0..6 {
                    acc += p.proj_w1[[j, k]] * row[k];
                }
                *hv = acc.tanh();
            }
            for j in 0..5 {
                let mut acc = p.proj_b2[j];
                for (k, hv) in hidden.iter().enumerate() {
                    acc += p.proj_w2[[j, k]] * hv;
                }
                assert!((acc - out[[i, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let p = ExtractorParams::zeros(&arch(3, 4, Activation::Tanh));
        let x = Array2::zeros((2, 4));
        assert!(matches!(project(&p, x.view()), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn semantic_cost_examples() {
        let z = array![[0.0, 0.0]];
        let t = array![[3.0, 4.0]];
        assert_eq!(semantic_cost(z.view(), t.view(), Metric::Euclidean), array![[5.0]]);
        assert_eq!(semantic_cost(z.view(), t.view(), Metric::SquaredEuclidean), array![[25.0]]);
        let e1 = array![[1.0, 0.0]];
        let e2 = array![[0.0, 1.0]];
        assert!((semantic_cost(e1.view(), e2.view(), Metric::Cosine)[[0, 0]] - 1.0).abs() < 1e-15);
        let s = array![[1.0, 2.0], [-1.0, 0.5], [3.0, 3.0]];
        for metric in [Metric::Euclidean, Metric::SquaredEuclidean, Metric::Cosine] {
            let c = semantic_cost(s.view(), s.view(), metric);
            for i in 0..3 {
                assert!(c[[i, i]].abs() < 1e-15);
            }
        }
    }

    #[test]
    fn semantic_cost_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sx = crate::nn::gaussian(&mut rng, &[3, 4], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let sy = crate::nn::gaussian(&mut rng, &[2, 4], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let g = crate::nn::gaussian(&mut rng, &[3, 2], 1.0)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        for metric in [Metric::Euclidean, Metric::SquaredEuclidean, Metric::Cosine] {
            let loss = |a: &Array2<f64>, b: &Array2<f64>| (&semantic_cost(a.view(), b.view(), metric) * &g).sum();
            let c = semantic_cost(sx.view(), sy.view(), metric);
            let (dx, dy) = semantic_cost_backward(sx.view(), sy.view(), &c, &g, metric);
            let h = 1e-6;
            for ((i, j), &an) in dx.indexed_iter() {
                let mut p = sx.clone();
                let mut q = sx.clone();
                p[[i, j]] += h;
                q[[i, j]] -= h;
                let fd = (loss(&p, &sy) - loss(&q, &sy)) / (2.0 * h);
                assert!((fd - an).abs() < 1e-7, "{metric:?} dx");
            }
            for ((i, j), &an) in dy.indexed_iter() {
                let mut p = sy.clone();
                let mut q = sy.clone();
                p[[i, j]] += h;
                q[[i, j]] -= h;
                let fd = (loss(&sx, &p) - loss(&sx, &q)) / (2.0 * h);
                assert!((fd - an).abs() < 1e-7, "{metric:?} dy");
            }
        }
    }
}

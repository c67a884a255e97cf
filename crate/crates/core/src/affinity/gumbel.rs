//! Straight-through Gumbel one-hot sampling and the rationale agreement matrix.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::nn;
use crate::types::RationaleKind;

/// Gumbel noise source for [`gumbel_one_hot`].
pub enum Noise<'a, R: Rng> {
    Off,
    Sampled(&'a mut R),
}

/// A hard sample plus the soft relaxation its backward pass uses.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSample {
    pub index: usize,
    pub one_hot: Array1<f64>,
    /// `softmax((logits + noise) / temperature)`.
    pub soft: Array1<f64>,
    pub temperature: f64,
}

impl GumbelSample {
    /// Backward of the straight-through estimator: the Jacobian of `soft` applied to `d_out`.
    pub fn backward(&self, d_out: ArrayView1<f64>) -> Array1<f64> {
        let p = &self.soft;
        let inner = p.dot(&d_out);
        Array1::from_shape_fn(p.len(), |i| p[i] * (d_out[i] - inner) / self.temperature)
    }
}

/// Standard Gumbel draw `-ln(-ln U)`, `U` uniform in (0, 1).
pub fn sample_gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// One-hot of `argmax(logits + g)`; ties go to the lowest index.
pub fn gumbel_one_hot<R: Rng>(logits: ArrayView1<f64>, temperature: f64, noise: Noise<'_, R>) -> GumbelSample {
    assert!(temperature > 0.0, "temperature must be positive");
    let perturbed = match noise {
        Noise::Off => logits.to_owned(),
        Noise::Sampled(rng) => logits.mapv(|l| l + sample_gumbel(rng)),
    };
    let index = nn::argmax(perturbed.view());
    let mut one_hot = Array1::zeros(logits.len());
    one_hot[index] = 1.0;
    let soft = nn::softmax((&perturbed / temperature).view());
    GumbelSample {
        index,
        one_hot,
        soft,
        temperature,
    }
}

/// One-hot rows for hard labels.
pub fn one_hot_rows(labels: &[RationaleKind]) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), RationaleKind::COUNT));
    for (i, l) in labels.iter().enumerate() {
        out[[i, l.index()]] = 1.0;
    }
    out
}

/// `c_mn = mask_mn * sum_{k>=1} rx_mk ry_nk`.
///
/// The non-rationale column is dropped before the product, so two non-rationale
/// sentences never count as agreeing.
pub fn rationale_cost(rx: &Array2<f64>, ry: &Array2<f64>, mask: &Array2<f64>) -> Array2<f64> {
    let kinds = ndarray::s![.., 1..];
    let prod = rx.slice(kinds).dot(&ry.slice(kinds).t());
    prod * mask
}

/// Gradients of `sum g_mn c_mn` with respect to both one-hot matrices.
pub fn rationale_cost_backward(rx: &Array2<f64>, ry: &Array2<f64>, mask: &Array2<f64>, d_cost: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let gm = d_cost * mask;
    let mut drx = Array2::zeros(rx.raw_dim());
    let mut dry = Array2::zeros(ry.raw_dim());
    let kinds = ndarray::s![.., 1..];
    drx.slice_mut(kinds).assign(&gm.dot(&ry.slice(kinds)));
    dry.slice_mut(kinds).assign(&gm.t().dot(&rx.slice(kinds)));
    (drx, dry)
}

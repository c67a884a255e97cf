//! Small numerical building blocks shared by the two trainable models:
//! stable softmax helpers, a named-tensor parameter trait, Adam and initialization.

use ndarray::{Array1, Array2, ArrayView1, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: ArrayView1<f64>) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: ArrayView1<f64>) -> Array1<f64> {
    let e = max_shifted(xs).mapv(f64::exp);
    let total = e.sum();
    e / total
}

pub fn log_softmax(xs: ArrayView1<f64>) -> Array1<f64> {
    // Shifting by the maximum first keeps large logits from losing precision.
    let shifted = max_shifted(xs);
    let lse = logsumexp(shifted.view());
    shifted.mapv(|x| x - lse)
}

fn max_shifted(xs: ArrayView1<f64>) -> Array1<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    xs.mapv(|x| x - max)
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(xs: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Gradient of `cos(a, b)` with respect to `a`. Zero when either vector vanishes.
pub fn cosine_grad_a(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Array1::zeros(a.len());
    }
    let c = a.dot(&b) / (na * nb);
    (&b / (na * nb)) - &(&a * (c / (na * na)))
}

/// A tensor serialized by name, shape and flat row-major data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A fixed, ordered collection of dense tensors.
///
/// Implementations must list tensors in the same order in both accessors so that
/// optimizers, gradient checks and checkpoints can walk them in lockstep.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    /// Same shapes, all entries zero.
    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, d)| d.to_vec()).collect()
    }

    fn set_flat(&mut self, values: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&values[off..off + t.len()]);
            off += t.len();
        }
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    fn to_named(&self) -> Vec<NamedTensor> {
        self.tensors()
            .into_iter()
            .map(|(name, shape, data)| NamedTensor {
                name,
                shape,
                data: data.to_vec(),
            })
            .collect()
    }

    /// Overwrites every tensor from `named`, rejecting missing names or shape mismatches.
    fn load_named(&mut self, named: &[NamedTensor]) -> Result<(), String> {
        let expected: Vec<(String, Vec<usize>)> = self.tensors().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != named.len() {
            return Err(format!("expected {} tensors, found {}", expected.len(), named.len()));
        }
        for ((name, shape), t) in expected.iter().zip(named) {
            if *name != t.name {
                return Err(format!("expected tensor `{name}`, found `{}`", t.name));
            }
            if *shape != t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(format!("tensor `{name}`: expected shape {shape:?}, found {:?}", t.shape));
            }
        }
        for (dst, t) in self.tensors_mut().into_iter().zip(named) {
            dst.copy_from_slice(&t.data);
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`.
    fn add_scaled(&mut self, other: &Self, scale: f64) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, _, d)| d.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a += scale * b;
            }
        }
    }
}

pub fn shape_of<D: Dimension>(a: &ndarray::Array<f64, D>) -> Vec<usize> {
    a.shape().to_vec()
}

pub fn slice_of<D: Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are stored in standard layout")
}

pub fn slice_of_mut<D: Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are stored in standard layout")
}

/// Scales `grad` in place so that its global L2 norm is at most `max_norm`. Returns the original norm.
pub fn clip_global_norm<P: Parameters>(grad: &mut P, max_norm: f64) -> f64 {
    let norm = grad
        .tensors()
        .iter()
        .flat_map(|(_, _, d)| d.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for t in grad.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grad: &P) {
        self.step += 1;
        // A zero learning rate must leave parameters bit-identical.
        if self.lr == 0.0 {
            return;
        }
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let g: Vec<f64> = grad.flatten();
        let mut off = 0;
        for p in params.tensors_mut() {
            for (i, w) in p.iter_mut().enumerate() {
                let k = off + i;
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g[k];
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = self.m[k] / bc1;
                let vh = self.v[k] / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            off += p.len();
        }
    }
}

/// Gaussian init with standard deviation `sqrt(2 / (fan_in + fan_out))`.
pub fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

pub fn gaussian<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ndarray::ArrayD<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    ndarray::ArrayD::from_shape_simple_fn(shape, || normal.sample(rng))
}

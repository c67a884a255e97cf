//! Sentence rationale classifier: input adapter, residual gated dilated
//! convolutions over the sentence sequence, and a linear head over four kinds.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{ExtractorParams, GatedConvLayer};
use super::projection::check_dim;
use crate::error::Result;
use crate::nn;
use crate::types::RationaleKind;

#[derive(Clone, Debug)]
struct LayerCache {
    input: Array2<f64>,
    conv1: Array2<f64>,
    gate: Array2<f64>,
}

/// Intermediates of [`classify_forward`] needed for backpropagation.
#[derive(Clone, Debug)]
pub struct ClassifierCache {
    input: Array2<f64>,
    adapted: Array2<f64>,
    layers: Vec<LayerCache>,
    last: Array2<f64>,
    valid: usize,
    pub logits: Array2<f64>,
}

/// Per-sentence logits and argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub logits: Array2<f64>,
    pub labels: Vec<RationaleKind>,
}

/// Offset of tap `k` for a kernel of size `kernel` and dilation `dilation`.
fn tap_offset(k: usize, kernel: usize, dilation: usize) -> isize {
    (k as isize - (kernel as isize - 1) / 2) * dilation as isize
}

/// Output row range `t` whose source `t + off` lies inside `[0, valid)`.
fn tap_range(off: isize, valid: usize) -> Option<(usize, usize)> {
    let lo = (-off).max(0) as usize;
    let hi = (valid as isize - off).min(valid as isize);
    (hi > lo as isize).then_some((lo, hi as usize))
}

/// Dilated 1-D convolution along the sequence axis with zero padding outside `[0, valid)`.
/// Rows at or beyond `valid` are left at zero.
fn conv(input: &Array2<f64>, w: &ndarray::Array3<f64>, b: &Array1<f64>, dilation: usize, valid: usize) -> Array2<f64> {
    let (len, h) = input.dim();
    let kernel = w.shape()[0];
    let mut out = Array2::zeros((len, h));
    out.slice_mut(s![..valid, ..])
        .assign(&b.broadcast((valid, h)).expect("bias broadcast"));
    for k in 0..kernel {
        let off = tap_offset(k, kernel, dilation);
        if let Some((lo, hi)) = tap_range(off, valid) {
            let src = input.slice(s![(lo as isize + off) as usize..(hi as isize + off) as usize, ..]);
            let wk = w.index_axis(Axis(0), k);
            let mut dst = out.slice_mut(s![lo..hi, ..]);
            ndarray::linalg::general_mat_mul(1.0, &src, &wk.t(), 1.0, &mut dst);
        }
    }
    out
}

/// Backward of [`conv`]: accumulates weight and bias gradients, returns the input gradient.
fn conv_backward(
    input: &Array2<f64>,
    d_out: &Array2<f64>,
    w: &ndarray::Array3<f64>,
    dilation: usize,
    valid: usize,
    dw: &mut ndarray::Array3<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let kernel = w.shape()[0];
    let mut d_in = Array2::zeros(input.raw_dim());
    *db += &d_out.slice(s![..valid, ..]).sum_axis(Axis(0));
    for k in 0..kernel {
        let off = tap_offset(k, kernel, dilation);
        if let Some((lo, hi)) = tap_range(off, valid) {
            let src_lo = (lo as isize + off) as usize;
            let src_hi = (hi as isize + off) as usize;
            let src = input.slice(s![src_lo..src_hi, ..]);
            let g = d_out.slice(s![lo..hi, ..]);
            let mut dwk = dw.index_axis_mut(Axis(0), k);
            ndarray::linalg::general_mat_mul(1.0, &g.t(), &src, 1.0, &mut dwk);
            let wk = w.index_axis(Axis(0), k);
            let mut dst = d_in.slice_mut(s![src_lo..src_hi, ..]);
            ndarray::linalg::general_mat_mul(1.0, &g, &wk, 1.0, &mut dst);
        }
    }
    d_in
}

fn mask_rows(a: &mut Array2<f64>, valid: usize) {
    if valid < a.nrows() {
        a.slice_mut(s![valid.., ..]).fill(0.0);
    }
}

fn layer_forward(layer: &GatedConvLayer, input: &Array2<f64>, valid: usize) -> (Array2<f64>, LayerCache) {
    let c1 = conv(input, &layer.conv1_w, &layer.conv1_b, layer.dilation, valid);
    let mut gate = conv(input, &layer.conv2_w, &layer.conv2_b, layer.dilation, valid);
    gate.mapv_inplace(nn::sigmoid);
    let mut out = input.clone();
    Zip::from(&mut out).and(&c1).and(&gate).for_each(|o, &a, &g| *o += a * g);
    mask_rows(&mut out, valid);
    (
        out,
        LayerCache {
            input: input.clone(),
            conv1: c1,
            gate,
        },
    )
}

/// Forward pass over the first `valid` sentences; later rows are treated as masked padding.
pub fn classify_forward_masked(params: &ExtractorParams, x: ArrayView2<f64>, valid: usize) -> Result<ClassifierCache> {
    check_dim(params, &x)?;
    let valid = valid.min(x.nrows());
    let act = params.arch.activation;
    let mut adapted = x.dot(&params.adapter_w.t()) + &params.adapter_b;
    adapted.mapv_inplace(|v| act.apply(v));
    mask_rows(&mut adapted, valid);
    let mut state = adapted.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = layer_forward(layer, &state, valid);
        layers.push(cache);
        state = next;
    }
    let logits = state.dot(&params.head_w.t()) + &params.head_b;
    Ok(ClassifierCache {
        input: x.to_owned(),
        adapted,
        layers,
        last: state,
        valid,
        logits,
    })
}

pub fn classify_forward(params: &ExtractorParams, x: ArrayView2<f64>) -> Result<ClassifierCache> {
    classify_forward_masked(params, x, x.nrows())
}

pub fn labels_from_logits(logits: &Array2<f64>) -> Vec<RationaleKind> {
    logits
        .outer_iter()
        .map(|row| RationaleKind::from_index(nn::argmax(row)).expect("four classes"))
        .collect()
}

/// Logits `W s^(L) + b` per sentence and their argmax kinds.
pub fn classify_rationales(params: &ExtractorParams, x: ArrayView2<f64>) -> Result<Classification> {
    let cache = classify_forward(params, x)?;
    let labels = labels_from_logits(&cache.logits);
    Ok(Classification {
        logits: cache.logits,
        labels,
    })
}

/// Accumulates all classifier-path gradients given `d_logits`.
pub fn classify_backward(params: &ExtractorParams, cache: &ClassifierCache, d_logits: &Array2<f64>, grad: &mut ExtractorParams) {
    let valid = cache.valid;
    let mut d_logits = d_logits.clone();
    mask_rows(&mut d_logits, valid);
    grad.head_w += &d_logits.t().dot(&cache.last);
    grad.head_b += &d_logits.sum_axis(Axis(0));
    let mut d_state = d_logits.dot(&params.head_w);

    for (li, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[li];
        mask_rows(&mut d_state, valid);
        let mut d_c1 = d_state.clone();
        let mut d_c2 = d_state.clone();
        Zip::from(&mut d_c1).and(&lc.gate).for_each(|g, &gt| *g *= gt);
        Zip::from(&mut d_c2)
            .and(&lc.conv1)
            .and(&lc.gate)
            .for_each(|g, &a, &gt| *g *= a * gt * (1.0 - gt));
        let gl = &mut grad.layers[li];
        let d_in1 = conv_backward(
            &lc.input,
            &d_c1,
            &layer.conv1_w,
            layer.dilation,
            valid,
            &mut gl.conv1_w,
            &mut gl.conv1_b,
        );
        let d_in2 = conv_backward(
            &lc.input,
            &d_c2,
            &layer.conv2_w,
            layer.dilation,
            valid,
            &mut gl.conv2_w,
            &mut gl.conv2_b,
        );
        d_state = d_state + d_in1 + d_in2;
    }

    mask_rows(&mut d_state, valid);
    let act = params.arch.activation;
    Zip::from(&mut d_state)
        .and(&cache.adapted)
        .for_each(|g, &y| *g *= act.derivative_from_output(y));
    grad.adapter_w += &d_state.t().dot(&cache.input);
    grad.adapter_b += &d_state.sum_axis(Axis(0));
}

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ArchConfig;
use crate::nn::{self, Parameters};
use crate::types::RationaleKind;

/// One residual gated layer: `s + conv1(s) * sigmoid(conv2(s))`.
///
/// Kernels are stored `[tap, out, in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatedConvLayer {
    pub dilation: usize,
    pub conv1_w: Array3<f64>,
    pub conv1_b: Array1<f64>,
    pub conv2_w: Array3<f64>,
    pub conv2_b: Array1<f64>,
}

/// Trainable parameters of the rationale extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorParams {
    pub arch: ArchConfig,
    /// Semantic projection, first layer `h × d`.
    pub proj_w1: Array2<f64>,
    pub proj_b1: Array1<f64>,
    /// Semantic projection, second layer `h × h`.
    pub proj_w2: Array2<f64>,
    pub proj_b2: Array1<f64>,
    /// Input adapter feeding the convolution stack, `h × d`.
    pub adapter_w: Array2<f64>,
    pub adapter_b: Array1<f64>,
    pub layers: Vec<GatedConvLayer>,
    /// Classifier head, `4 × h`.
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl ExtractorParams {
    pub fn zeros(arch: &ArchConfig) -> Self {
        let (d, h, k) = (arch.embed_dim, arch.hidden, arch.kernel);
        Self {
            arch: arch.clone(),
            proj_w1: Array2::zeros((h, d)),
            proj_b1: Array1::zeros(h),
            proj_w2: Array2::zeros((h, h)),
            proj_b2: Array1::zeros(h),
            adapter_w: Array2::zeros((h, d)),
            adapter_b: Array1::zeros(h),
            layers: arch
                .dilations
                .iter()
                .map(|&dilation| GatedConvLayer {
                    dilation,
                    conv1_w: Array3::zeros((k, h, h)),
                    conv1_b: Array1::zeros(h),
                    conv2_w: Array3::zeros((k, h, h)),
                    conv2_b: Array1::zeros(h),
                })
                .collect(),
            head_w: Array2::zeros((RationaleKind::COUNT, h)),
            head_b: Array1::zeros(RationaleKind::COUNT),
        }
    }

    /// Glorot-scaled Gaussian weights, zero biases.
    pub fn init<R: Rng>(arch: &ArchConfig, rng: &mut R) -> Self {
        let (d, h, k) = (arch.embed_dim, arch.hidden, arch.kernel);
        let mut p = Self::zeros(arch);
        p.proj_w1 = nn::glorot(rng, h, d);
        p.proj_w2 = nn::glorot(rng, h, h);
        p.adapter_w = nn::glorot(rng, h, d);
        let conv_std = (2.0 / (2 * h * k) as f64).sqrt();
        for layer in &mut p.layers {
            layer.conv1_w = nn::gaussian(rng, &[k, h, h], conv_std).into_dimensionality().expect("rank 3");
            layer.conv2_w = nn::gaussian(rng, &[k, h, h], conv_std).into_dimensionality().expect("rank 3");
        }
        p.head_w = nn::glorot(rng, RationaleKind::COUNT, h);
        p
    }
}

impl Parameters for ExtractorParams {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        use nn::{shape_of, slice_of};
        let mut out = vec![
            ("proj.w1".to_string(), shape_of(&self.proj_w1), slice_of(&self.proj_w1)),
            ("proj.b1".to_string(), shape_of(&self.proj_b1), slice_of(&self.proj_b1)),
            ("proj.w2".to_string(), shape_of(&self.proj_w2), slice_of(&self.proj_w2)),
            ("proj.b2".to_string(), shape_of(&self.proj_b2), slice_of(&self.proj_b2)),
            ("adapter.w".to_string(), shape_of(&self.adapter_w), slice_of(&self.adapter_w)),
            ("adapter.b".to_string(), shape_of(&self.adapter_b), slice_of(&self.adapter_b)),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("conv.{i}.conv1.w"), shape_of(&l.conv1_w), slice_of(&l.conv1_w)));
            out.push((format!("conv.{i}.conv1.b"), shape_of(&l.conv1_b), slice_of(&l.conv1_b)));
            out.push((format!("conv.{i}.conv2.w"), shape_of(&l.conv2_w), slice_of(&l.conv2_w)));
            out.push((format!("conv.{i}.conv2.b"), shape_of(&l.conv2_b), slice_of(&l.conv2_b)));
        }
        out.push(("head.w".to_string(), shape_of(&self.head_w), slice_of(&self.head_w)));
        out.push(("head.b".to_string(), shape_of(&self.head_b), slice_of(&self.head_b)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        use nn::slice_of_mut;
        let mut out = vec![
            slice_of_mut(&mut self.proj_w1),
            slice_of_mut(&mut self.proj_b1),
            slice_of_mut(&mut self.proj_w2),
            slice_of_mut(&mut self.proj_b2),
            slice_of_mut(&mut self.adapter_w),
            slice_of_mut(&mut self.adapter_b),
        ];
        for l in self.layers.iter_mut() {
            out.push(slice_of_mut(&mut l.conv1_w));
            out.push(slice_of_mut(&mut l.conv1_b));
            out.push(slice_of_mut(&mut l.conv2_w));
            out.push(slice_of_mut(&mut l.conv2_b));
        }
        out.push(slice_of_mut(&mut self.head_w));
        out.push(slice_of_mut(&mut self.head_b));
        out
    }
}

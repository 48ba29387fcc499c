//! Layer vocabulary for factored multimodal networks.
//!
//! Feature maps carry both a modality axis (M-features) and a per-modality
//! feature axis (F-features): `(batch, n, p, depth, height, width)`. A
//! cross-F convolution mixes F-features inside each modality branch with
//! unshared weights; a cross-M convolution mixes modality branches
//! separately for every F-feature. A merge collapses the modality axis.
//!
//! The free functions here evaluate eagerly. Networks record the same
//! operations on a [`Graph`](crate::numerics::Graph) to get gradients.

mod kernel;
pub mod ops;

pub use ops::MergeMode;

use crate::error::{Error, Result};
use crate::numerics::{Operation, Tensor};

/// Rank-6 tensor `(B, n, p, D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.rank() != 6 {
            return Err(Error::invalid(format!(
                "feature map must be rank 6 (B, n, p, D, H, W), got {:?}",
                tensor.shape()
            )));
        }
        Ok(FeatureMap(tensor))
    }

    /// Wraps a `(B, n, D, H, W)` multimodal image with one F-feature per modality.
    pub fn from_image(image: Tensor) -> Result<Self> {
        let s = image.shape().to_vec();
        if s.len() != 5 {
            return Err(Error::invalid(format!("image must be rank 5, got {s:?}")));
        }
        Self::new(image.reshape([s[0], s[1], 1, s[2], s[3], s[4]])?)
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn modalities(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.0.shape();
        [s[3], s[4], s[5]]
    }

    pub fn is_merged(&self) -> bool {
        self.modalities() == 1
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Drops the modality axis of a merged map: `(B, 1, p, ...)` to `(B, p, ...)`.
    pub fn into_channels(self) -> Result<Tensor> {
        if !self.is_merged() {
            return Err(Error::invalid("feature map still has several modality branches"));
        }
        let s = self.0.shape().to_vec();
        self.0.reshape([s[0], s[2], s[3], s[4], s[5]])
    }
}

/// Weights `(C_out, C_in, k, k, k)`, bias `(C_out)` and dilation of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    weights: Tensor,
    bias: Tensor,
    dilation: usize,
}

impl ConvKernel {
    pub fn new(weights: Tensor, bias: Tensor, dilation: usize) -> Result<Self> {
        let w = weights.shape();
        if w.len() != 5 || w[2] != w[3] || w[3] != w[4] {
            return Err(Error::invalid(format!(
                "kernel weights must be (C_out, C_in, k, k, k), got {w:?}"
            )));
        }
        if w[2].is_multiple_of(2) {
            return Err(Error::invalid(format!("kernel size must be odd, got {}", w[2])));
        }
        if bias.shape() != [w[0]] {
            return Err(Error::invalid(format!("bias shape {:?} != [{}]", bias.shape(), w[0])));
        }
        if dilation == 0 {
            return Err(Error::invalid("dilation must be positive"));
        }
        Ok(ConvKernel {
            weights,
            bias,
            dilation,
        })
    }

    /// Kernel that copies input channel `c` to output channel `c`.
    pub fn identity(channels: usize, k: usize) -> Result<Self> {
        let mut w = Tensor::zeros([channels, channels, k, k, k]);
        let c = k / 2;
        for ch in 0..channels {
            w.set(&[ch, ch, c, c, c], 1.0);
        }
        Self::new(w, Tensor::zeros([channels]), 1)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }
}

fn run(op: &dyn Operation, inputs: &[&Tensor]) -> Result<Tensor> {
    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    op.infer_shape(&shapes).map_err(Error::Invalid)?;
    Ok(op.forward(inputs))
}

/// Stacks a bank of kernels into `(banks, C_out, C_in, k, k, k)` weights and `(banks, C_out)` biases.
fn stack(kernels: &[ConvKernel]) -> Result<(Tensor, Tensor, usize)> {
    let first = kernels.first().ok_or_else(|| Error::invalid("empty kernel bank"))?;
    if let Some(bad) = kernels
        .iter()
        .find(|k| k.weights.shape() != first.weights.shape() || k.dilation != first.dilation)
    {
        return Err(Error::invalid(format!(
            "kernel banks disagree: {:?} d{} vs {:?} d{}",
            first.weights.shape(),
            first.dilation,
            bad.weights.shape(),
            bad.dilation
        )));
    }
    let mut shape = vec![kernels.len()];
    shape.extend_from_slice(first.weights.shape());
    let w: Vec<f64> = kernels.iter().flat_map(|k| k.weights.data().iter().copied()).collect();
    let b: Vec<f64> = kernels.iter().flat_map(|k| k.bias.data().iter().copied()).collect();
    Ok((
        Tensor::new(shape, w)?,
        Tensor::new([kernels.len(), first.out_channels()], b)?,
        first.dilation,
    ))
}

/// Same-padded stride-1 dilated convolution of `(B, C_in, D, H, W)`.
pub fn conv3d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    run(
        &ops::Conv3d {
            dilation: kernel.dilation,
        },
        &[input, &kernel.weights, &kernel.bias],
    )
}

/// Cross-F-feature transformation: kernel bank `m` convolves modality branch `m`.
pub fn cross_f_conv(input: &FeatureMap, kernels: &[ConvKernel]) -> Result<FeatureMap> {
    if kernels.len() != input.modalities() {
        return Err(Error::invalid(format!(
            "cross_f needs one kernel bank per modality branch: {} banks for {} branches",
            kernels.len(),
            input.modalities()
        )));
    }
    let (w, b, dilation) = stack(kernels)?;
    FeatureMap::new(run(&ops::CrossF { dilation }, &[input.tensor(), &w, &b])?)
}

/// Cross-M-feature transformation: kernel bank `f` mixes the branches of F-feature `f`.
pub fn cross_m_conv(input: &FeatureMap, kernels: &[ConvKernel]) -> Result<FeatureMap> {
    if kernels.len() != input.features() {
        return Err(Error::invalid(format!(
            "cross_m needs one kernel bank per F-feature: {} banks for {} features",
            kernels.len(),
            input.features()
        )));
    }
    let (w, b, dilation) = stack(kernels)?;
    FeatureMap::new(run(&ops::CrossM { dilation }, &[input.tensor(), &w, &b])?)
}

pub fn merge(input: &FeatureMap, mode: MergeMode) -> Result<FeatureMap> {
    FeatureMap::new(run(&ops::Merge(mode), &[input.tensor()])?)
}

/// `input + inner(input)`; `inner` must preserve every axis.
pub fn residual_block(input: &FeatureMap, inner: impl FnOnce(&FeatureMap) -> Result<FeatureMap>) -> Result<FeatureMap> {
    let branch = inner(input)?;
    if branch.tensor().shape() != input.tensor().shape() {
        return Err(Error::invalid(format!(
            "residual inner changed shape {:?} -> {:?}",
            input.tensor().shape(),
            branch.tensor().shape()
        )));
    }
    FeatureMap::new(input.tensor().add(branch.tensor())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    match kind {
        Activation::Relu => input.map(crate::numerics::ops::relu),
    }
}

/// Per-sample, per-channel standardisation over the spatial axes.
pub fn instance_norm(input: &Tensor) -> Result<Tensor> {
    run(&ops::InstanceNorm, &[input])
}

/// Per-voxel softmax over the channel axis of `(B, C, ...)`.
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    run(&ops::SoftmaxChannels, &[input])
}

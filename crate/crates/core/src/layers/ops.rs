//! Graph operations for the convolution, merging and softmax layers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::kernel::{self, Geometry};
use crate::error::Error;
use crate::numerics::{Operation, Tensor};

fn cubic_kernel(w: &[usize], lead: usize) -> Result<usize, String> {
    let k = w[lead];
    if w[lead..] != [k, k, k] {
        return Err(format!("kernel must be cubic, got {:?}", &w[lead..]));
    }
    if k.is_multiple_of(2) {
        return Err(format!("kernel size must be odd, got {k}"));
    }
    Ok(k)
}

/// Plain convolution: `x (B, C_in, D, H, W)`, `w (C_out, C_in, k, k, k)`, `b (C_out)`.
#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub dilation: usize,
}

impl Operation for Conv3d {
    fn name(&self) -> &'static str {
        "conv3d"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let [x, w, b] = inputs else {
            return Err("conv3d takes (input, weight, bias)".into());
        };
        if x.len() != 5 || w.len() != 5 || b.len() != 1 {
            return Err(format!("expected rank 5/5/1, got {x:?} {w:?} {b:?}"));
        }
        cubic_kernel(w, 2)?;
        if w[1] != x[1] {
            return Err(format!("kernel expects {} input channels, input has {}", w[1], x[1]));
        }
        if b[0] != w[0] {
            return Err(format!("bias length {} != output channels {}", b[0], w[0]));
        }
        if self.dilation == 0 {
            return Err("dilation must be positive".into());
        }
        Ok(vec![x[0], w[0], x[2], x[3], x[4]])
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let s = x.shape();
        let (batch, c_in, c_out) = (s[0], s[1], w.shape()[0]);
        let g = Geometry {
            d: s[2],
            h: s[3],
            w: s[4],
            k: w.shape()[2],
            dilation: self.dilation,
        };
        let v = g.voxels();
        let mut out = Tensor::zeros([batch, c_out, s[2], s[3], s[4]]);
        for (xi, oi) in x
            .data()
            .chunks_exact(c_in * v)
            .zip(out.data_mut().chunks_exact_mut(c_out * v))
        {
            kernel::forward(xi, c_in, &g, w.data(), b.data(), c_out, oi);
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let s = x.shape();
        let (c_in, c_out) = (s[1], w.shape()[0]);
        let g = Geometry {
            d: s[2],
            h: s[3],
            w: s[4],
            k: w.shape()[2],
            dilation: self.dilation,
        };
        let v = g.voxels();
        let mut dx = wanted[0].then(|| Tensor::zeros(s.to_vec()));
        let want_w = wanted[1] || wanted[2];
        let mut dw = Tensor::zeros(w.shape().to_vec());
        let mut db = Tensor::zeros([c_out]);
        for (i, (xi, dyi)) in x
            .data()
            .chunks_exact(c_in * v)
            .zip(grad.data().chunks_exact(c_out * v))
            .enumerate()
        {
            let dxi = dx.as_mut().map(|t| &mut t.data_mut()[i * c_in * v..(i + 1) * c_in * v]);
            let dwb = want_w.then(|| (dw.data_mut(), db.data_mut()));
            kernel::backward(xi, c_in, &g, w.data(), c_out, dyi, dxi, dwb);
        }
        vec![dx, wanted[1].then_some(dw), wanted[2].then_some(db)]
    }
}

/// Per-modality convolution across F-features.
///
/// `x (B, n, p_in, D, H, W)`, `w (n, p_out, p_in, k, k, k)`, `b (n, p_out)`.
/// Branch `m` of the output depends only on branch `m` of the input.
#[derive(Debug, Clone, Copy)]
pub struct CrossF {
    pub dilation: usize,
}

impl Operation for CrossF {
    fn name(&self) -> &'static str {
        "cross_f"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let [x, w, b] = inputs else {
            return Err("cross_f takes (input, weight, bias)".into());
        };
        if x.len() != 6 || w.len() != 6 || b.len() != 2 {
            return Err(format!("expected rank 6/6/2, got {x:?} {w:?} {b:?}"));
        }
        cubic_kernel(w, 3)?;
        if w[0] != x[1] {
            return Err(format!("{} kernel banks for {} modality branches", w[0], x[1]));
        }
        if w[2] != x[2] {
            return Err(format!("kernel expects {} F-features, input has {}", w[2], x[2]));
        }
        if b != &[w[0], w[1]] {
            return Err(format!("bias shape {b:?} != [{}, {}]", w[0], w[1]));
        }
        if self.dilation == 0 {
            return Err("dilation must be positive".into());
        }
        Ok(vec![x[0], x[1], w[1], x[3], x[4], x[5]])
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let s = x.shape();
        let (batch, n, p_in) = (s[0], s[1], s[2]);
        let p_out = w.shape()[1];
        let g = Geometry {
            d: s[3],
            h: s[4],
            w: s[5],
            k: w.shape()[3],
            dilation: self.dilation,
        };
        let v = g.voxels();
        let bank = p_out * p_in * g.taps();
        let mut out = Tensor::zeros([batch, n, p_out, s[3], s[4], s[5]]);
        let xs = x.data().chunks_exact(p_in * v);
        let os = out.data_mut().chunks_exact_mut(p_out * v);
        for (i, (xi, oi)) in xs.zip(os).enumerate() {
            let m = i % n;
            kernel::forward(
                xi,
                p_in,
                &g,
                &w.data()[m * bank..(m + 1) * bank],
                &b.data()[m * p_out..(m + 1) * p_out],
                p_out,
                oi,
            );
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let s = x.shape();
        let (n, p_in) = (s[1], s[2]);
        let p_out = w.shape()[1];
        let g = Geometry {
            d: s[3],
            h: s[4],
            w: s[5],
            k: w.shape()[3],
            dilation: self.dilation,
        };
        let v = g.voxels();
        let bank = p_out * p_in * g.taps();
        let mut dx = wanted[0].then(|| Tensor::zeros(s.to_vec()));
        let want_w = wanted[1] || wanted[2];
        let mut dw = Tensor::zeros(w.shape().to_vec());
        let mut db = Tensor::zeros(vec![n, p_out]);
        let xs = x.data().chunks_exact(p_in * v);
        let dys = grad.data().chunks_exact(p_out * v);
        for (i, (xi, dyi)) in xs.zip(dys).enumerate() {
            let m = i % n;
            let dxi = dx.as_mut().map(|t| &mut t.data_mut()[i * p_in * v..(i + 1) * p_in * v]);
            let dwb = want_w.then(|| {
                (
                    &mut dw.data_mut()[m * bank..(m + 1) * bank],
                    &mut db.data_mut()[m * p_out..(m + 1) * p_out],
                )
            });
            kernel::backward(xi, p_in, &g, &w.data()[m * bank..(m + 1) * bank], p_out, dyi, dxi, dwb);
        }
        vec![dx, wanted[1].then_some(dw), wanted[2].then_some(db)]
    }
}

/// Per-F-feature convolution across modality branches.
///
/// `x (B, n_in, p, D, H, W)`, `w (p, n_out, n_in, k, k, k)`, `b (p, n_out)`.
/// Feature `f` of the output depends only on feature `f` of the input.
#[derive(Debug, Clone, Copy)]
pub struct CrossM {
    pub dilation: usize,
}

/// Copies `x[b, :, f]` (strided over the modality axis) into a contiguous block.
fn gather_feature(x: &[f64], b: usize, f: usize, n: usize, p: usize, v: usize, out: &mut [f64]) {
    for m in 0..n {
        let src = ((b * n + m) * p + f) * v;
        out[m * v..(m + 1) * v].copy_from_slice(&x[src..src + v]);
    }
}

fn scatter_feature(src: &[f64], b: usize, f: usize, n: usize, p: usize, v: usize, x: &mut [f64]) {
    for m in 0..n {
        let dst = ((b * n + m) * p + f) * v;
        x[dst..dst + v].copy_from_slice(&src[m * v..(m + 1) * v]);
    }
}

impl Operation for CrossM {
    fn name(&self) -> &'static str {
        "cross_m"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let [x, w, b] = inputs else {
            return Err("cross_m takes (input, weight, bias)".into());
        };
        if x.len() != 6 || w.len() != 6 || b.len() != 2 {
            return Err(format!("expected rank 6/6/2, got {x:?} {w:?} {b:?}"));
        }
        cubic_kernel(w, 3)?;
        if w[0] != x[2] {
            return Err(format!("{} kernel banks for {} F-features", w[0], x[2]));
        }
        if w[2] != x[1] {
            return Err(format!("kernel expects {} modality branches, input has {}", w[2], x[1]));
        }
        if b != &[w[0], w[1]] {
            return Err(format!("bias shape {b:?} != [{}, {}]", w[0], w[1]));
        }
        if self.dilation == 0 {
            return Err("dilation must be positive".into());
        }
        Ok(vec![x[0], w[1], x[2], x[3], x[4], x[5]])
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let s = x.shape();
        let (batch, n_in, p) = (s[0], s[1], s[2]);
        let n_out = w.shape()[1];
        let g = Geometry {
            d: s[3],
            h: s[4],
            w: s[5],
            k: w.shape()[3],
            dilation: self.dilation,
        };
        let v = g.voxels();
        let bank = n_out * n_in * g.taps();
        let mut out = Tensor::zeros([batch, n_out, p, s[3], s[4], s[5]]);
        let mut xin = vec![0.0; n_in * v];
        let mut yout = vec![0.0; n_out * v];
        for bi in 0..batch {
            for f in 0..p {
                gather_feature(x.data(), bi, f, n_in, p, v, &mut xin);
                kernel::forward(
                    &xin,
                    n_in,
                    &g,
                    &w.data()[f * bank..(f + 1) * bank],
                    &b.data()[f * n_out..(f + 1) * n_out],
                    n_out,
                    &mut yout,
                );
                scatter_feature(&yout, bi, f, n_out, p, v, out.data_mut());
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        let (x, w) = (inputs[0], inputs[1]);
        let s = x.shape();
        let (batch, n_in, p) = (s[0], s[1], s[2]);
        let n_out = w.shape()[1];
        let g = Geometry {
            d: s[3],
            h: s[4],
            w: s[5],
            k: w.shape()[3],
            dilation: self.dilation,
        };
        let v = g.voxels();
        let bank = n_out * n_in * g.taps();
        let mut dx = wanted[0].then(|| Tensor::zeros(s.to_vec()));
        let want_w = wanted[1] || wanted[2];
        let mut dw = Tensor::zeros(w.shape().to_vec());
        let mut db = Tensor::zeros(vec![p, n_out]);
        let mut xin = vec![0.0; n_in * v];
        let mut dyo = vec![0.0; n_out * v];
        let mut dxi = vec![0.0; n_in * v];
        for bi in 0..batch {
            for f in 0..p {
                gather_feature(x.data(), bi, f, n_in, p, v, &mut xin);
                gather_feature(grad.data(), bi, f, n_out, p, v, &mut dyo);
                let dwb = want_w.then(|| {
                    (
                        &mut dw.data_mut()[f * bank..(f + 1) * bank],
                        &mut db.data_mut()[f * n_out..(f + 1) * n_out],
                    )
                });
                let dxs = dx.is_some().then_some(dxi.as_mut_slice());
                kernel::backward(
                    &xin,
                    n_in,
                    &g,
                    &w.data()[f * bank..(f + 1) * bank],
                    n_out,
                    &dyo,
                    dxs,
                    dwb,
                );
                if let Some(dx) = dx.as_mut() {
                    scatter_feature(&dxi, bi, f, n_in, p, v, dx.data_mut());
                }
            }
        }
        vec![dx, wanted[1].then_some(dw), wanted[2].then_some(db)]
    }
}

/// How the modality axis is collapsed at the backend/frontend interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Fold modalities into the feature axis, modality-major.
    Concat,
    Average,
    Maxout,
}

impl MergeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMode::Concat => "concat",
            MergeMode::Average => "average",
            MergeMode::Maxout => "maxout",
        }
    }
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "concat" => Ok(MergeMode::Concat),
            "average" => Ok(MergeMode::Average),
            "maxout" => Ok(MergeMode::Maxout),
            other => Err(Error::invalid(format!("unknown merge mode `{other}`"))),
        }
    }
}

/// `x (B, n, p, D, H, W)` to `(B, 1, p, ...)`, or `(B, 1, n*p, ...)` for concat.
#[derive(Debug, Clone, Copy)]
pub struct Merge(pub MergeMode);

impl Operation for Merge {
    fn name(&self) -> &'static str {
        "merge"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let [x] = inputs else {
            return Err("merge takes one input".into());
        };
        if x.len() != 6 {
            return Err(format!("merge expects a rank-6 feature map, got {x:?}"));
        }
        let p = match self.0 {
            MergeMode::Concat => x[1] * x[2],
            _ => x[2],
        };
        Ok(vec![x[0], 1, p, x[3], x[4], x[5]])
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let x = inputs[0];
        let s = x.shape();
        let out_shape = self.infer_shape(&[s]).expect("checked");
        if self.0 == MergeMode::Concat {
            // (B, n, p, ...) is already laid out modality-major.
            return x.clone().reshape(out_shape).expect("same size");
        }
        let (batch, n) = (s[0], s[1]);
        let block = s[2..].iter().product::<usize>();
        let mut out = Tensor::zeros(out_shape);
        for b in 0..batch {
            let dst = &mut out.data_mut()[b * block..(b + 1) * block];
            let src = &x.data()[b * n * block..(b + 1) * n * block];
            dst.copy_from_slice(&src[..block]);
            for m in 1..n {
                let branch = &src[m * block..(m + 1) * block];
                match self.0 {
                    MergeMode::Average => dst.iter_mut().zip(branch).for_each(|(a, v)| *a += v),
                    _ => dst.iter_mut().zip(branch).for_each(|(a, &v)| {
                        if v > *a {
                            *a = v
                        }
                    }),
                }
            }
            if self.0 == MergeMode::Average {
                let inv = 1.0 / n as f64;
                dst.iter_mut().for_each(|a| *a *= inv);
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        if !wanted[0] {
            return vec![None];
        }
        let x = inputs[0];
        let s = x.shape();
        if self.0 == MergeMode::Concat {
            return vec![Some(grad.clone().reshape(s.to_vec()).expect("same size"))];
        }
        let (batch, n) = (s[0], s[1]);
        let block = s[2..].iter().product::<usize>();
        let mut dx = Tensor::zeros(s.to_vec());
        for b in 0..batch {
            let g = &grad.data()[b * block..(b + 1) * block];
            let dst = &mut dx.data_mut()[b * n * block..(b + 1) * n * block];
            match self.0 {
                MergeMode::Average => {
                    let inv = 1.0 / n as f64;
                    for m in 0..n {
                        for (d, gv) in dst[m * block..(m + 1) * block].iter_mut().zip(g) {
                            *d = gv * inv;
                        }
                    }
                }
                _ => {
                    // Route to the first branch attaining the maximum.
                    let y = &output.data()[b * block..(b + 1) * block];
                    let src = &x.data()[b * n * block..(b + 1) * n * block];
                    for i in 0..block {
                        let m = (0..n).find(|&m| src[m * block + i] == y[i]).expect("max attained");
                        dst[m * block + i] = g[i];
                    }
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Softmax over axis 1 of `(B, C, ...)`, max-shifted.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxChannels;

impl Operation for SoftmaxChannels {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let [x] = inputs else {
            return Err("softmax takes one input".into());
        };
        if x.len() < 2 || x[1] < 2 {
            return Err(format!("softmax needs at least 2 channels on axis 1, got {x:?}"));
        }
        Ok(x.to_vec())
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let x = inputs[0];
        let s = x.shape();
        let (batch, c) = (s[0], s[1]);
        let v: usize = s[2..].iter().product();
        let mut out = Tensor::zeros(s.to_vec());
        let (xd, od) = (x.data(), out.data_mut());
        for b in 0..batch {
            let base = b * c * v;
            for i in 0..v {
                let mx = (0..c).map(|ch| xd[base + ch * v + i]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for ch in 0..c {
                    let e = (xd[base + ch * v + i] - mx).exp();
                    od[base + ch * v + i] = e;
                    total += e;
                }
                let inv = 1.0 / total;
                for ch in 0..c {
                    od[base + ch * v + i] *= inv;
                }
            }
        }
        out
    }

    fn backward(&self, _: &[&Tensor], y: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        if !wanted[0] {
            return vec![None];
        }
        let s = y.shape();
        let (batch, c) = (s[0], s[1]);
        let v: usize = s[2..].iter().product();
        let mut dx = Tensor::zeros(s.to_vec());
        let (yd, gd, dd) = (y.data(), grad.data(), dx.data_mut());
        for b in 0..batch {
            let base = b * c * v;
            for i in 0..v {
                let dot: f64 = (0..c).map(|ch| yd[base + ch * v + i] * gd[base + ch * v + i]).sum();
                for ch in 0..c {
                    let j = base + ch * v + i;
                    dd[j] = yd[j] * (gd[j] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Added to the variance before the square root.
pub const NORM_EPS: f64 = 1e-5;

/// Standardises every channel of every sample over its last three (spatial)
/// axes: `y = (x - mean) / sqrt(var + NORM_EPS)`, population variance.
#[derive(Debug, Clone, Copy)]
pub struct InstanceNorm;

impl InstanceNorm {
    fn spatial(shape: &[usize]) -> usize {
        shape[shape.len() - 3..].iter().product()
    }
}

impl Operation for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance_norm"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let [x] = inputs else {
            return Err("instance norm takes one input".into());
        };
        if x.len() < 4 {
            return Err(format!("need leading axes plus (D, H, W), got {x:?}"));
        }
        Ok(x.to_vec())
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let x = inputs[0];
        let v = Self::spatial(x.shape());
        let mut out = Tensor::zeros(x.shape().to_vec());
        for (xs, ys) in x.data().chunks_exact(v).zip(out.data_mut().chunks_exact_mut(v)) {
            let mean = xs.iter().sum::<f64>() / v as f64;
            let var = xs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / v as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (y, a) in ys.iter_mut().zip(xs) {
                *y = (a - mean) * inv;
            }
        }
        out
    }

    fn backward(&self, inputs: &[&Tensor], y: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        if !wanted[0] {
            return vec![None];
        }
        let x = inputs[0];
        let v = Self::spatial(x.shape());
        let n = v as f64;
        let mut dx = Tensor::zeros(x.shape().to_vec());
        let chunks = x
            .data()
            .chunks_exact(v)
            .zip(y.data().chunks_exact(v))
            .zip(grad.data().chunks_exact(v));
        for (((xs, ys), gs), ds) in chunks.zip(dx.data_mut().chunks_exact_mut(v)) {
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            // dx = inv * (g - mean(g) - y * mean(g * y))
            let gm = gs.iter().sum::<f64>() / n;
            let gy = gs.iter().zip(ys).map(|(g, y)| g * y).sum::<f64>() / n;
            for ((d, g), y) in ds.iter_mut().zip(gs).zip(ys) {
                *d = inv * (g - gm - y * gy);
            }
        }
        vec![Some(dx)]
    }
}

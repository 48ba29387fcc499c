//! Soft Dice loss over one-hot labels.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, Operation, Tensor};

/// Smoothing added to numerator and denominator of every class score.
pub const DICE_EPS: f64 = 1e-5;

/// Per-class sums `(Σ p·g, Σ p², Σ g)` over batch and voxels of a
/// `(B, C, ...)` probability tensor. `g` is one-hot, so `Σ g² = Σ g`.
/// Per-entry partial sums are added in sorted order, so the result does not
/// depend on the order of the batch.
fn class_sums(probs: &Tensor, labels: &[u8]) -> Vec<(f64, f64, f64)> {
    let s = probs.shape();
    let (batch, c) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    let d = probs.data();
    let mut parts = vec![Vec::with_capacity(batch); c];
    for b in 0..batch {
        let lab = &labels[b * v..(b + 1) * v];
        for (ch, part) in parts.iter_mut().enumerate() {
            let p = &d[(b * c + ch) * v..(b * c + ch + 1) * v];
            let mut acc = (0.0, 0.0, 0.0);
            for (&pi, &li) in p.iter().zip(lab) {
                if li as usize == ch {
                    acc.0 += pi;
                    acc.2 += 1.0;
                }
                acc.1 += pi * pi;
            }
            part.push(acc);
        }
    }
    let ordered_sum = |mut xs: Vec<f64>| {
        xs.sort_by(f64::total_cmp);
        xs.into_iter().sum::<f64>()
    };
    parts
        .into_iter()
        .map(|part| {
            (
                ordered_sum(part.iter().map(|p| p.0).collect()),
                ordered_sum(part.iter().map(|p| p.1).collect()),
                ordered_sum(part.iter().map(|p| p.2).collect()),
            )
        })
        .collect()
}

fn check(probs: &[usize], labels: &[u8], classes: usize) -> Result<()> {
    if probs.len() < 3 || probs[1] != classes {
        return Err(Error::invalid(format!(
            "probabilities must be (B, {classes}, ...), got {probs:?}"
        )));
    }
    let voxels: usize = probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != 1)
        .map(|(_, &d)| d)
        .product();
    if voxels != labels.len() {
        return Err(Error::invalid(format!("{} labels for {voxels} voxels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Soft Dice score of every class.
pub fn soft_dice_per_class(probs: &Tensor, labels: &[u8]) -> Result<Vec<f64>> {
    check(probs.shape(), labels, *probs.shape().get(1).unwrap_or(&0))?;
    Ok(class_sums(probs, labels)
        .into_iter()
        .map(|(i, s, g)| (2.0 * i + DICE_EPS) / (s + g + DICE_EPS))
        .collect())
}

/// `1 - mean_c DSC_c`.
pub fn soft_dice_loss(probs: &Tensor, labels: &[u8]) -> Result<f64> {
    let d = soft_dice_per_class(probs, labels)?;
    Ok(1.0 - d.iter().sum::<f64>() / d.len() as f64)
}

/// Mean soft Dice over classes `1..C`, computed per batch entry and averaged.
pub fn foreground_soft_dice(probs: &Tensor, labels: &[u8]) -> Result<f64> {
    let s = probs.shape();
    if s.len() < 3 || s[1] < 2 {
        return Err(Error::invalid(format!(
            "need (B, C >= 2, ...) probabilities, got {s:?}"
        )));
    }
    let batch = s[0];
    let per = probs.numel() / batch;
    let v = labels.len() / batch.max(1);
    let mut total = 0.0;
    for b in 0..batch {
        let mut shape = s.to_vec();
        shape[0] = 1;
        let one = Tensor::new(shape, probs.data()[b * per..(b + 1) * per].to_vec())?;
        let d = soft_dice_per_class(&one, &labels[b * v..(b + 1) * v])?;
        total += d[1..].iter().sum::<f64>() / (d.len() - 1) as f64;
    }
    Ok(total / batch as f64)
}

/// Graph operation computing [`soft_dice_loss`] against fixed labels.
#[derive(Debug, Clone)]
pub struct SoftDiceLoss {
    labels: Arc<[u8]>,
    classes: usize,
}

impl SoftDiceLoss {
    pub fn new(labels: impl Into<Arc<[u8]>>, classes: usize) -> Result<Self> {
        let labels = labels.into();
        if classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(SoftDiceLoss { labels, classes })
    }

    /// Records the loss of `probs` on `g`.
    pub fn record(self, g: &mut Graph, probs: NodeId) -> Result<NodeId> {
        g.apply(self, &[probs])
    }
}

impl Operation for SoftDiceLoss {
    fn name(&self) -> &'static str {
        "soft_dice_loss"
    }

    fn infer_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let [p] = inputs else {
            return Err("soft Dice takes one input".into());
        };
        check(p, &self.labels, self.classes).map_err(|e| e.to_string())?;
        Ok(vec![])
    }

    fn forward(&self, inputs: &[&Tensor]) -> Tensor {
        let c = self.classes as f64;
        let mean: f64 = class_sums(inputs[0], &self.labels)
            .into_iter()
            .map(|(i, s, g)| (2.0 * i + DICE_EPS) / (s + g + DICE_EPS))
            .sum::<f64>()
            / c;
        Tensor::scalar(1.0 - mean)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, wanted: &[bool]) -> Vec<Option<Tensor>> {
        if !wanted[0] {
            return vec![None];
        }
        let probs = inputs[0];
        let s = probs.shape();
        let (batch, c) = (s[0], s[1]);
        let v: usize = s[2..].iter().product();
        // dL/dp = -(1/C) [2g / den - num * 2p / den^2]
        let coef: Vec<(f64, f64)> = class_sums(probs, &self.labels)
            .into_iter()
            .map(|(i, sq, g)| {
                let den = sq + g + DICE_EPS;
                (2.0 / den, (2.0 * i + DICE_EPS) * 2.0 / (den * den))
            })
            .collect();
        let scale = -grad.data()[0] / c as f64;
        let d = probs.data();
        let mut out = vec![0.0; d.len()];
        for b in 0..batch {
            let lab = &self.labels[b * v..(b + 1) * v];
            for (ch, &(a, q)) in coef.iter().enumerate() {
                let off = (b * c + ch) * v;
                for i in 0..v {
                    let gi = if lab[i] as usize == ch { a } else { 0.0 };
                    out[off + i] = scale * (gi - q * d[off + i]);
                }
            }
        }
        vec![Some(Tensor::new(s, out).expect("same shape"))]
    }
}

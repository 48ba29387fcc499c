//! Instantiating an [`ArchSpec`] as trainable weights and recording it on a graph.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::spec::{step_channels, ArchSpec, Channels, LayerKind, LayerSpec};
use crate::error::{Error, Result};
use crate::layers::ops::{Conv3d, CrossF, CrossM, InstanceNorm, Merge, SoftmaxChannels};
use crate::numerics::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    He {
        fan_in: usize,
    },
    Zero,
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Weight and bias slots of every weighted layer, in recording order.
fn slots(arch: &ArchSpec) -> Result<Vec<Slot>> {
    let mut out = Vec::new();
    let mut counters = BTreeMap::new();
    let mut state = Channels::Branched {
        n: arch.n_modalities,
        p: 1,
    };
    for l in arch.layers() {
        collect(l, &mut state, &mut counters, &mut out)?;
    }
    Ok(out)
}

fn collect(
    l: &LayerSpec,
    state: &mut Channels,
    counters: &mut BTreeMap<&'static str, usize>,
    out: &mut Vec<Slot>,
) -> Result<()> {
    if let LayerKind::Residual(inner) = &l.kind {
        let mut s = *state;
        let first = out.len();
        for x in inner {
            collect(x, &mut s, counters, out)?;
        }
        // each branch starts as the zero map, so the block starts as identity
        if let Some(last) = out[first..]
            .iter_mut()
            .rev()
            .find(|slot| slot.name.ends_with(".weight"))
        {
            last.init = Init::Zero;
        }
        return Ok(());
    }
    if l.kind.is_convolution() {
        let tag = l.kind.tag();
        let idx = counters.entry(tag).or_insert(0);
        let k = l.k;
        let (w, b, init) = match (&l.kind, *state) {
            (LayerKind::CrossF, Channels::Branched { n, p }) => (
                vec![n, l.channels_out, p, k, k, k],
                vec![n, l.channels_out],
                Init::He { fan_in: p * k * k * k },
            ),
            (LayerKind::CrossM, Channels::Branched { n, p }) => {
                (vec![p, l.channels_out, n, k, k, k], vec![p, l.channels_out], Init::Zero)
            }
            (LayerKind::Conv, Channels::Merged(c)) => (
                vec![l.channels_out, c, k, k, k],
                vec![l.channels_out],
                Init::He { fan_in: c * k * k * k },
            ),
            _ => return Err(Error::invalid(format!("{tag} in wrong stage"))),
        };
        out.push(Slot {
            name: format!("{tag}.{idx}.weight"),
            shape: w,
            init,
        });
        out.push(Slot {
            name: format!("{tag}.{idx}.bias"),
            shape: b,
            init: Init::Zero,
        });
        *idx += 1;
    }
    *state = step_channels(l, *state, "")?;
    Ok(())
}

/// An architecture together with its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: ArchSpec,
    params: BTreeMap<String, Tensor>,
}

impl Network {
    /// Fresh weights: He-scaled normals for cross-F and joint convolutions;
    /// zeros for cross-M transformations, for the last convolution of every
    /// residual branch and for all biases. Draws are taken in layer order from
    /// a ChaCha8 stream seeded with `seed`; zero slots draw nothing.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for slot in slots(&arch)? {
            let numel: usize = slot.shape.iter().product();
            let data = match slot.init {
                Init::Zero => vec![0.0; numel],
                Init::He { fan_in } => {
                    let std = (2.0 / fan_in as f64).sqrt();
                    (0..numel)
                        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                        .collect()
                }
            };
            params.insert(slot.name, Tensor::new(slot.shape, data)?);
        }
        Ok(Network { arch, params })
    }

    /// Wraps existing weights after checking names and shapes against `arch`.
    pub fn from_parts(arch: ArchSpec, params: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let expected = slots(&arch)?;
        if expected.len() != params.len() {
            return Err(Error::invalid(format!(
                "architecture has {} parameter tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for slot in &expected {
            let t = params
                .get(&slot.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter `{}`", slot.name)))?;
            if t.shape() != slot.shape {
                return Err(Error::invalid(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    slot.name,
                    t.shape(),
                    slot.shape
                )));
            }
        }
        Ok(Network { arch, params })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn into_parts(self) -> (ArchSpec, BTreeMap<String, Tensor>) {
        (self.arch, self.params)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records the network on `g`, reading `(B, n, D, H, W)` images from
    /// `image`. Returns the node holding `(B, n_classes, D, H, W)` probabilities.
    pub fn record(&self, g: &mut Graph, image: NodeId) -> Result<NodeId> {
        let s = g.shape(image).to_vec();
        if s.len() != 5 || s[1] != self.arch.n_modalities {
            return Err(Error::invalid(format!(
                "network expects (B, {}, D, H, W) images, got {s:?}",
                self.arch.n_modalities
            )));
        }
        let x = g.reshape(image, &[s[0], s[1], 1, s[2], s[3], s[4]])?;
        let mut rec = Recorder {
            net: self,
            g,
            counters: BTreeMap::new(),
        };
        let mut x = x;
        for l in self.arch.layers() {
            x = rec.layer(l, x)?;
        }
        Ok(x)
    }

    /// Class probabilities for a batch of `(B, n, D, H, W)` images.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input("image", images.shape())?;
        let probs = self.record(&mut g, x)?;
        g.output("probs", probs);
        let mut out = g.forward_eval(&BTreeMap::from([("image".to_string(), images.clone())]))?;
        Ok(out.remove("probs").expect("declared output"))
    }

    /// Hard labels (argmax, first maximum on ties) for one `(n, D, H, W)` image.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<u8>> {
        let s = image.shape();
        if s.len() != 4 {
            return Err(Error::invalid(format!("expected (n, D, H, W) image, got {s:?}")));
        }
        let batch = image.clone().reshape([1, s[0], s[1], s[2], s[3]])?;
        Ok(argmax_channels(&self.forward(&batch)?))
    }
}

/// Per-voxel argmax over axis 1 of a `(1, C, ...)` tensor.
pub fn argmax_channels(probs: &Tensor) -> Vec<u8> {
    let c = probs.shape()[1];
    let v: usize = probs.shape()[2..].iter().product();
    let d = probs.data();
    (0..v)
        .map(|i| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * v + i] > d[best * v + i] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect()
}

struct Recorder<'a> {
    net: &'a Network,
    g: &'a mut Graph,
    counters: BTreeMap<&'static str, usize>,
}

impl Recorder<'_> {
    fn params(&mut self, tag: &'static str) -> Result<(NodeId, NodeId)> {
        let idx = self.counters.entry(tag).or_insert(0);
        let (wn, bn) = (format!("{tag}.{idx}.weight"), format!("{tag}.{idx}.bias"));
        *idx += 1;
        let get = |name: &str| {
            self.net
                .params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
        };
        let (w, b) = (get(&wn)?, get(&bn)?);
        Ok((self.g.param(&wn, w)?, self.g.param(&bn, b)?))
    }

    fn layer(&mut self, l: &LayerSpec, x: NodeId) -> Result<NodeId> {
        let d = l.dilation;
        match &l.kind {
            LayerKind::Conv => {
                let (w, b) = self.params("conv")?;
                self.g.apply(Conv3d { dilation: d }, &[x, w, b])
            }
            LayerKind::CrossF => {
                let (w, b) = self.params("cross_f")?;
                self.g.apply(CrossF { dilation: d }, &[x, w, b])
            }
            LayerKind::CrossM => {
                let (w, b) = self.params("cross_m")?;
                self.g.apply(CrossM { dilation: d }, &[x, w, b])
            }
            LayerKind::Residual(inner) => {
                let mut y = x;
                for i in inner {
                    y = self.layer(i, y)?;
                }
                self.g.add(x, y)
            }
            LayerKind::Merge(mode) => {
                let m = self.g.apply(Merge(*mode), &[x])?;
                let s = self.g.shape(m).to_vec();
                self.g.reshape(m, &[s[0], s[2], s[3], s[4], s[5]])
            }
            LayerKind::Norm => self.g.apply(InstanceNorm, &[x]),
            LayerKind::Activation => self.g.relu(x),
            LayerKind::Softmax => self.g.apply(SoftmaxChannels, &[x]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_variant, count_params, VARIANTS};

    #[test]
    fn param_count_matches_analysis() {
        for name in VARIANTS {
            let arch = build_variant(name, 3, 4, 2).unwrap();
            let net = Network::init(arch.clone(), 1).unwrap();
            assert_eq!(net.num_params(), count_params(&arch).unwrap().total(), "{name}");
        }
    }

    #[test]
    fn forward_shapes_and_probabilities() {
        let arch = build_variant("SN31Ave1", 2, 3, 2).unwrap();
        let net = Network::init(arch, 7).unwrap();
        let x = Tensor::new([1, 2, 4, 4, 4], (0..128).map(|i| (i % 5) as f64 / 5.0).collect()).unwrap();
        let p = net.forward(&x).unwrap();
        assert_eq!(p.shape(), &[1, 3, 4, 4, 4]);
        for v in 0..64 {
            let s: f64 = (0..3).map(|c| p.data()[c * 64 + v]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(net.predict(&x.reshape([2, 4, 4, 4]).unwrap()).unwrap().len(), 64);
    }

    #[test]
    fn init_is_seeded() {
        let arch = build_variant("Classic", 2, 3, 2).unwrap();
        let a = Network::init(arch.clone(), 3).unwrap();
        let b = Network::init(arch.clone(), 3).unwrap();
        let c = Network::init(arch, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn cross_m_starts_at_zero() {
        let net = Network::init(build_variant("SN33Ave2", 2, 3, 2).unwrap(), 1).unwrap();
        let cm: Vec<_> = net.params().iter().filter(|(k, _)| k.starts_with("cross_m")).collect();
        assert_eq!(cm.len(), 4);
        assert!(cm.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn from_parts_checks_shapes() {
        let arch = build_variant("SN31Ave1", 2, 3, 2).unwrap();
        let net = Network::init(arch.clone(), 1).unwrap();
        let (_, mut params) = net.into_parts();
        assert!(Network::from_parts(arch.clone(), params.clone()).is_ok());
        params.insert("conv.0.bias".into(), Tensor::zeros([9]));
        assert!(Network::from_parts(arch, params).is_err());
    }
}

use super::spec::{step_channels, ArchSpec, Channels, LayerKind, LayerSpec};
use crate::error::Result;

/// Stored parameters of one weighted layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    /// Position, e.g. `backend.2.0` for the first inner layer of backend layer 2.
    pub path: String,
    pub kind: &'static str,
    pub weights: usize,
    pub biases: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub layers: Vec<LayerCount>,
}

impl ParamReport {
    pub fn weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights).sum()
    }

    pub fn biases(&self) -> usize {
        self.layers.iter().map(|l| l.biases).sum()
    }

    pub fn total(&self) -> usize {
        self.weights() + self.biases()
    }

    /// Sum over layers whose path starts with `prefix`.
    pub fn total_under(&self, prefix: &str) -> usize {
        self.layers
            .iter()
            .filter(|l| l.path.starts_with(prefix))
            .map(LayerCount::total)
            .sum()
    }
}

/// `(weights, biases)` of a layer given the channels flowing into it.
pub fn layer_params(layer: &LayerSpec, input: Channels) -> (usize, usize) {
    let k3 = layer.k.pow(3);
    match (&layer.kind, input) {
        (LayerKind::CrossF, Channels::Branched { n, p }) => (n * layer.channels_out * p * k3, n * layer.channels_out),
        (LayerKind::CrossM, Channels::Branched { n, p }) => (p * layer.channels_out * n * k3, p * layer.channels_out),
        (LayerKind::Conv, Channels::Merged(c)) => (layer.channels_out * c * k3, layer.channels_out),
        _ => (0, 0),
    }
}

/// Itemizes the weighted layers of a list entered with channels `input`.
pub fn count_layers(layers: &[LayerSpec], input: Channels, prefix: &str) -> Result<(ParamReport, Channels)> {
    let mut out = Vec::new();
    let mut state = input;
    walk(layers, &mut state, prefix, &mut out)?;
    Ok((ParamReport { layers: out }, state))
}

fn walk(layers: &[LayerSpec], state: &mut Channels, prefix: &str, out: &mut Vec<LayerCount>) -> Result<()> {
    for (i, layer) in layers.iter().enumerate() {
        let path = format!("{prefix}.{i}");
        if let LayerKind::Residual(inner) = &layer.kind {
            let mut s = *state;
            walk(inner, &mut s, &path, out)?;
        } else if layer.kind.is_convolution() {
            let (weights, biases) = layer_params(layer, *state);
            out.push(LayerCount {
                path: path.clone(),
                kind: layer.kind.tag(),
                weights,
                biases,
            });
        }
        *state = step_channels(layer, *state, &path)?;
    }
    Ok(())
}

/// Parameter counts of every weighted layer, backend first.
pub fn count_params(spec: &ArchSpec) -> Result<ParamReport> {
    let input = Channels::Branched {
        n: spec.n_modalities,
        p: 1,
    };
    let (mut report, state) = count_layers(&spec.backend, input, "backend")?;
    let (front, _) = count_layers(&spec.frontend, state, "frontend")?;
    report.layers.extend(front.layers);
    Ok(report)
}

/// Weights of one factored layer (cross-F then cross-M) on `n` branches of
/// `p` features, and of the joint convolution on the concatenated `n * p`
/// channels, both with kernel size `k` and unchanged widths.
pub fn factored_vs_joint_weights(p: usize, n: usize, k: usize) -> (usize, usize) {
    let pair = [LayerSpec::cross_f(k, 1, p), LayerSpec::cross_m(k, 1, n)];
    let (factored, _) = count_layers(&pair, Channels::Branched { n, p }, "pair").expect("valid pair");
    let joint = [LayerSpec::conv(k, 1, n * p)];
    let (joint, _) = count_layers(&joint, Channels::Merged(n * p), "joint").expect("valid conv");
    (factored.weights(), joint.weights())
}

fn extent(layers: &[LayerSpec]) -> usize {
    layers
        .iter()
        .map(|l| match &l.kind {
            LayerKind::Residual(inner) => extent(inner),
            k if k.is_convolution() => (l.k - 1) * l.dilation,
            _ => 0,
        })
        .sum()
}

/// Receptive field of one output voxel, per axis `(z, y, x)`.
///
/// Stride-1 convolutions grow the field by `(k - 1) * dilation` each; a
/// residual block contributes its convolution path, the skip path adds nothing.
pub fn receptive_field(spec: &ArchSpec) -> [usize; 3] {
    let r = 1 + extent(&spec.backend) + extent(&spec.frontend);
    [r, r, r]
}

/// Receptive-field growth of a bare layer list.
pub fn receptive_extent(layers: &[LayerSpec]) -> usize {
    extent(layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{build_frontend, build_variant, VARIANTS};

    #[test]
    fn smallest_conv() {
        let (r, _) = count_layers(&[LayerSpec::conv(1, 1, 1)], Channels::Merged(1), "x").unwrap();
        assert_eq!((r.weights(), r.biases(), r.total()), (1, 1, 2));
    }

    #[test]
    fn cross_f_and_cross_m_counts() {
        let (r, _) = count_layers(&[LayerSpec::cross_f(3, 1, 8)], Channels::Branched { n: 4, p: 8 }, "x").unwrap();
        assert_eq!((r.weights(), r.biases()), (6912, 32));
        let (r, _) = count_layers(&[LayerSpec::cross_m(1, 1, 4)], Channels::Branched { n: 4, p: 8 }, "x").unwrap();
        assert_eq!((r.weights(), r.biases()), (128, 32));
        let (r, _) = count_layers(&[LayerSpec::cross_f(3, 1, 16)], Channels::Branched { n: 4, p: 16 }, "x").unwrap();
        assert_eq!(r.weights(), 27648);
        let (r, _) = count_layers(&[LayerSpec::cross_m(1, 1, 4)], Channels::Branched { n: 4, p: 16 }, "x").unwrap();
        assert_eq!(r.weights(), 256);
    }

    #[test]
    fn factored_ratio_at_eight() {
        assert_eq!(factored_vs_joint_weights(8, 8, 3), (27648, 110592));
    }

    #[test]
    fn single_conv_field() {
        assert_eq!(receptive_extent(&[LayerSpec::conv(3, 1, 4)]) + 1, 3);
    }

    #[test]
    fn frontend_extent_is_72() {
        assert_eq!(receptive_extent(&build_frontend(6, 16)), 72);
    }

    #[test]
    fn variant_fields() {
        for name in VARIANTS {
            for f in [1, 4, 16] {
                let expect = if name == "SN33Ave2" { 91 } else { 87 };
                let a = build_variant(name, 4, 6, f).unwrap();
                assert_eq!(receptive_field(&a), [expect; 3], "{name} f={f}");
            }
        }
        let classic = build_variant("Classic", 1, 6, 16).unwrap();
        let sn = build_variant("SN31Ave1", 1, 6, 16).unwrap();
        assert_eq!(receptive_field(&classic), receptive_field(&sn));
    }

    #[test]
    fn modality_count_only_moves_backend() {
        for name in VARIANTS {
            let a = count_params(&build_variant(name, 2, 6, 8).unwrap()).unwrap();
            let b = count_params(&build_variant(name, 5, 6, 8).unwrap()).unwrap();
            assert_eq!(a.total_under("frontend"), b.total_under("frontend"), "{name}");
            assert_ne!(a.total_under("backend"), b.total_under("backend"), "{name}");
        }
    }

    #[test]
    fn scalenets_are_smaller_than_classic() {
        for n in 2..=6 {
            for f in [4, 8, 16] {
                let classic = count_params(&build_variant("Classic", n, 6, f).unwrap())
                    .unwrap()
                    .total();
                for name in ["SN31Ave1", "SN31Ave2", "SN31Ave3", "SN33Ave2", "SN31Max2", "HeMIS-like"] {
                    let sn = count_params(&build_variant(name, n, 6, f).unwrap()).unwrap().total();
                    assert!(sn < classic, "{name} n={n} f={f}: {sn} >= {classic}");
                }
            }
        }
    }
}

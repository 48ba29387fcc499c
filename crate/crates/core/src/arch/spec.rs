use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::MergeMode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    /// Joint convolution over all channels of a merged map.
    Conv,
    CrossF,
    CrossM,
    Residual(Vec<LayerSpec>),
    Merge(MergeMode),
    /// Per-channel standardisation over the spatial axes of each sample.
    Norm,
    Activation,
    Softmax,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::CrossF => "cross_f",
            LayerKind::CrossM => "cross_m",
            LayerKind::Residual(_) => "residual",
            LayerKind::Merge(MergeMode::Concat) => "merge_concat",
            LayerKind::Merge(MergeMode::Average) => "merge_average",
            LayerKind::Merge(MergeMode::Maxout) => "merge_maxout",
            LayerKind::Norm => "norm",
            LayerKind::Activation => "activation",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Whether the layer carries weights.
    pub fn is_convolution(&self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::CrossF | LayerKind::CrossM)
    }
}

/// One entry of an architecture.
///
/// `channels_out` is the F-feature count for `cross_f`, the modality count for
/// `cross_m`, and the channel count for everything else. Layers without a
/// kernel use `k = 1`, `dilation = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub k: usize,
    pub dilation: usize,
    pub channels_out: usize,
}

impl LayerSpec {
    pub fn conv(k: usize, dilation: usize, channels_out: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Conv,
            k,
            dilation,
            channels_out,
        }
    }

    pub fn cross_f(k: usize, dilation: usize, features_out: usize) -> Self {
        LayerSpec {
            kind: LayerKind::CrossF,
            k,
            dilation,
            channels_out: features_out,
        }
    }

    pub fn cross_m(k: usize, dilation: usize, modalities_out: usize) -> Self {
        LayerSpec {
            kind: LayerKind::CrossM,
            k,
            dilation,
            channels_out: modalities_out,
        }
    }

    fn plain(kind: LayerKind, channels: usize) -> Self {
        LayerSpec {
            kind,
            k: 1,
            dilation: 1,
            channels_out: channels,
        }
    }

    pub fn residual(channels: usize, inner: Vec<LayerSpec>) -> Self {
        Self::plain(LayerKind::Residual(inner), channels)
    }

    pub fn merge(mode: MergeMode, channels: usize) -> Self {
        Self::plain(LayerKind::Merge(mode), channels)
    }

    pub fn norm(channels: usize) -> Self {
        Self::plain(LayerKind::Norm, channels)
    }

    pub fn activation(channels: usize) -> Self {
        Self::plain(LayerKind::Activation, channels)
    }

    pub fn softmax(channels: usize) -> Self {
        Self::plain(LayerKind::Softmax, channels)
    }

    pub fn inner(&self) -> Option<&[LayerSpec]> {
        match &self.kind {
            LayerKind::Residual(inner) => Some(inner),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    kind: String,
    k: usize,
    dilation: usize,
    channels_out: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inner: Option<Vec<RawLayer>>,
}

impl TryFrom<RawLayer> for LayerSpec {
    type Error = Error;

    fn try_from(raw: RawLayer) -> Result<Self> {
        let kind = match (raw.kind.as_str(), raw.inner) {
            ("residual", Some(inner)) => {
                LayerKind::Residual(inner.into_iter().map(LayerSpec::try_from).collect::<Result<_>>()?)
            }
            ("residual", None) => return Err(Error::invalid("residual layer without `inner`")),
            (tag, Some(_)) => return Err(Error::invalid(format!("`{tag}` layer cannot have `inner`"))),
            ("conv", None) => LayerKind::Conv,
            ("cross_f", None) => LayerKind::CrossF,
            ("cross_m", None) => LayerKind::CrossM,
            ("norm", None) => LayerKind::Norm,
            ("activation", None) => LayerKind::Activation,
            ("softmax", None) => LayerKind::Softmax,
            (tag, None) => match tag.strip_prefix("merge_") {
                Some(mode) => LayerKind::Merge(mode.parse()?),
                None => return Err(Error::invalid(format!("unknown layer kind `{tag}`"))),
            },
        };
        Ok(LayerSpec {
            kind,
            k: raw.k,
            dilation: raw.dilation,
            channels_out: raw.channels_out,
        })
    }
}

impl From<LayerSpec> for RawLayer {
    fn from(l: LayerSpec) -> Self {
        let kind = l.kind.tag().to_string();
        let inner = match l.kind {
            LayerKind::Residual(inner) => Some(inner.into_iter().map(RawLayer::from).collect()),
            _ => None,
        };
        RawLayer {
            kind,
            k: l.k,
            dilation: l.dilation,
            channels_out: l.channels_out,
            inner,
        }
    }
}

/// Channel bookkeeping while walking a layer list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channels {
    /// Before the merge: `n` modality branches of `p` F-features.
    Branched {
        n: usize,
        p: usize,
    },
    Merged(usize),
}

impl Channels {
    pub fn count(self) -> usize {
        match self {
            Channels::Branched { p, .. } => p,
            Channels::Merged(c) => c,
        }
    }
}

/// Advances `state` through one layer, checking the layer against it.
pub(crate) fn step_channels(layer: &LayerSpec, state: Channels, at: &str) -> Result<Channels> {
    let bad = |msg: String| Err(Error::invalid(format!("layer {at} ({}): {msg}", layer.kind.tag())));
    if layer.k == 0 || layer.k.is_multiple_of(2) {
        return bad(format!("kernel size must be odd, got {}", layer.k));
    }
    if layer.dilation == 0 || layer.channels_out == 0 {
        return bad("dilation and channels_out must be positive".into());
    }
    if !layer.kind.is_convolution() && (layer.k != 1 || layer.dilation != 1) {
        return bad("only convolutions take k and dilation other than 1".into());
    }
    let next = match (&layer.kind, state) {
        (LayerKind::CrossF, Channels::Branched { n, .. }) => Channels::Branched {
            n,
            p: layer.channels_out,
        },
        (LayerKind::CrossM, Channels::Branched { p, .. }) => Channels::Branched {
            n: layer.channels_out,
            p,
        },
        (LayerKind::CrossF | LayerKind::CrossM, Channels::Merged(_)) => {
            return bad("modality-dependent layer after the merge".into())
        }
        (LayerKind::Conv, Channels::Merged(_)) => Channels::Merged(layer.channels_out),
        (LayerKind::Conv, Channels::Branched { .. }) => return bad("joint conv before the merge".into()),
        (LayerKind::Merge(_), Channels::Merged(_)) => return bad("second merge".into()),
        (LayerKind::Merge(mode), Channels::Branched { n, p }) => {
            Channels::Merged(if *mode == MergeMode::Concat { n * p } else { p })
        }
        (LayerKind::Softmax, Channels::Branched { .. }) => return bad("softmax before the merge".into()),
        (LayerKind::Softmax, Channels::Merged(c)) if c < 2 => return bad("softmax needs 2+ channels".into()),
        (LayerKind::Norm | LayerKind::Activation | LayerKind::Softmax, s) => s,
        (LayerKind::Residual(inner), s) => {
            let mut cur = s;
            for (i, l) in inner.iter().enumerate() {
                cur = step_channels(l, cur, &format!("{at}.{i}"))?;
            }
            if cur != s {
                return bad(format!("inner layers change channels {s:?} -> {cur:?}"));
            }
            s
        }
    };
    let produced = match (&layer.kind, next) {
        (LayerKind::CrossM, Channels::Branched { n, .. }) => n,
        _ => next.count(),
    };
    if layer.channels_out != produced {
        return bad(format!("channels_out {} but produces {produced}", layer.channels_out));
    }
    Ok(next)
}

/// The named model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// `SN{kf}{km}{Ave|Max}{blocks}`: cross-F kernel size, cross-M kernel
    /// size, merge mode and number of cross-M residual blocks.
    ScaleNet {
        cross_f_k: usize,
        cross_m_k: usize,
        merge: MergeMode,
        blocks: usize,
    },
    /// ScaleNet with the cross-M transformations removed.
    HemisLike,
    /// Modalities concatenated at the input, joint convolutions throughout.
    Classic,
}

/// Number of residual blocks in the dilation-1 stage.
pub const STAGE_BLOCKS: usize = 3;

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownVariant(s.to_string());
        match s {
            "HeMIS-like" => return Ok(Variant::HemisLike),
            "Classic" => return Ok(Variant::Classic),
            _ => {}
        }
        let rest = s.strip_prefix("SN").ok_or_else(unknown)?;
        let mut chars = rest.chars();
        let digit = |c: Option<char>| c.and_then(|c| c.to_digit(10)).map(|d| d as usize);
        let cross_f_k = digit(chars.next()).ok_or_else(unknown)?;
        let cross_m_k = digit(chars.next()).ok_or_else(unknown)?;
        let tail: String = chars.collect();
        let (merge, blocks) = if let Some(b) = tail.strip_prefix("Ave") {
            (MergeMode::Average, b)
        } else if let Some(b) = tail.strip_prefix("Max") {
            (MergeMode::Maxout, b)
        } else {
            return Err(unknown());
        };
        let blocks: usize = blocks.parse().map_err(|_| unknown())?;
        if cross_f_k % 2 == 0 || cross_m_k % 2 == 0 || !(1..=STAGE_BLOCKS).contains(&blocks) {
            return Err(unknown());
        }
        Ok(Variant::ScaleNet {
            cross_f_k,
            cross_m_k,
            merge,
            blocks,
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::ScaleNet {
                cross_f_k,
                cross_m_k,
                merge,
                blocks,
            } => {
                let m = if *merge == MergeMode::Maxout { "Max" } else { "Ave" };
                write!(f, "SN{cross_f_k}{cross_m_k}{m}{blocks}")
            }
            Variant::HemisLike => f.write_str("HeMIS-like"),
            Variant::Classic => f.write_str("Classic"),
        }
    }
}

/// A network as backend (up to and including the merge) followed by a
/// modality-independent frontend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawArch", into = "RawArch")]
pub struct ArchSpec {
    pub name: String,
    pub n_modalities: usize,
    pub n_classes: usize,
    pub f_width: usize,
    pub backend: Vec<LayerSpec>,
    pub frontend: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArch {
    name: String,
    n_modalities: usize,
    n_classes: usize,
    f_width: usize,
    layers: Vec<LayerSpec>,
}

impl TryFrom<RawArch> for ArchSpec {
    type Error = Error;

    fn try_from(raw: RawArch) -> Result<Self> {
        let mut layers = raw.layers;
        let standard = build_frontend(raw.n_classes, raw.f_width);
        let split = if layers.len() > standard.len() && layers.ends_with(&standard) {
            layers.len() - standard.len()
        } else {
            layers
                .iter()
                .position(|l| matches!(l.kind, LayerKind::Merge(_)))
                .map(|i| i + 1)
                .ok_or_else(|| Error::invalid("architecture has no merge layer"))?
        };
        let frontend = layers.split_off(split);
        let spec = ArchSpec {
            name: raw.name,
            n_modalities: raw.n_modalities,
            n_classes: raw.n_classes,
            f_width: raw.f_width,
            backend: layers,
            frontend,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl From<ArchSpec> for RawArch {
    fn from(a: ArchSpec) -> Self {
        let mut layers = a.backend;
        layers.extend(a.frontend);
        RawArch {
            name: a.name,
            n_modalities: a.n_modalities,
            n_classes: a.n_classes,
            f_width: a.f_width,
            layers,
        }
    }
}

impl ArchSpec {
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.backend.iter().chain(&self.frontend)
    }

    pub fn merge_mode(&self) -> Option<MergeMode> {
        self.backend.iter().find_map(|l| match l.kind {
            LayerKind::Merge(m) => Some(m),
            _ => None,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("arch serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Checks channel flow, merge placement and the output contract.
    pub fn validate(&self) -> Result<()> {
        if self.n_modalities == 0 || self.n_classes < 2 || self.f_width == 0 {
            return Err(Error::invalid(format!(
                "need n_modalities >= 1, n_classes >= 2, f_width >= 1 (got {}, {}, {})",
                self.n_modalities, self.n_classes, self.f_width
            )));
        }
        let merges = self
            .backend
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Merge(_)))
            .count();
        if merges != 1 {
            return Err(Error::invalid(format!(
                "backend must contain exactly one merge, found {merges}"
            )));
        }
        if let Some(l) = self.frontend.iter().find(|l| modality_dependent(l)) {
            return Err(Error::invalid(format!(
                "frontend contains modality-dependent layer `{}`",
                l.kind.tag()
            )));
        }
        let mut state = Channels::Branched {
            n: self.n_modalities,
            p: 1,
        };
        for (i, l) in self.backend.iter().enumerate() {
            state = step_channels(l, state, &format!("backend.{i}"))?;
        }
        for (i, l) in self.frontend.iter().enumerate() {
            state = step_channels(l, state, &format!("frontend.{i}"))?;
        }
        match self.frontend.last() {
            Some(LayerSpec {
                kind: LayerKind::Softmax,
                ..
            }) if state == Channels::Merged(self.n_classes) => Ok(()),
            _ => Err(Error::invalid(format!(
                "network must end in a softmax over {} classes",
                self.n_classes
            ))),
        }
    }
}

fn modality_dependent(l: &LayerSpec) -> bool {
    match &l.kind {
        LayerKind::CrossF | LayerKind::CrossM | LayerKind::Merge(_) => true,
        LayerKind::Residual(inner) => inner.iter().any(modality_dependent),
        _ => false,
    }
}

/// `[norm, act]`, the pre-activation that precedes every convolution fed by
/// the residual stream.
fn pre(channels: usize) -> [LayerSpec; 2] {
    [LayerSpec::norm(channels), LayerSpec::activation(channels)]
}

/// `residual[norm, act, conv, norm, act, conv]`.
fn conv_block(make: impl Fn() -> LayerSpec, channels: usize) -> LayerSpec {
    let mut inner = Vec::with_capacity(6);
    for _ in 0..2 {
        inner.extend(pre(channels));
        inner.push(make());
    }
    LayerSpec::residual(channels, inner)
}

/// Dilated residual stages shared by every variant, ending in the classifier.
///
/// Three blocks at dilation 2 with `2 * f_width` channels, three at dilation 4
/// with `4 * f_width`, each stage entered through a 1x1x1 projection.
pub fn build_frontend(n_classes: usize, f_width: usize) -> Vec<LayerSpec> {
    let mut layers = vec![LayerSpec::conv(1, 1, 2 * f_width)];
    for _ in 0..STAGE_BLOCKS {
        layers.push(conv_block(|| LayerSpec::conv(3, 2, 2 * f_width), 2 * f_width));
    }
    layers.extend(pre(2 * f_width));
    layers.push(LayerSpec::conv(1, 1, 4 * f_width));
    for _ in 0..STAGE_BLOCKS {
        layers.push(conv_block(|| LayerSpec::conv(3, 4, 4 * f_width), 4 * f_width));
    }
    layers.extend(pre(4 * f_width));
    layers.push(LayerSpec::conv(1, 1, n_classes));
    layers.push(LayerSpec::softmax(n_classes));
    layers
}

/// Builds one of the named model variants.
pub fn build_variant(name: &str, n_modalities: usize, n_classes: usize, f_width: usize) -> Result<ArchSpec> {
    let variant: Variant = name.parse()?;
    if n_modalities == 0 || f_width == 0 {
        return Err(Error::invalid("n_modalities and f_width must be at least 1"));
    }
    let n = n_modalities;
    let f = f_width;
    let mut backend = Vec::new();
    match variant {
        Variant::ScaleNet {
            cross_f_k,
            cross_m_k,
            merge,
            blocks,
        } => {
            backend.push(LayerSpec::cross_f(cross_f_k, 1, f));
            for i in 0..STAGE_BLOCKS {
                backend.push(conv_block(|| LayerSpec::cross_f(cross_f_k, 1, f), f));
                if i >= STAGE_BLOCKS - blocks {
                    backend.push(LayerSpec::residual(f, vec![LayerSpec::cross_m(cross_m_k, 1, n)]));
                }
            }
            backend.extend(pre(f));
            backend.push(LayerSpec::merge(merge, f));
        }
        Variant::HemisLike => {
            backend.push(LayerSpec::cross_f(3, 1, f));
            for _ in 0..STAGE_BLOCKS {
                backend.push(conv_block(|| LayerSpec::cross_f(3, 1, f), f));
            }
            backend.extend(pre(f));
            backend.push(LayerSpec::merge(MergeMode::Average, f));
        }
        Variant::Classic => {
            let width = n * f;
            backend.push(LayerSpec::merge(MergeMode::Concat, n));
            backend.push(LayerSpec::conv(3, 1, width));
            for _ in 0..STAGE_BLOCKS {
                backend.push(conv_block(|| LayerSpec::conv(3, 1, width), width));
            }
            backend.extend(pre(width));
            backend.push(LayerSpec::conv(1, 1, f));
        }
    }
    let spec = ArchSpec {
        name: variant.to_string(),
        n_modalities,
        n_classes,
        f_width,
        backend,
        frontend: build_frontend(n_classes, f_width),
    };
    spec.validate()?;
    Ok(spec)
}

/// Names of the seven variants compared in the experiments.
pub const VARIANTS: [&str; 7] = [
    "SN31Ave1",
    "SN31Ave2",
    "SN31Ave3",
    "SN33Ave2",
    "SN31Max2",
    "HeMIS-like",
    "Classic",
];

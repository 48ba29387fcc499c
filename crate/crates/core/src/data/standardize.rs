//! Histogram-based intensity standardisation.
//!
//! Landmarks are nearest-rank percentiles over the nonzero (brain) voxels of
//! one modality channel. Fitting maps each training image's `[p1, p99]` onto
//! [`STANDARD_RANGE`] and averages the mapped landmarks; applying sends an
//! image's own landmarks onto that average with a piecewise-linear map.
//! Background voxels stay zero throughout.

use super::Sample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PERCENTILES: [f64; 11] = [1.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 99.0];
pub const STANDARD_RANGE: (f64, f64) = (0.0, 100.0);
pub const CLAMP: (f64, f64) = (-20.0, 120.0);

const N: usize = PERCENTILES.len();

/// Landmark intensities of the nonzero entries of `channel`, using the value
/// at sorted index `round(q / 100 * (len - 1))` for each percentile `q`.
pub fn landmarks(channel: &[f64]) -> Result<[f64; N]> {
    let mut v: Vec<f64> = channel.iter().copied().filter(|&x| x != 0.0).collect();
    if v.is_empty() {
        return Err(Error::invalid("no nonzero voxels to take landmarks from"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite intensity"));
    }
    v.sort_by(f64::total_cmp);
    let last = (v.len() - 1) as f64;
    Ok(PERCENTILES.map(|q| v[(q / 100.0 * last).round() as usize]))
}

/// Averaged standard landmarks of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardScale {
    landmarks: [f64; N],
}

impl StandardScale {
    pub fn new(landmarks: [f64; N]) -> Result<Self> {
        if landmarks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(format!(
                "standard landmarks not strictly increasing: {landmarks:?}"
            )));
        }
        Ok(StandardScale { landmarks })
    }

    pub fn landmarks(&self) -> &[f64; N] {
        &self.landmarks
    }

    /// Fits on channels of the same modality.
    pub fn fit(channels: &[&[f64]]) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("need at least one training image"));
        }
        let (lo, hi) = STANDARD_RANGE;
        let mut acc = [0.0; N];
        for (i, c) in channels.iter().enumerate() {
            let l = landmarks(c)?;
            let (p1, p99) = (l[0], l[N - 1]);
            if p1 == p99 {
                return Err(Error::invalid(format!("training image {i} has constant intensity")));
            }
            for (a, x) in acc.iter_mut().zip(l) {
                *a += lo + (x - p1) / (p99 - p1) * (hi - lo);
            }
        }
        Self::new(acc.map(|a| a / channels.len() as f64))
    }

    /// The piecewise-linear map taking `channel`'s landmarks onto this scale.
    pub fn map_for(&self, channel: &[f64]) -> Result<PiecewiseLinear> {
        let own = landmarks(channel)?;
        let mut knots: Vec<(f64, f64)> = Vec::with_capacity(N);
        for (x, y) in own.into_iter().zip(self.landmarks) {
            // repeated image landmarks keep their first standard value
            if knots.last().is_none_or(|&(px, _)| x > px) {
                knots.push((x, y));
            }
        }
        Ok(PiecewiseLinear { knots })
    }
}

/// Monotone piecewise-linear map, extrapolated from the end segments and
/// clamped to [`CLAMP`].
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    /// Strictly increasing in both coordinates.
    knots: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn eval(&self, x: f64) -> f64 {
        let k = &self.knots;
        if k.len() == 1 {
            return k[0].1.clamp(CLAMP.0, CLAMP.1);
        }
        let i = k.partition_point(|&(kx, _)| kx <= x).saturating_sub(1).min(k.len() - 2);
        let ((x0, y0), (x1, y1)) = (k[i], k[i + 1]);
        (y0 + (x - x0) * (y1 - y0) / (x1 - x0)).clamp(CLAMP.0, CLAMP.1)
    }
}

/// Standardises the nonzero voxels of `channel`; zeros stay zero.
pub fn apply_standardisation(channel: &[f64], scale: &StandardScale) -> Result<Vec<f64>> {
    let map = scale.map_for(channel)?;
    Ok(channel
        .iter()
        .map(|&x| if x == 0.0 { 0.0 } else { map.eval(x) })
        .collect())
}

/// Fits the scale of modality `modality` over `samples`.
pub fn fit_standard_scale(samples: &[Sample], modality: usize) -> Result<StandardScale> {
    if let Some(s) = samples.iter().find(|s| s.modalities() <= modality) {
        return Err(Error::invalid(format!(
            "modality {modality} requested from a sample with {} modalities",
            s.modalities()
        )));
    }
    let channels: Vec<&[f64]> = samples.iter().map(|s| s.channel(modality)).collect();
    StandardScale::fit(&channels)
}

/// One scale per modality, applied as network preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    scales: Vec<StandardScale>,
}

impl Standardizer {
    pub fn new(scales: Vec<StandardScale>) -> Self {
        Standardizer { scales }
    }

    pub fn fit(samples: &[Sample]) -> Result<Self> {
        let n = samples
            .first()
            .ok_or_else(|| Error::invalid("need at least one training sample"))?
            .modalities();
        Ok(Standardizer {
            scales: (0..n).map(|m| fit_standard_scale(samples, m)).collect::<Result<_>>()?,
        })
    }

    pub fn scales(&self) -> &[StandardScale] {
        &self.scales
    }

    /// Standardised copy of `sample`, divided by the width of
    /// [`STANDARD_RANGE`] so brain intensities land near `[0, 1]`.
    pub fn transform(&self, sample: &Sample) -> Result<Sample> {
        if sample.modalities() != self.scales.len() {
            return Err(Error::invalid(format!(
                "standardizer fitted for {} modalities, sample has {}",
                self.scales.len(),
                sample.modalities()
            )));
        }
        let width = STANDARD_RANGE.1 - STANDARD_RANGE.0;
        let mut data = Vec::with_capacity(sample.image().numel());
        for (m, scale) in self.scales.iter().enumerate() {
            data.extend(
                apply_standardisation(sample.channel(m), scale)?
                    .into_iter()
                    .map(|x| x / width),
            );
        }
        Sample::new(Tensor::new(sample.image().shape(), data)?, sample.labels().to_vec())
    }

    /// Landmarks as an `(n, 11)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.scales.iter().flat_map(|s| s.landmarks).collect();
        Tensor::new([self.scales.len(), N], data).expect("n rows of landmarks")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 || t.shape()[1] != N {
            return Err(Error::invalid(format!(
                "landmark table must be (n, {N}), got {:?}",
                t.shape()
            )));
        }
        let scales = t
            .data()
            .chunks(N)
            .map(|row| StandardScale::new(row.try_into().expect("row of N")))
            .collect::<Result<_>>()?;
        Ok(Standardizer { scales })
    }
}

//! Synthetic volumes, intensity standardisation and the volume file format.

mod phantom;
mod standardize;
mod volume;

pub use phantom::{contrast, generate_phantom, CONTRAST, MIN_SIZE, NOISE_SIGMA};
pub use standardize::{
    apply_standardisation, fit_standard_scale, landmarks, PiecewiseLinear, StandardScale, Standardizer, CLAMP,
    PERCENTILES, STANDARD_RANGE,
};
pub use volume::{decode_volume, encode_volume, read_volume, write_volume};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Label values.
pub mod label {
    pub const BACKGROUND: u8 = 0;
    pub const HEALTHY: u8 = 1;
    pub const NECROTIC: u8 = 2;
    pub const EDEMA: u8 = 3;
    pub const NON_ENHANCING: u8 = 4;
    pub const ENHANCING: u8 = 5;
    pub const COUNT: usize = 6;
}

/// A multimodal volume with its voxel labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    image: Tensor,
    labels: Vec<u8>,
}

impl Sample {
    /// `image` is `(n_modalities, D, H, W)`; `labels` holds `D * H * W` values
    /// in `0..label::COUNT`.
    pub fn new(image: Tensor, labels: Vec<u8>) -> Result<Self> {
        if image.rank() != 4 || image.shape()[0] == 0 {
            return Err(Error::invalid(format!(
                "sample image must be (n, D, H, W), got {:?}",
                image.shape()
            )));
        }
        let v: usize = image.shape()[1..].iter().product();
        if labels.len() != v {
            return Err(Error::invalid(format!("{} labels for {v} voxels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= label::COUNT) {
            return Err(Error::invalid(format!("label {bad} out of range")));
        }
        Ok(Sample { image, labels })
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn into_parts(self) -> (Tensor, Vec<u8>) {
        (self.image, self.labels)
    }

    pub fn modalities(&self) -> usize {
        self.image.shape()[0]
    }

    /// `[D, H, W]`.
    pub fn spatial(&self) -> [usize; 3] {
        let s = self.image.shape();
        [s[1], s[2], s[3]]
    }

    pub fn voxels(&self) -> usize {
        self.labels.len()
    }

    /// Intensities of modality `m`.
    pub fn channel(&self, m: usize) -> &[f64] {
        let v = self.voxels();
        &self.image.data()[m * v..(m + 1) * v]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_checks() {
        assert!(Sample::new(Tensor::zeros([2, 2, 2, 2]), vec![0; 8]).is_ok());
        assert!(Sample::new(Tensor::zeros([2, 2, 2, 2]), vec![0; 7]).is_err());
        assert!(Sample::new(Tensor::zeros([2, 2, 2, 2]), vec![6; 8]).is_err());
        assert!(Sample::new(Tensor::zeros([2, 2, 2]), vec![0; 4]).is_err());
    }
}

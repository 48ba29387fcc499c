//! Procedural multimodal brain-tumour phantoms.
//!
//! A brain ellipsoid of healthy tissue sits on a zero background. Inside it,
//! nested ellipsoids carve out edema, then non-enhancing tumour, enhancing
//! tumour and a necrotic core. A voxel takes the label of the innermost
//! ellipsoid containing it, and membership of an inner ellipsoid requires
//! membership of every outer one, so the nesting holds by construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{label, Sample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Noise standard deviation as a fraction of the intensity range `[0, 1]`.
pub const NOISE_SIGMA: f64 = 0.05;

/// Mean intensity per (modality, class). Columns follow the label values
/// background, healthy, necrotic, edema, non-enhancing, enhancing.
///
/// Row 0 makes enhancing tumour bright but leaves necrotic and non-enhancing
/// iso-intense; row 1 singles out the necrotic core; row 2 the edema; row 3
/// the non-enhancing tumour. Every tumour class sits at least `2 * NOISE_SIGMA`
/// from healthy tissue in every row. Modalities beyond four reuse the rows
/// cyclically.
pub const CONTRAST: [[f64; 6]; 4] = [
    [0.0, 0.40, 0.25, 0.52, 0.25, 0.90],
    [0.0, 0.55, 0.10, 0.40, 0.40, 0.68],
    [0.0, 0.35, 0.60, 0.90, 0.60, 0.60],
    [0.0, 0.30, 0.65, 0.60, 0.95, 0.55],
];

pub const MIN_SIZE: usize = 16;
const MAX_ATTEMPTS: usize = 100;

pub fn contrast(modality: usize, class: u8) -> f64 {
    CONTRAST[modality % CONTRAST.len()][class as usize]
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.centre[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// A smaller ellipsoid with radii scaled by a draw from `scale`, shifted
    /// by at most `slack` of the room left inside `self`.
    fn nested(&self, rng: &mut impl Rng, scale: (f64, f64), slack: f64) -> Ellipsoid {
        let mut radii = [0.0; 3];
        let mut centre = [0.0; 3];
        for a in 0..3 {
            radii[a] = self.radii[a] * rng.random_range(scale.0..scale.1);
            let room = self.radii[a] - radii[a];
            centre[a] = self.centre[a] + rng.random_range(-slack..=slack) * room;
        }
        Ellipsoid { centre, radii }
    }
}

fn voxels(size: [usize; 3]) -> impl Iterator<Item = [f64; 3]> {
    let [d, h, w] = size;
    (0..d).flat_map(move |z| (0..h).flat_map(move |y| (0..w).map(move |x| [z as f64, y as f64, x as f64])))
}

/// Generates one phantom; a pure function of its arguments.
pub fn generate_phantom(size: [usize; 3], n_modalities: usize, seed: u64) -> Result<Sample> {
    if size.iter().any(|&s| s < MIN_SIZE) {
        return Err(Error::invalid(format!(
            "phantom size must be at least {MIN_SIZE}^3, got {size:?}"
        )));
    }
    if n_modalities == 0 {
        return Err(Error::invalid("need at least one modality"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let small = *size.iter().min().expect("three axes") as f64;
    let mid = size.map(|s| (s as f64 - 1.0) / 2.0);
    let brain = Ellipsoid {
        centre: mid,
        radii: size.map(|s| s as f64 * 0.42 * rng.random_range(0.95..1.0)),
    };

    let mut edema = None;
    for _ in 0..MAX_ATTEMPTS {
        let mut radii = [0.0; 3];
        let mut centre = [0.0; 3];
        for a in 0..3 {
            radii[a] = small * rng.random_range(0.24..0.30);
            centre[a] = mid[a] + rng.random_range(-0.5..=0.5) * (brain.radii[a] - radii[a]);
        }
        let candidate = Ellipsoid { centre, radii };
        if voxels(size).all(|p| !candidate.contains(p) || brain.contains(p)) {
            edema = Some(candidate);
            break;
        }
    }
    let edema = edema.ok_or_else(|| {
        Error::invalid(format!(
            "tumour did not fit inside the brain after {MAX_ATTEMPTS} attempts"
        ))
    })?;
    let non_enhancing = edema.nested(&mut rng, (0.80, 0.88), 0.3);
    let enhancing = non_enhancing.nested(&mut rng, (0.78, 0.86), 0.3);
    let necrotic = enhancing.nested(&mut rng, (0.62, 0.72), 0.3);

    let labels: Vec<u8> = voxels(size)
        .map(|p| {
            if !brain.contains(p) {
                label::BACKGROUND
            } else if !edema.contains(p) {
                label::HEALTHY
            } else if !non_enhancing.contains(p) {
                label::EDEMA
            } else if !enhancing.contains(p) {
                label::NON_ENHANCING
            } else if !necrotic.contains(p) {
                label::ENHANCING
            } else {
                label::NECROTIC
            }
        })
        .collect();

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
    let v = labels.len();
    let mut image = vec![0.0; n_modalities * v];
    for m in 0..n_modalities {
        for (i, &l) in labels.iter().enumerate() {
            if l != label::BACKGROUND {
                image[m * v + i] = contrast(m, l) + noise.sample(&mut rng);
            }
        }
    }
    Sample::new(Tensor::new([n_modalities, size[0], size[1], size[2]], image)?, labels)
}

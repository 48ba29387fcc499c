//! Random small rotations about the volume centre.

use rand::Rng;

use crate::data::Sample;
use crate::error::Result;
use crate::numerics::Tensor;

/// Angles are drawn uniformly from `[-MAX_ANGLE_DEG, MAX_ANGLE_DEG]`.
pub const MAX_ANGLE_DEG: f64 = 10.0;

type Mat = [[f64; 3]; 3];

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// `R = Rz · Ry · Rx` acting on `(x, y, z)` column vectors: x is applied first.
fn rotation(deg: [f64; 3]) -> Mat {
    let [ax, ay, az] = deg.map(f64::to_radians);
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

/// Rotates `sample` by `deg = [θx, θy, θz]` degrees. Output voxel `q` reads
/// the input at `Rᵀ (q - c) + c`: trilinear for images, nearest for labels.
/// Reads outside the volume give 0.
pub fn rotate_sample(sample: &Sample, deg: [f64; 3]) -> Result<Sample> {
    let [d, h, w] = sample.spatial();
    let n = sample.modalities();
    let v = sample.voxels();
    let r = rotation(deg);
    let c = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (d as f64 - 1.0) / 2.0];
    let src_img = sample.image().data();
    let src_lab = sample.labels();
    let mut img = vec![0.0; n * v];
    let mut lab = vec![0u8; v];
    let dims = [w, h, d];
    let at = |x: usize, y: usize, z: usize| (z * h + y) * w + x;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let q = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let mut p = [0.0; 3];
                for a in 0..3 {
                    // transpose: p_a = Σ_b R[b][a] q_b
                    p[a] = r[0][a] * q[0] + r[1][a] * q[1] + r[2][a] * q[2] + c[a];
                }
                let out = at(x, y, z);

                let near = p.map(|t| t.round());
                if (0..3).all(|a| near[a] >= 0.0 && near[a] <= (dims[a] - 1) as f64) {
                    lab[out] = src_lab[at(near[0] as usize, near[1] as usize, near[2] as usize)];
                }

                let base = p.map(f64::floor);
                let frac = [p[0] - base[0], p[1] - base[1], p[2] - base[2]];
                for corner in 0..8 {
                    let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                    let mut wgt = 1.0;
                    let mut idx = [0usize; 3];
                    let mut inside = true;
                    for a in 0..3 {
                        let t = base[a] + off[a] as f64;
                        wgt *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                        if t < 0.0 || t > (dims[a] - 1) as f64 {
                            inside = false;
                        } else {
                            idx[a] = t as usize;
                        }
                    }
                    if !inside || wgt == 0.0 {
                        continue;
                    }
                    let src = at(idx[0], idx[1], idx[2]);
                    for m in 0..n {
                        img[m * v + out] += wgt * src_img[m * v + src];
                    }
                }
            }
        }
    }
    Sample::new(Tensor::new(sample.image().shape(), img)?, lab)
}

/// Draws `(θx, θy, θz)` and rotates.
pub fn augment_rotate(sample: &Sample, rng: &mut impl Rng) -> Result<Sample> {
    let deg = [(); 3].map(|_| rng.random_range(-MAX_ANGLE_DEG..=MAX_ANGLE_DEG));
    rotate_sample(sample, deg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_phantom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_angles_are_identity() {
        let s = generate_phantom([16, 17, 18], 2, 3).unwrap();
        assert_eq!(rotate_sample(&s, [0.0; 3]).unwrap(), s);
    }

    #[test]
    fn constant_channel_stays_constant_inside() {
        let s = Sample::new(Tensor::full([1, 16, 16, 16], 0.7), vec![1; 4096]).unwrap();
        let r = rotate_sample(&s, [9.0, -7.0, 5.0]).unwrap();
        for z in 4..12 {
            for y in 4..12 {
                for x in 4..12 {
                    assert!((r.image().get(&[0, z, y, x]) - 0.7).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn no_new_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..4 {
            let s = generate_phantom([16, 16, 16], 1, seed).unwrap();
            let r = augment_rotate(&s, &mut rng).unwrap();
            assert!(r.labels().iter().all(|l| s.labels().contains(l)));
        }
    }

    #[test]
    fn quarter_turn_about_z_permutes_axes() {
        // 90 degrees maps (x, y) -> (-y, x) about the centre
        let mut img = Tensor::zeros([1, 3, 3, 3]);
        img.set(&[0, 1, 1, 2], 1.0); // x = 2, y = 1
        let s = Sample::new(img, vec![0; 27]).unwrap();
        let r = rotate_sample(&s, [0.0, 0.0, 90.0]).unwrap();
        // rotated point: x' = c - (y - c) = 1, y' = c + (x - c) = 2
        assert!((r.image().get(&[0, 1, 2, 1]) - 1.0).abs() < 1e-12);
        assert!((r.image().sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation([7.0, -3.0, 9.5]);
        let rt = [0, 1, 2].map(|i| [0, 1, 2].map(|j| r[j][i]));
        let id = matmul(&r, &rt);
        for i in 0..3 {
            for j in 0..3 {
                assert!((id[i][j] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }
}

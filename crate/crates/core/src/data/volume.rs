//! `SNVL` volume files: magic, u32 version, u32 modality count, u32 `D, H, W`,
//! then `n * D * H * W` little-endian f64 intensities (modality-major) and
//! `D * H * W` u8 labels.

use std::path::Path;

use super::Sample;
use crate::binio::{put_f64s, put_u32, to_u32, Reader};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"SNVL";
const VERSION: u32 = 1;

pub fn encode_volume(sample: &Sample) -> Result<Vec<u8>> {
    let [d, h, w] = sample.spatial();
    let mut out = Vec::with_capacity(24 + sample.image().numel() * 8 + sample.voxels());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for (v, field) in [(sample.modalities(), "modality count"), (d, "D"), (h, "H"), (w, "W")] {
        put_u32(&mut out, to_u32(v, field)?);
    }
    put_f64s(&mut out, sample.image().data());
    out.extend_from_slice(sample.labels());
    Ok(out)
}

pub fn decode_volume(bytes: &[u8]) -> Result<Sample> {
    let mut r = Reader::new("volume", bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let header = r.offset();
    let n = r.u32("modality count")? as usize;
    let dims = [r.u32("D")? as usize, r.u32("H")? as usize, r.u32("W")? as usize];
    let v = dims.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
    let total = v.and_then(|v| v.checked_mul(n));
    let (Some(v), Some(total)) = (v, total) else {
        return Err(r.error_at(header, "dimensions overflow"));
    };
    if n == 0 || v == 0 {
        return Err(r.error_at(header, format!("empty volume: n={n}, dims={dims:?}")));
    }
    let expected = total as u128 * 8 + v as u128;
    let left = (bytes.len() as u64 - r.offset()) as u128;
    if expected != left {
        return Err(r.error_at(
            r.offset(),
            format!("header promises {expected} payload bytes, file has {left}"),
        ));
    }
    let image = r.f64s(total, "image")?;
    let at = r.offset();
    let labels = r.take(v, "labels")?.to_vec();
    r.finish()?;
    let image = Tensor::new([n, dims[0], dims[1], dims[2]], image)?;
    Sample::new(image, labels).map_err(|e| r.error_at(at, e.to_string()))
}

pub fn write_volume(sample: &Sample, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_volume(sample)?).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Sample> {
    let path = path.as_ref();
    decode_volume(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

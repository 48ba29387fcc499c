//! `SNCK` checkpoint files.
//!
//! Layout: magic, u32 version, u64 length-prefixed JSON architecture, u32
//! tensor count, then per tensor a u16 name length, the name, a u8 rank, u32
//! dims and little-endian f64 values. Adam moments are stored as
//! `<name>.m` / `<name>.v`; the step, best validation score and optional
//! standardisation landmarks as `meta.step`, `meta.best_val` and
//! `meta.landmarks`. Tensors are written in name order.

use std::collections::BTreeMap;
use std::path::Path;

use super::adam::AdamState;
use crate::arch::{ArchSpec, Network};
use crate::binio::{put_f64s, put_u16, put_u32, put_u64, to_u32, Reader};
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"SNCK";
const VERSION: u32 = 1;
const META_STEP: &str = "meta.step";
const META_BEST: &str = "meta.best_val";
const META_LANDMARKS: &str = "meta.landmarks";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchSpec,
    pub step: u64,
    pub params: BTreeMap<String, Tensor>,
    pub adam: AdamState,
    pub best_val: f64,
    /// Intensity preprocessing the weights were trained with.
    pub standardizer: Option<Standardizer>,
}

impl Checkpoint {
    /// A fresh network with zero moments, as before the first step.
    pub fn initial(network: Network) -> Self {
        let (arch, params) = network.into_parts();
        let adam = AdamState::zeros_like(&params);
        Checkpoint {
            arch,
            step: 0,
            params,
            adam,
            best_val: f64::NEG_INFINITY,
            standardizer: None,
        }
    }

    pub fn network(&self) -> Result<Network> {
        Network::from_parts(self.arch.clone(), self.params.clone())
    }

    fn tensors(&self) -> Result<BTreeMap<String, &Tensor>> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.params {
            let m = self.adam.m.get(name);
            let v = self.adam.v.get(name);
            let (Some(m), Some(v)) = (m, v) else {
                return Err(Error::invalid(format!("parameter `{name}` lacks Adam moments")));
            };
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::invalid(format!("moments of `{name}` do not match its shape")));
            }
            out.insert(name.clone(), p);
            out.insert(format!("{name}.m"), m);
            out.insert(format!("{name}.v"), v);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let step = Tensor::scalar(self.step as f64);
        let best = Tensor::scalar(self.best_val);
        let landmarks = self.standardizer.as_ref().map(Standardizer::to_tensor);
        let mut all = self.tensors()?;
        all.insert(META_STEP.into(), &step);
        all.insert(META_BEST.into(), &best);
        if let Some(l) = &landmarks {
            all.insert(META_LANDMARKS.into(), l);
        }

        let json = self.arch.to_json();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, json.len() as u64);
        out.extend_from_slice(json.as_bytes());
        put_u32(&mut out, to_u32(all.len(), "tensor count")?);
        for (name, t) in all {
            let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {name}")))?;
            put_u16(&mut out, len);
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::invalid(format!("rank of `{name}` too large")))?;
            out.push(rank);
            for &d in t.shape() {
                put_u32(&mut out, to_u32(d, "dimension")?);
            }
            put_f64s(&mut out, t.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let at = r.offset();
        let len = r.u64("architecture length")?;
        let len = usize::try_from(len).map_err(|_| r.error_at(at, "architecture length overflows"))?;
        let json_at = r.offset();
        let json = std::str::from_utf8(r.take(len, "architecture")?)
            .map_err(|e| r.error_at(json_at, format!("architecture is not UTF-8: {e}")))?;
        let arch = ArchSpec::from_json(json).map_err(|e| r.error_at(json_at, e.to_string()))?;

        let count = r.u32("tensor count")?;
        let mut tensors: BTreeMap<String, (u64, Tensor)> = BTreeMap::new();
        for _ in 0..count {
            let at = r.offset();
            let n = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "name")?)
                .map_err(|e| r.error_at(at, format!("tensor name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error_at(at, format!("shape of `{name}` overflows")))?;
            let data = r.f64s(numel, "tensor data")?;
            let t = Tensor::new(shape, data).expect("numel matches");
            if tensors.insert(name.clone(), (at, t)).is_some() {
                return Err(r.error_at(at, format!("duplicate tensor `{name}`")));
            }
        }
        r.finish()?;

        let mut take = |name: &str| tensors.remove(name);
        let meta = |name: &str, t: Option<(u64, Tensor)>| -> Result<f64> {
            let (at, t) = t.ok_or_else(|| r.error_at(r.offset(), format!("missing `{name}`")))?;
            t.item()
                .filter(|_| t.rank() == 0)
                .ok_or_else(|| r.error_at(at, format!("`{name}` must be a scalar")))
        };
        let step_val = meta(META_STEP, take(META_STEP))?;
        let best_val = meta(META_BEST, take(META_BEST))?;
        if step_val < 0.0 || step_val.fract() != 0.0 || step_val > 2f64.powi(53) {
            return Err(r.error_at(0, format!("invalid step {step_val}")));
        }
        let standardizer = match take(META_LANDMARKS) {
            Some((at, t)) => Some(Standardizer::from_tensor(&t).map_err(|e| r.error_at(at, e.to_string()))?),
            None => None,
        };

        let mut params = BTreeMap::new();
        let mut adam = AdamState {
            t: step_val as u64,
            ..Default::default()
        };
        let names: Vec<String> = tensors
            .keys()
            .filter(|k| !k.ends_with(".m") && !k.ends_with(".v"))
            .cloned()
            .collect();
        for name in names {
            let (at, p) = tensors.remove(&name).expect("listed");
            for (suffix, store) in [(".m", &mut adam.m), (".v", &mut adam.v)] {
                let key = format!("{name}{suffix}");
                let (mat, t) = tensors
                    .remove(&key)
                    .ok_or_else(|| r.error_at(at, format!("parameter `{name}` has no `{key}`")))?;
                if t.shape() != p.shape() {
                    return Err(r.error_at(
                        mat,
                        format!("`{key}` has shape {:?}, parameter has {:?}", t.shape(), p.shape()),
                    ));
                }
                store.insert(name.clone(), t);
            }
            params.insert(name, p);
        }
        if let Some((name, (at, _))) = tensors.into_iter().next() {
            return Err(r.error_at(at, format!("moment `{name}` has no parameter")));
        }
        Network::from_parts(arch.clone(), params.clone()).map_err(|e| r.error_at(json_at, e.to_string()))?;
        Ok(Checkpoint {
            arch,
            step: step_val as u64,
            params,
            adam,
            best_val,
            standardizer,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    Checkpoint::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

//! SMCK checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SMCK"          4 bytes magic
//! version         u16 (= 1)
//! spec block      u32 length + UTF-8 `key=value` lines (ModelSpec)
//! meta block      u32 length + UTF-8 `key=value` lines (free-form)
//! entry count     u32
//! per entry:      u8 kind (0 = parameter, 1 = buffer)
//!                 u16 name length + UTF-8 name
//!                 u8 rank + rank x u32 extents
//!                 f32 payload, row-major
//! ```
//!
//! A batch-norm buffer `enc0.bn1` is stored as two entries,
//! `enc0.bn1.running_mean` and `enc0.bn1.running_var`.

use std::path::Path;

use indexmap::IndexMap;

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::io::{parse_kv, to_u32, Reader, Writer};
use crate::tensor::{BatchNormStats, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub meta: IndexMap<String, String>,
    pub params: IndexMap<String, Tensor<f32>>,
    pub buffers: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.long_str(&self.spec.to_kv())?;
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("meta entry {k:?} cannot be encoded")));
            }
            meta.push_str(&format!("{k}={v}\n"));
        }
        w.long_str(&meta)?;
        w.u32(to_u32(self.params.len() + self.buffers.len(), "entry count")?);
        for (kind, map) in [(0u8, &self.params), (1u8, &self.buffers)] {
            for (name, t) in map {
                w.u8(kind);
                w.short_str(name)?;
                w.u8(t.shape().len() as u8);
                for &d in t.shape() {
                    w.u32(to_u32(d, "extent")?);
                }
                w.f32s(t.data());
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let spec = ModelSpec::from_kv(&r.long_str("spec block")?)?;
        let meta = parse_kv(&r.long_str("meta block")?)?.into_iter().collect();
        let count = r.u32("entry count")?;
        let mut params = IndexMap::new();
        let mut buffers = IndexMap::new();
        for _ in 0..count {
            let at = r.offset() as u64;
            let kind = r.u8("entry kind")?;
            let name = r.short_str("entry name")?;
            let rank = r.u8("rank")? as usize;
            if !(1..=4).contains(&rank) {
                return Err(Error::Integrity {
                    offset: at,
                    detail: format!("entry {name:?} has rank {rank}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                Error::Integrity {
                    offset: at,
                    detail: format!("entry {name:?} is too large"),
                }
            })?;
            let t = Tensor::new(&shape, r.f32s(numel, "tensor payload")?)?;
            let map = match kind {
                0 => &mut params,
                1 => &mut buffers,
                k => {
                    return Err(Error::Integrity {
                        offset: at,
                        detail: format!("unknown entry kind {k}"),
                    })
                }
            };
            if map.insert(name.clone(), t).is_some() {
                return Err(Error::Integrity {
                    offset: at,
                    detail: format!("duplicate entry {name:?}"),
                });
            }
        }
        if r.remaining() != 0 {
            return Err(Error::Integrity {
                offset: r.offset() as u64,
                detail: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Self { spec, meta, params, buffers })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl<T: Scalar> Model<T> {
    /// Snapshot of the current parameters and statistics, stored as f32.
    pub fn to_checkpoint(&self, meta: IndexMap<String, String>) -> Checkpoint {
        let params = self.params().iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        let mut buffers = IndexMap::new();
        for (k, s) in self.buffers() {
            let f = |v: &[T]| Tensor::from_fn(&[v.len()], |i| v[i].as_f64() as f32);
            buffers.insert(format!("{k}.running_mean"), f(&s.mean));
            buffers.insert(format!("{k}.running_var"), f(&s.var));
        }
        Checkpoint {
            spec: self.spec().clone(),
            meta,
            params,
            buffers,
        }
    }

    /// Rebuilds a model from a checkpoint. Every parameter and statistic of
    /// the spec must be present with the expected shape, and nothing else.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::<T>::build(&ck.spec, 0)?;
        let mismatch = |what: String| Error::Data(format!("checkpoint does not match its spec: {what}"));
        if ck.params.len() != model.params().len() || ck.buffers.len() != 2 * model.buffers().len() {
            return Err(mismatch(format!(
                "{} parameters and {} buffers, expected {} and {}",
                ck.params.len(),
                ck.buffers.len(),
                model.params().len(),
                2 * model.buffers().len()
            )));
        }
        for (name, p) in model.params_mut() {
            let src = ck.params.get(name).ok_or_else(|| mismatch(format!("missing {name}")))?;
            if src.shape() != p.shape() {
                return Err(mismatch(format!("{name} has shape {:?}, expected {:?}", src.shape(), p.shape())));
            }
            *p = src.cast();
        }
        for (name, s) in model.buffers_mut() {
            let fetch = |suffix: &str, len: usize| -> Result<Vec<T>> {
                let key = format!("{name}.{suffix}");
                let t = ck.buffers.get(&key).ok_or_else(|| mismatch(format!("missing {key}")))?;
                if t.shape() != [len] {
                    return Err(mismatch(format!("{key} has shape {:?}", t.shape())));
                }
                Ok(t.data().iter().map(|&v| T::of(v as f64)).collect())
            };
            let c = s.mean.len();
            *s = BatchNormStats {
                mean: fetch("running_mean", c)?,
                var: fetch("running_var", c)?,
            };
        }
        Ok(model)
    }
}

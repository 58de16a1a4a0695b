//! Binary checkpoint: magic, version, length-prefixed JSON header, then one
//! record per parameter (name, dtype tag, shape, little-endian data).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelKind, TopDownModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TDTX";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> &'static [u8; 3] {
        match self {
            Dtype::F32 => b"f32",
            Dtype::F64 => b"f64",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: ModelConfig,
}

pub fn save_checkpoint(model: &TopDownModel, path: &Path) -> Result<()> {
    save_checkpoint_as(model, path, Dtype::F64)
}

pub fn save_checkpoint_as(model: &TopDownModel, path: &Path, dtype: Dtype) -> Result<()> {
    std::fs::write(path, model.to_checkpoint_bytes(dtype)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TopDownModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TopDownModel::from_checkpoint_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} overflows usize")))
    }
}

impl TopDownModel {
    pub fn to_checkpoint_bytes(&self, dtype: Dtype) -> Vec<u8> {
        let header = serde_json::to_vec(&Header { kind: self.kind, config: self.config.clone() }).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (_, p) in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(dtype.tag());
            let shape = p.value().shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &s in shape {
                out.extend_from_slice(&(s as u64).to_le_bytes());
            }
            for &x in p.value().data() {
                match dtype {
                    Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
                    Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes (not a TDTX checkpoint)".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let header_len = r.len("header length")?;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
        let mut model = TopDownModel::build(header.config, header.kind, 0)?;
        let expected = model.shape_table();
        let count = r.len("parameter count")?;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} parameters, configuration expects {}",
                expected.len()
            )));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for (id, (want_name, want_shape)) in ids.into_iter().zip(expected) {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            if name != want_name {
                return Err(Error::Checkpoint(format!("expected parameter {want_name}, found {name}")));
            }
            let dtype = match r.take(3, "dtype tag")? {
                b"f64" => Dtype::F64,
                b"f32" => Dtype::F32,
                other => {
                    return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {:?}", String::from_utf8_lossy(other))))
                }
            };
            let ndim = r.u32("rank")? as usize;
            let shape = (0..ndim).map(|_| r.len("dimension")).collect::<Result<Vec<_>>>()?;
            if shape != want_shape {
                return Err(Error::Checkpoint(format!("{name}: shape {shape:?} does not match expected {want_shape:?}")));
            }
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                Dtype::F64 => r
                    .take(numel * 8, name)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                Dtype::F32 => r
                    .take(numel * 4, name)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            };
            model.params.get_mut(id).set_value(Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after last parameter", bytes.len() - r.pos)));
        }
        Ok(model)
    }
}

//! Self-describing checkpoint container.
//!
//! ```text
//! magic "CDCK" | version u32 | config_len u32 | config utf-8 | tensor_count u32
//! per tensor: name_len u32 | name | dtype u8 | trainable u8 | rank u32 | dims u32[rank]
//!             | byte_len u64 | raw little-endian data | crc32 u32
//! ```
//!
//! Tensors are written in name order and each checksum covers its record.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};

use crate::data::Cursor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

const MAGIC: &[u8; 4] = b"CDCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub trainable: bool,
    pub dims: Vec<usize>,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Run configuration snapshot in its text form.
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

fn dtype_code(d: DType) -> Result<u8> {
    match d {
        DType::F32 => Ok(1),
        DType::F64 => Ok(2),
        other => Err(Error::Format(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

fn dtype_from(code: u8) -> Result<DType> {
    match code {
        1 => Ok(DType::F32),
        2 => Ok(DType::F64),
        _ => Err(Error::Format(format!("unknown dtype code {code}"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Format(format!("unsupported checkpoint dtype {other:?}"))),
    })
}

impl NamedTensor {
    pub fn to_tensor(&self, device: &candle_core::Device) -> Result<Tensor> {
        let t = match self.dtype {
            DType::F32 => {
                let v: Vec<f32> = self.data.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4"))).collect();
                Tensor::from_vec(v, self.dims.as_slice(), device)?
            }
            _ => {
                let v: Vec<f64> = self.data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8"))).collect();
                Tensor::from_vec(v, self.dims.as_slice(), device)?
            }
        };
        Ok(t)
    }
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: &str) -> Result<Self> {
        let tensors = store
            .iter()
            .map(|(name, p)| {
                Ok(NamedTensor {
                    name: name.to_string(),
                    dtype: p.var.dtype(),
                    trainable: p.trainable,
                    dims: p.var.dims().to_vec(),
                    data: tensor_bytes(p.var.as_tensor())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.to_string(),
            tensors,
        })
    }

    /// Loads every tensor into `store`; names and shapes must match exactly.
    pub fn apply(&self, store: &ParamStore) -> Result<()> {
        let expected: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        let found: Vec<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        if expected != found {
            let missing: Vec<_> = expected.iter().filter(|n| !found.contains(n)).take(5).collect();
            let extra: Vec<_> = found.iter().filter(|n| !expected.contains(n)).take(5).collect();
            return Err(Error::Shape(format!(
                "checkpoint does not match the model: missing {missing:?}, unexpected {extra:?}"
            )));
        }
        for t in &self.tensors {
            store.assign(&t.name, &t.to_tensor(store.device())?)?;
        }
        Ok(())
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.config.len() as u32).to_le_bytes())?;
        out.write_all(self.config.as_bytes())?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let mut rec = Vec::with_capacity(32 + t.name.len() + t.data.len());
            rec.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            rec.extend_from_slice(t.name.as_bytes());
            rec.push(dtype_code(t.dtype)?);
            rec.push(t.trainable as u8);
            rec.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for d in &t.dims {
                rec.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            rec.extend_from_slice(&(t.data.len() as u64).to_le_bytes());
            rec.extend_from_slice(&t.data);
            out.write_all(&rec)?;
            out.write_all(&crc32fast::hash(&rec).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let clen = c.u32("config length")? as usize;
        let config = String::from_utf8(c.take(clen, "config")?.to_vec())
            .map_err(|_| Error::Format("config snapshot is not utf-8".into()))?;
        let count = c.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let start = c.pos;
            let nlen = c.u32("name length")? as usize;
            let name = String::from_utf8(c.take(nlen, "name")?.to_vec())
                .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let header = c.take(2, "dtype")?;
            let (dtype, trainable) = (dtype_from(header[0])?, header[1] != 0);
            let rank = c.u32("rank")? as usize;
            let dims = (0..rank)
                .map(|_| Ok(c.u32("dims")? as usize))
                .collect::<Result<Vec<_>>>()?;
            let blen = c.u64("byte length")? as usize;
            let expected = dims.iter().product::<usize>() * dtype.size_in_bytes();
            if blen != expected {
                return Err(Error::Format(format!("tensor {name}: {blen} bytes for shape {dims:?}")));
            }
            let data = c.take(blen, "tensor data")?.to_vec();
            let end = c.pos;
            let stored = c.u32("checksum")?;
            if crc32fast::hash(&buf[start..end]) != stored {
                return Err(Error::Format(format!("tensor {name}: checksum mismatch")));
            }
            tensors.push(NamedTensor {
                name,
                dtype,
                trainable,
                dims,
                data,
            });
        }
        if c.pos != buf.len() {
            return Err(Error::Format("trailing bytes after the last tensor".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

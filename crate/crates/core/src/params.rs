//! Named parameter registry shared by the adapter and the denoiser.
//!
//! Every learnable tensor is registered under a dotted name. The registry is
//! ordered by name so iteration, checkpoints and hashes are deterministic.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Param {
    pub var: Var,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Var> {
        if self.entries.contains_key(name) {
            return Err(Error::Invalid(format!("parameter {name} registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.insert(
            name.to_string(),
            Param {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.iter().filter(|(_, p)| p.trainable).map(|(k, p)| (k, &p.var))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        match self.entries.get_mut(name) {
            Some(p) => {
                p.trainable = trainable;
                Ok(())
            }
            None => Err(Error::Invalid(format!("unknown parameter {name}"))),
        }
    }

    /// Overwrites a registered parameter in place; shapes must agree.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        if p.var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                p.var.dims(),
                value.dims()
            )));
        }
        p.var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Number of scalar entries over trainable tensors.
    pub fn count_trainable(&self) -> usize {
        self.trainable().map(|(_, v)| v.elem_count()).sum()
    }

    /// Order-sensitive digest of every parameter's bytes (as f64 little-endian).
    pub fn digest(&self) -> Result<u32> {
        let mut h = crc32fast::Hasher::new();
        for (name, p) in self.iter() {
            h.update(name.as_bytes());
            let vals = p.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in vals {
                h.update(&v.to_le_bytes());
            }
        }
        Ok(h.finalize())
    }
}

/// How a freshly registered tensor is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Uniform in (-bound, bound).
    Uniform(f64),
    /// Identity matrix embedded in a `[out, in, 1, 1]` or `[out, in]` tensor,
    /// zeros elsewhere.
    Identity,
}

/// Registers parameters under a name prefix and fills them from a seeded
/// stream, so two builders with the same seed produce identical models.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> Device {
        self.store.device().clone()
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(self.rng);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..bound)).collect(),
            Init::Identity => {
                if shape.len() < 2 {
                    return Err(Error::Invalid(format!("identity init needs rank >= 2, got {shape:?}")));
                }
                let (out, inp) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut v = vec![0.0; n];
                for i in 0..out.min(inp) {
                    v[(i * inp + i) * inner] = 1.0;
                }
                v
            }
        };
        let name = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.insert(&name, values, shape, true)
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal tensor drawn from `rng` in row-major order.
pub fn standard_normal(rng: &mut ChaCha8Rng, dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let t = match dtype {
        DType::F64 => {
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::from_vec(v, dims, device)?
        }
        _ => {
            let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?
        }
    };
    Ok(t)
}

//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "NFILLCKP"
//! version    u32      currently 1
//! n_meta     u32
//!   key      u32 length + UTF-8
//!   value    u32 length + UTF-8
//! n_tensors  u32
//!   name     u32 length + UTF-8
//!   dtype    u8       1 = f32, 2 = f64, 3 = u64
//!   ndim     u32
//!   dims     u64 x ndim
//!   data     element bytes, row-major
//! ```
//!
//! Metadata carries the configuration echo and counters; tensors carry
//! network parameters, batch-norm buffers and optimizer moments.

use std::fs;
use std::path::Path;

use super::adam::{Adam, AdamConfig, Moments};
use super::layers::Param;
use super::tensor::Scalar;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NFILLCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl TensorData {
    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
            TensorData::U64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    fn to_scalars<T: Scalar>(&self) -> Result<Vec<T>> {
        match self {
            TensorData::F32(v) if T::DTYPE == 1 => Ok(v.iter().map(|&x| T::from_f32(x).unwrap()).collect()),
            TensorData::F64(v) if T::DTYPE == 2 => Ok(v.iter().map(|&x| T::from_f64(x).unwrap()).collect()),
            other => Err(Error::Checkpoint(format!(
                "dtype {} does not match the network's dtype {}",
                other.dtype(),
                T::DTYPE
            ))),
        }
    }

    fn from_scalars<T: Scalar>(values: &[T]) -> Self {
        if T::DTYPE == 1 {
            TensorData::F32(values.iter().map(|v| v.to_f32().unwrap()).collect())
        } else {
            TensorData::F64(values.iter().map(|v| v.to_f64().unwrap()).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

impl Checkpoint {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(t.data.dtype());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            ck.meta.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dtype = r.u8()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = match dtype {
                1 => TensorData::F32(
                    r.take(n * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => TensorData::F64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                3 => TensorData::U64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::Checkpoint(format!("tensor `{name}`: unknown dtype {other}"))),
            };
            ck.tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data_io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Stores every parameter and buffer under its own name.
    pub fn push_params<T: Scalar>(&mut self, params: &[&Param<T>]) {
        for p in params {
            self.tensors.push(NamedTensor {
                name: p.name.clone(),
                shape: p.shape.clone(),
                data: TensorData::from_scalars(&p.value),
            });
        }
    }

    /// Overwrites parameter values by name. Every parameter must be present.
    pub fn restore_params<T: Scalar>(&self, params: Vec<&mut Param<T>>) -> Result<()> {
        for p in params {
            let t = self
                .tensor(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape != p.shape || t.data.len() != p.value.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, network expects {:?}",
                    p.name, t.shape, p.shape
                )));
            }
            p.value = t.data.to_scalars()?;
        }
        Ok(())
    }

    pub fn push_adam<T: Scalar>(&mut self, prefix: &str, adam: &Adam<T>) {
        let c = adam.config;
        self.set_meta(&format!("{prefix}.lr"), c.learning_rate);
        self.set_meta(&format!("{prefix}.beta1"), c.beta1);
        self.set_meta(&format!("{prefix}.beta2"), c.beta2);
        self.set_meta(&format!("{prefix}.eps"), c.eps);
        self.tensors.push(NamedTensor {
            name: format!("{prefix}.step"),
            shape: vec![1],
            data: TensorData::U64(vec![adam.step]),
        });
        for mo in &adam.moments {
            for (suffix, values) in [("m", &mo.m), ("v", &mo.v)] {
                self.tensors.push(NamedTensor {
                    name: format!("{prefix}.{}.{suffix}", mo.name),
                    shape: vec![values.len()],
                    data: TensorData::from_scalars(values),
                });
            }
        }
    }

    /// Rebuilds optimizer state for the given (trainable) parameter names.
    pub fn restore_adam<T: Scalar>(&self, prefix: &str, param_names: &[String]) -> Result<Adam<T>> {
        let num = |key: &str| -> Result<f64> {
            self.require_meta(&format!("{prefix}.{key}"))?
                .parse()
                .map_err(|e| Error::Checkpoint(format!("{prefix}.{key}: {e}")))
        };
        let config = AdamConfig {
            learning_rate: num("lr")?,
            beta1: num("beta1")?,
            beta2: num("beta2")?,
            eps: num("eps")?,
        };
        let step = match self.tensor(&format!("{prefix}.step")).map(|t| &t.data) {
            Some(TensorData::U64(v)) if v.len() == 1 => v[0],
            _ => return Err(Error::Checkpoint(format!("missing `{prefix}.step`"))),
        };
        let mut moments = Vec::new();
        if step > 0 {
            for name in param_names {
                let get = |suffix: &str| -> Result<Vec<T>> {
                    self.tensor(&format!("{prefix}.{name}.{suffix}"))
                        .ok_or_else(|| Error::Checkpoint(format!("missing moment `{prefix}.{name}.{suffix}`")))?
                        .data
                        .to_scalars()
                };
                moments.push(Moments {
                    name: name.clone(),
                    m: get("m")?,
                    v: get("v")?,
                });
            }
        }
        Ok(Adam { config, step, moments })
    }
}

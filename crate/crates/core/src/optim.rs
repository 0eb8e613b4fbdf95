//! Named parameters, Adam, and the binary checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"SFLAB01";

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Parameters in registration order with their Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
    step_count: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            step_count: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter `{name}`")));
        }
        let n = value.len();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                grad: None,
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            },
        );
        Ok(())
    }

    /// Glorot-uniform weight matrix `[fan_in, fan_out]`.
    pub fn insert_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Result<()> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::lit(rng.gen_range(-limit..=limit)))
            .collect();
        self.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(|p| p.grad = None);
    }

    /// Adds `scale * dLoss/dParam` from a backpropagated graph.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, scale: T) -> Result<()> {
        for (name, var) in g.params() {
            let p = self
                .params
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            let src = g.grad(var).ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            let dst = p.grad.get_or_insert_with(|| vec![T::zero(); src.len()]);
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    /// Sets a parameter's gradient directly.
    pub fn set_grad(&mut self, name: &str, grad: Vec<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if grad.len() != p.value.len() {
            return Err(Error::Shape {
                op: "set_grad",
                left: p.value.shape().to_vec(),
                right: vec![grad.len()],
            });
        }
        p.grad = Some(grad);
        Ok(())
    }

    /// One bias-corrected Adam update. Every parameter must hold a gradient.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<()> {
        if let Some((name, _)) = self.params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        let t = (self.step_count + 1) as i32;
        let b1 = T::lit(cfg.beta1);
        let b2 = T::lit(cfg.beta2);
        let c1 = T::one() - T::lit(cfg.beta1.powi(t));
        let c2 = T::one() - T::lit(cfg.beta2.powi(t));
        let eps = T::lit(cfg.eps);
        let lr = T::lit(lr);
        for p in self.params.values_mut() {
            let g = p.grad.take().expect("checked above");
            let vals = p.value.data_mut();
            for i in 0..vals.len() {
                p.m[i] = b1 * p.m[i] + (T::one() - b1) * g[i];
                p.v[i] = b2 * p.v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = p.m[i] / c1;
                let vhat = p.v[i] / c2;
                vals[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.step_count += 1;
        Ok(())
    }

    // ---------------------------------------------------------- checkpoint

    /// Layout: magic, u32 parameter count, then one record per parameter
    /// (u32 name length, name bytes, u32 rank, u32 extents, f64 values), the
    /// same records for the first moments, then for the second moments, and
    /// finally the u64 step count. All integers and floats little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let record = |out: &mut Vec<u8>, name: &str, shape: &[usize], vals: &[T]| {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in vals {
                out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
            }
        };
        for (name, p) in &self.params {
            record(&mut out, name, p.value.shape(), p.value.data());
        }
        for (name, p) in &self.params {
            record(&mut out, name, p.value.shape(), &p.m);
        }
        for (name, p) in &self.params {
            record(&mut out, name, p.value.shape(), &p.v);
        }
        out.extend_from_slice(&self.step_count.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(7)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad checkpoint magic".into(),
            });
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        let read_record = |r: &mut ByteReader| -> Result<(String, Vec<usize>, Vec<T>)> {
            let at = r.pos as u64;
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format {
                offset: at,
                msg: "parameter name is not utf-8".into(),
            })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                vals.push(T::from_f64_lossy(r.f64()?));
            }
            Ok((name, shape, vals))
        };
        for _ in 0..count {
            let at = r.pos as u64;
            let (name, shape, vals) = read_record(&mut r)?;
            let t = Tensor::new(shape, vals).map_err(|e| Error::Format {
                offset: at,
                msg: e.to_string(),
            })?;
            store.insert(&name, t).map_err(|e| Error::Format {
                offset: at,
                msg: e.to_string(),
            })?;
        }
        for moment in 0..2 {
            for i in 0..count {
                let at = r.pos as u64;
                let (name, shape, vals) = read_record(&mut r)?;
                let matches = {
                    let (pname, p) = store.params.get_index(i).unwrap();
                    *pname == name && shape == p.value.shape()
                };
                if !matches {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("moment record `{name}` does not match parameter {i}"),
                    });
                }
                let p = &mut store.params[i];
                if moment == 0 {
                    p.m = vals;
                } else {
                    p.v = vals;
                }
            }
        }
        store.step_count = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                msg: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

/// Little-endian cursor that reports the offset of a short read.
pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len() as u64,
                msg: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

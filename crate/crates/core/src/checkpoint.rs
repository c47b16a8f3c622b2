//! Versioned binary checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DEGANCKP" | version u32 | kind str | epoch u64
//! n_config u32 | (key str, value str)*
//! n_tensors u32 | (name str, dtype u8, ndim u32, dims u64*, data)*
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8. Entries are written in
//! key order, so equal contents always produce equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::tensor::dtype_size;
use crate::nn::{load_named, named_buffers, named_params, Adam, Module, Real};

const MAGIC: &[u8; 8] = b"DEGANCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl Tensor {
    pub fn from_array<T: Real>(a: &ArrayD<T>) -> Self {
        let mut data = Vec::with_capacity(a.len() * dtype_size(T::DTYPE).unwrap());
        for v in a.iter() {
            v.write_le(&mut data);
        }
        Self { dtype: T::DTYPE, dims: a.shape().to_vec(), data }
    }

    pub fn to_array<T: Real>(&self) -> Result<ArrayD<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!("tensor dtype {} is not {}", self.dtype, T::NAME)));
        }
        let size = dtype_size(self.dtype).unwrap();
        let values: Vec<T> = self.data.chunks_exact(size).map(T::read_le).collect();
        ArrayD::from_shape_vec(IxDyn(&self.dims), values).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// What the archive holds, e.g. `stage1` or `stage2`.
    pub kind: String,
    pub epoch: u64,
    pub config: BTreeMap<String, String>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, epoch: u64, config: BTreeMap<String, String>) -> Self {
        Self { kind: kind.to_string(), epoch, config, tensors: BTreeMap::new() }
    }

    pub fn put<T: Real>(&mut self, name: &str, a: &ArrayD<T>) {
        self.tensors.insert(name.to_string(), Tensor::from_array(a));
    }

    pub fn get<T: Real>(&self, name: &str) -> Result<ArrayD<T>> {
        self.tensors.get(name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?.to_array()
    }

    /// Stores parameters as `<section>/param/<name>` and buffers as
    /// `<section>/buffer/<name>`.
    pub fn put_module<T: Real>(&mut self, section: &str, m: &dyn Module<T>) {
        for (n, v) in named_params(m) {
            self.put(&format!("{section}/param/{n}"), &v);
        }
        for (n, v) in named_buffers(m) {
            self.put(&format!("{section}/buffer/{n}"), &v);
        }
    }

    pub fn has_section(&self, section: &str) -> bool {
        let prefix = format!("{section}/");
        self.tensors.keys().any(|k| k.starts_with(&prefix))
    }

    pub fn load_module<T: Real>(&self, section: &str, m: &mut dyn Module<T>) -> Result<()> {
        if !self.has_section(section) {
            return Err(Error::Format(format!("checkpoint has no `{section}` section")));
        }
        let collect = |kind: &str| -> Result<BTreeMap<String, ArrayD<T>>> {
            let prefix = format!("{section}/{kind}/");
            self.tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(&prefix).map(|n| (n, t)))
                .map(|(n, t)| Ok((n.to_string(), t.to_array()?)))
                .collect()
        };
        load_named(m, &collect("param")?, &collect("buffer")?)
            .map_err(|e| Error::Format(format!("section `{section}`: {e}")))
    }

    pub fn put_optimizer<T: Real>(&mut self, section: &str, opt: &Adam<T>) {
        self.put(&format!("{section}/step"), &ArrayD::from_elem(IxDyn(&[]), opt.step as f64));
        for (n, (m, v)) in &opt.moments {
            self.put(&format!("{section}/m/{n}"), m);
            self.put(&format!("{section}/v/{n}"), v);
        }
    }

    pub fn load_optimizer<T: Real>(&self, section: &str, opt: &mut Adam<T>) -> Result<()> {
        let step = self.get::<f64>(&format!("{section}/step"))?;
        opt.step = step.iter().next().map(|&s| s as u64).unwrap_or(0);
        opt.moments.clear();
        let prefix = format!("{section}/m/");
        for (k, t) in &self.tensors {
            if let Some(n) = k.strip_prefix(&prefix) {
                let v = self.get(&format!("{section}/v/{n}"))?;
                opt.moments.insert(n.to_string(), (t.to_array()?, v));
            }
        }
        Ok(())
    }

    /// Fails unless every `(key, value)` in `expected` matches the stored
    /// configuration.
    pub fn require_config(&self, expected: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in expected {
            match self.config.get(k) {
                Some(stored) if stored == v => {}
                Some(stored) => {
                    return Err(Error::Format(format!(
                        "checkpoint config mismatch for `{k}`: stored {stored}, requested {v}"
                    )))
                }
                None => return Err(Error::Format(format!("checkpoint config lacks `{k}`"))),
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        for (k, v) in &self.config {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(t.dtype);
            out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let kind = r.string()?;
        let epoch = r.u64()?;
        let mut config = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            config.insert(k, r.string()?);
        }
        let mut tensors = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let size = dtype_size(dtype).ok_or_else(|| Error::Format(format!("unknown dtype {dtype}")))?;
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(size, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format("tensor too large".into()))?;
            let data = r.take(len)?.to_vec();
            tensors.insert(name, Tensor { dtype, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self { kind, epoch, config, tensors })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid UTF-8 in checkpoint".into()))
    }
}

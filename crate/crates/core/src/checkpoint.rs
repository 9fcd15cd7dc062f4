//! Versioned binary checkpoints shared by every trainable component.
//!
//! Layout (little endian): magic `IIMTCKPT`, `u32` format version, the
//! component kind and its JSON config as length-prefixed UTF-8, a `u64`
//! step counter, then a `u32` count of named arrays. Each array is a
//! length-prefixed name, a `u32` rank, `u64` dimensions and `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{bail, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"IIMTCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: &impl Serialize, step: u64, store: &ParamStore) -> Result<Self> {
        Ok(Checkpoint {
            kind: kind.to_string(),
            config: serde_json::to_value(config)?,
            step,
            arrays: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        })
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `store` with the array of the same name.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for p in store.iter_mut() {
            let Some(t) = self.get(&p.name) else {
                bail!(Format, "{} checkpoint lacks parameter {}", self.kind, p.name);
            };
            if t.shape() != p.value.shape() {
                bail!(Shape, "parameter {} is {:?} in the checkpoint but {:?} in the model", p.name, t.shape(), p.value.shape());
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            bail!(Config, "expected a {kind} checkpoint, found {}", self.kind);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut b, &self.kind);
        put_str(&mut b, &serde_json::to_string(&self.config)?);
        b.extend_from_slice(&self.step.to_le_bytes());
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, t) in &self.arrays {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            bail!(Format, "not a checkpoint (bad magic)");
        }
        let version = get_u32(&mut r)?;
        if version != FORMAT_VERSION {
            bail!(Format, "checkpoint format version {version}, this build reads {FORMAT_VERSION}");
        }
        let kind = get_str(&mut r)?;
        let config = serde_json::from_str(&get_str(&mut r)?)?;
        let step = get_u64(&mut r)?;
        let n = get_u32(&mut r)? as usize;
        let mut arrays = Vec::with_capacity(n);
        for _ in 0..n {
            let name = get_str(&mut r)?;
            let rank = get_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| get_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            if len.saturating_mul(8) > r.len() {
                bail!(Format, "array {name} is truncated");
            }
            let data = (0..len).map(|_| get_u64(&mut r).map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            arrays.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            bail!(Format, "{} trailing bytes after the last array", r.len());
        }
        Ok(Checkpoint { kind, config, step, arrays })
    }

    /// Writes through a temporary file so a crash never leaves a torn file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

/// Elementwise mean of checkpoints with identical names and shapes. The
/// kind, config and step of the last checkpoint are kept.
pub fn average_checkpoints(list: &[Checkpoint]) -> Result<Checkpoint> {
    let Some(last) = list.last() else {
        bail!(Contract, "no checkpoints to average");
    };
    let mut out = last.clone();
    for (i, (name, t)) in out.arrays.iter_mut().enumerate() {
        let mut acc = vec![0.0; t.numel()];
        for c in list {
            let Some((n, s)) = c.arrays.get(i) else {
                bail!(Contract, "checkpoints hold different parameter sets");
            };
            if n != name || s.shape() != t.shape() {
                bail!(Contract, "parameter {name} {:?} does not match {n} {:?}", t.shape(), s.shape());
            }
            for (a, v) in acc.iter_mut().zip(s.data()) {
                *a += v;
            }
        }
        let k = list.len() as f64;
        for (d, a) in t.data_mut().iter_mut().zip(acc) {
            *d = a / k;
        }
    }
    if list.iter().any(|c| c.arrays.len() != out.arrays.len()) {
        bail!(Contract, "checkpoints hold different parameter sets");
    }
    Ok(out)
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u32).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("checkpoint is truncated".into()))
}

fn get_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > r.len() {
        bail!(Format, "checkpoint is truncated");
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-UTF-8 string in checkpoint".into()))
}

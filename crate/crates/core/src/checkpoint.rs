//! Binary checkpoints: parameters, batch-norm statistics, optimizer moments
//! and the resolved run configuration.
//!
//! Layout (little endian): magic `HGCK`, `u32` version, `u8` value width,
//! config string, `u64` completed epochs, `f64` best F1, `u64` optimizer
//! step, `u32` entry count, then entries of (name string, `u32` rank,
//! `u64` extents, values). Strings are `u32` length plus UTF-8 bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"HGCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_toml: String,
    /// Number of completed epochs.
    pub epoch: u64,
    pub best_f1: f64,
    pub store: ParamStore,
    pub adam: Option<Adam>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 name".into()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let width = std::mem::size_of::<Real>();
        let bytes = self.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("bad extents".into()))?)?;
        let data = bytes
            .chunks_exact(width)
            .map(|c| Real::from_le_bytes(c.try_into().expect("width")))
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

fn vec_tensor(v: &[Real]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).expect("1-D")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.0.push(std::mem::size_of::<Real>() as u8);
        w.str(&self.config_toml);
        w.u64(self.epoch);
        w.0.extend_from_slice(&self.best_f1.to_le_bytes());
        w.u64(self.adam.as_ref().map_or(0, |a| a.step));
        let names: Vec<&str> = self.store.params().map(|(n, _)| n).collect();
        let mut entries: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in self.store.params() {
            entries.push((format!("param:{name}"), t.clone()));
        }
        for (name, s) in self.store.norms() {
            entries.push((format!("bn.mean:{name}"), vec_tensor(&s.mean)));
            entries.push((format!("bn.var:{name}"), vec_tensor(&s.var)));
        }
        if let Some(adam) = &self.adam {
            for (i, name) in names.iter().enumerate() {
                entries.push((format!("adam.m:{name}"), adam.m[i].clone()));
                entries.push((format!("adam.v:{name}"), adam.v[i].clone()));
            }
        }
        w.u32(entries.len() as u32);
        for (name, t) in &entries {
            w.tensor(name, t);
        }
        w.0
    }

    /// Decodes a checkpoint into a copy of `template`, whose parameter and
    /// batch-norm names and shapes must match the file exactly.
    pub fn from_bytes(bytes: &[u8], template: &ParamStore) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let width = r.take(1)?[0] as usize;
        if width != std::mem::size_of::<Real>() {
            return Err(Error::Checkpoint(format!(
                "file stores {}-bit values, this build uses {}-bit",
                width * 8,
                std::mem::size_of::<Real>() * 8
            )));
        }
        let config_toml = r.str()?;
        let epoch = r.u64()?;
        let best_f1 = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut entries: HashMap<String, Tensor> = HashMap::with_capacity(count);
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            if entries.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate entry {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let has_adam = entries.keys().any(|k| k.starts_with("adam."));

        let mut take = |key: String, shape: &[usize]| -> Result<Tensor> {
            let t = entries
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!("{key}: shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let mut store = template.clone();
        let ids: Vec<_> = store.ids().collect();
        let names: Vec<String> = ids.iter().map(|&id| store.name(id).to_string()).collect();
        for (&id, name) in ids.iter().zip(&names) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = take(format!("param:{name}"), &shape)?;
        }
        let norm_names: Vec<(String, usize)> = store.norms().map(|(n, s)| (n.to_string(), s.mean.len())).collect();
        for (name, ch) in norm_names {
            let mean = take(format!("bn.mean:{name}"), &[ch])?.into_data();
            let var = take(format!("bn.var:{name}"), &[ch])?.into_data();
            let state = store.norm_mut(&name).expect("template norm");
            state.mean = mean;
            state.var = var;
        }
        let adam = if has_adam {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (&id, name) in ids.iter().zip(&names) {
                let shape = store.get(id).shape().to_vec();
                m.push(take(format!("adam.m:{name}"), &shape)?);
                v.push(take(format!("adam.v:{name}"), &shape)?);
            }
            Some(Adam { step, m, v })
        } else {
            None
        };
        drop(take);
        if let Some(extra) = entries.keys().min() {
            return Err(Error::Checkpoint(format!("unexpected entry {extra}")));
        }
        Ok(Checkpoint {
            config_toml,
            epoch,
            best_f1,
            store,
            adam,
        })
    }

    /// Writes through a temporary file so an interrupted save never leaves
    /// a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, template: &ParamStore) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, template)
    }

    /// Reads only the embedded configuration.
    pub fn read_config(path: &Path) -> Result<String> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader { buf: &bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        r.take(5)?;
        r.str()
    }
}

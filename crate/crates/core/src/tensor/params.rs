//! Named trainable parameters and binary checkpoints.

use super::{Tensor, MAX_RANK};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CKPT_MAGIC: &[u8; 4] = b"SIVW";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Vec<f64>,
}

/// Ordered collection of named parameters. Order is insertion order and is
/// part of the public contract: optimizers and the flat-vector views walk
/// parameters in this order, which keeps runs reproducible.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let grad = vec![0.0; tensor.numel()];
        let idx = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            grad,
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get_by_index(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g = 0.0;
            }
        }
    }

    pub fn accumulate_grad(&mut self, idx: usize, g: &[f64]) -> Result<()> {
        let p = &mut self.params[idx];
        if g.len() != p.grad.len() {
            return Err(Error::shape(
                "accumulate_grad",
                format!(
                    "gradient length {} != parameter {:?} length {}",
                    g.len(),
                    p.name,
                    p.grad.len()
                ),
            ));
        }
        for (d, &s) in p.grad.iter_mut().zip(g) {
            *d += s;
        }
        Ok(())
    }

    /// All parameter values as one flat vector (insertion order).
    pub fn values_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.total_elements());
        for p in &self.params {
            v.extend_from_slice(p.tensor.data());
        }
        v
    }

    /// All accumulated gradients as one flat vector (insertion order).
    pub fn grads_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.total_elements());
        for p in &self.params {
            v.extend_from_slice(&p.grad);
        }
        v
    }

    /// Overwrites every parameter from a flat vector laid out like
    /// [`ParamStore::values_flat`].
    pub fn set_values_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.total_elements() {
            return Err(Error::shape(
                "set_values_flat",
                format!(
                    "flat length {} != total parameter element count {}",
                    flat.len(),
                    self.total_elements()
                ),
            ));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Copies values from `other` into this store. Every parameter must be
    /// present in both stores with identical shape; anything extra or missing
    /// is an error so silently mismatched checkpoints cannot load.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::invalid(format!(
                "parameter count mismatch: expected {}, checkpoint has {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.params {
            let src = other.get(&p.name).ok_or_else(|| {
                Error::invalid(format!("checkpoint is missing parameter {:?}", p.name))
            })?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::invalid(format!(
                    "parameter {:?} shape mismatch: expected {:?}, checkpoint has {:?}",
                    p.name,
                    p.tensor.shape(),
                    src.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io_path(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e: std::io::Error| Error::io_path(path, e);
        w.write_all(CKPT_MAGIC).map_err(io)?;
        w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())
            .map_err(io)?;
        for p in &self.params {
            let name = p.name.as_bytes();
            if name.len() > u16::MAX as usize {
                return Err(Error::invalid(format!(
                    "parameter name too long to serialize: {} bytes",
                    name.len()
                )));
            }
            w.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
            w.write_all(name).map_err(io)?;
            w.write_all(&[p.tensor.rank() as u8]).map_err(io)?;
            for &e in p.tensor.shape() {
                w.write_all(&(e as u32).to_le_bytes()).map_err(io)?;
            }
            for &v in p.tensor.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
        let file = File::open(path).map_err(|e| Error::io_path(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |detail: String| Error::format(path, detail);
        let mut magic = [0u8; 4];
        read_into(&mut r, path, &mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(bad(format!("bad magic {magic:?}, expected {CKPT_MAGIC:?}")));
        }
        let version = read_u32(&mut r, path)?;
        if version != CKPT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version}, expected {CKPT_VERSION}"
            )));
        }
        let count = read_u32(&mut r, path)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r, path)? as usize;
            if name_len == 0 || name_len > 4096 {
                return Err(bad(format!("implausible parameter name length {name_len}")));
            }
            let mut name_bytes = vec![0u8; name_len];
            read_into(&mut r, path, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| bad("parameter name is not valid UTF-8".to_string()))?;
            let mut rank_b = [0u8; 1];
            read_into(&mut r, path, &mut rank_b)?;
            let rank = rank_b[0] as usize;
            if rank == 0 || rank > MAX_RANK {
                return Err(bad(format!("parameter {name:?} has invalid rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let e = read_u32(&mut r, path)? as usize;
                if e == 0 {
                    return Err(bad(format!("parameter {name:?} has a zero extent")));
                }
                numel = numel.checked_mul(e).ok_or_else(|| {
                    bad(format!("parameter {name:?} element count overflows"))
                })?;
                shape.push(e);
            }
            if numel > (1usize << 28) {
                return Err(bad(format!(
                    "parameter {name:?} claims {numel} elements, refusing"
                )));
            }
            let mut data = vec![0.0f64; numel];
            for v in &mut data {
                let mut b = [0u8; 8];
                read_into(&mut r, path, &mut b)?;
                *v = f64::from_le_bytes(b);
            }
            let tensor = Tensor::new(shape, data)?;
            store.add(&name, tensor)?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io_path(path, e))? != 0 {
            return Err(bad("trailing bytes after last parameter".to_string()));
        }
        Ok(store)
    }
}

fn read_into(r: &mut impl Read, path: &Path, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, "file truncated".to_string())
        } else {
            Error::io_path(path, e)
        }
    })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_into(r, path, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_into(r, path, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

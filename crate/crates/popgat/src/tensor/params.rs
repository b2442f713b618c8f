//! Named parameter storage, the Adam optimiser, and checkpoint I/O.
//!
//! Parameters (and non-learnable buffers such as batch-norm running
//! statistics) live outside any tape in a [`ParamStore`].  Checkpoints are a
//! single file: one line of JSON describing `(name, shape, offset,
//! trainable)` per entry, then a flat payload of little-endian `f32`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
    /// False for buffers (running statistics) and frozen sub-networks.
    pub trainable: bool,
}

/// Ordered, name-indexed collection of parameters.  Registration order is
/// part of the public contract: it fixes checkpoint layout and the
/// optimiser's iteration order, keeping runs bit-reproducible.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<T>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument {
                op: "param register",
                reason: format!("duplicate parameter name `{name}`"),
            });
        }
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::InvalidShape {
                op: "param register",
                shape: shape.to_vec(),
                reason: format!("data length {} does not match", data.len()),
            });
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id.0);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            data,
            grad: vec![T::zero(); n],
            trainable,
        });
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].data
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Freeze (or unfreeze) every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Copy of every parameter's values (including buffers), positionally
    /// ordered, for in-memory checkpointing during training.
    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|p| p.data.clone()).collect()
    }

    /// Restore values captured by [`ParamStore::snapshot`] on this same store.
    pub fn restore(&mut self, snap: &[Vec<T>]) -> Result<()> {
        if snap.len() != self.params.len() {
            return Err(Error::InvalidArgument {
                op: "param restore",
                reason: format!(
                    "snapshot holds {} parameters, store holds {}",
                    snap.len(),
                    self.params.len()
                ),
            });
        }
        for (p, s) in self.params.iter_mut().zip(snap) {
            if p.data.len() != s.len() {
                return Err(Error::InvalidArgument {
                    op: "param restore",
                    reason: format!("parameter `{}` length changed", p.name),
                });
            }
            p.data.copy_from_slice(s);
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient (the convention used
/// by mainstream deep-learning optimisers' `weight_decay` argument).
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            weight_decay: T::from_f64(weight_decay),
            t: 0,
            m: store.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: store.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
        }
    }

    /// One update over all trainable parameters using their accumulated
    /// gradients.  Does not zero the gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (idx, p) in store.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.data.len() {
                let g = p.grad[i] + self.weight_decay * p.data[i];
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] = p.data[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload that follows the header line.
    offset: u64,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    dtype: String,
    entries: Vec<CkptEntry>,
}

/// Write all parameters as a one-line JSON header plus a flat little-endian
/// `f32` payload.  Higher-precision stores are narrowed on save.
pub fn save_checkpoint<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (_, p) in store.iter() {
        entries.push(CkptEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
            trainable: p.trainable,
        });
        offset += (p.data.len() * 4) as u64;
    }
    let header = CkptHeader {
        dtype: "f32".into(),
        entries,
    };
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create checkpoint {}", path.display()), e))?;
    let mut line = serde_json::to_string(&header).map_err(|e| Error::Json {
        context: "checkpoint header".into(),
        source: e,
    })?;
    line.push('\n');
    file.write_all(line.as_bytes())
        .map_err(|e| Error::io(format!("write checkpoint {}", path.display()), e))?;
    let mut payload = Vec::with_capacity(store.num_elements() * 4);
    for (_, p) in store.iter() {
        for &v in &p.data {
            payload.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    file.write_all(&payload)
        .map_err(|e| Error::io(format!("write checkpoint {}", path.display()), e))?;
    Ok(())
}

fn read_checkpoint_raw(path: &Path) -> Result<(CkptHeader, Vec<u8>)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("open checkpoint {}", path.display()), e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(format!("read checkpoint header {}", path.display()), e))?;
    let header: CkptHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::Json {
        context: format!("checkpoint header {}", path.display()),
        source: e,
    })?;
    if header.dtype != "f32" {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("unsupported checkpoint dtype `{}`", header.dtype),
        });
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(format!("read checkpoint payload {}", path.display()), e))?;
    Ok((header, payload))
}

fn entry_values<T: Scalar>(entry: &CkptEntry, payload: &[u8], path: &Path) -> Result<Vec<T>> {
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + n * 4;
    if end > payload.len() {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!(
                "entry `{}` extends past payload ({} > {} bytes)",
                entry.name,
                end,
                payload.len()
            ),
        });
    }
    Ok(payload[start..end]
        .chunks_exact(4)
        .map(|b| T::from_f32(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect())
}

/// Rebuild a parameter store from a checkpoint file.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    let (header, payload) = read_checkpoint_raw(path)?;
    let mut store = ParamStore::new();
    for entry in &header.entries {
        let data = entry_values::<T>(entry, &payload, path)?;
        store.register(entry.name.clone(), &entry.shape, data, entry.trainable)?;
    }
    Ok(store)
}

/// Copy checkpoint entries into an existing store, matching by name.
/// Only names starting with `prefix` are considered (empty prefix = all).
/// Returns the number of parameters loaded; it is an error if a store
/// parameter under the prefix has no checkpoint entry or shapes differ.
pub fn load_checkpoint_into<T: Scalar>(
    store: &mut ParamStore<T>,
    path: &Path,
    prefix: &str,
) -> Result<usize> {
    let (header, payload) = read_checkpoint_raw(path)?;
    let by_name: HashMap<&str, &CkptEntry> = header
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    let mut loaded = 0;
    for p in &mut store.params {
        if !p.name.starts_with(prefix) {
            continue;
        }
        let entry = by_name.get(p.name.as_str()).ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            reason: format!("checkpoint is missing parameter `{}`", p.name),
        })?;
        if entry.shape != p.shape {
            return Err(Error::ShapeMismatch {
                op: "load checkpoint",
                lhs: entry.shape.clone(),
                rhs: p.shape.clone(),
            });
        }
        p.data = entry_values::<T>(entry, &payload, path)?;
        loaded += 1;
    }
    if loaded == 0 {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("no parameters matching prefix `{prefix}`"),
        });
    }
    Ok(loaded)
}

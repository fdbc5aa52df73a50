use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
///
/// Checkpoints are a flat little-endian `f64` stream in insertion order plus
/// a JSON sidecar listing each name, shape and offset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dtype: String,
    total: usize,
    params: Vec<SidecarEntry>,
}

#[derive(Serialize, Deserialize)]
struct SidecarEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    /// Overwrites every parameter from a flat vector in insertion order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Contract(format!(
                "flat parameter vector has {} entries, store holds {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn attach(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Registers every parameter as a constant on `tape`.
    pub fn attach_frozen(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
            .collect();
        BoundParams { vars }
    }

    pub fn save(&self, bin_path: &Path, json_path: &Path) -> Result<()> {
        let mut offset = 0;
        let mut params = Vec::with_capacity(self.entries.len());
        let mut out = BufWriter::new(fs::File::create(bin_path)?);
        for (name, t) in &self.entries {
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
            params.push(SidecarEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        out.flush()?;
        let sidecar = Sidecar {
            dtype: "f64-le".into(),
            total: offset,
            params,
        };
        fs::write(json_path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(bin_path: &Path, json_path: &Path) -> Result<Self> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(json_path)?)?;
        if sidecar.dtype != "f64-le" {
            return Err(Error::Config(format!("unsupported dtype {}", sidecar.dtype)));
        }
        let mut bytes = Vec::new();
        BufReader::new(fs::File::open(bin_path)?).read_to_end(&mut bytes)?;
        if bytes.len() != sidecar.total * 8 {
            return Err(Error::Config(format!(
                "checkpoint holds {} bytes, sidecar expects {}",
                bytes.len(),
                sidecar.total * 8
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut store = ParamStore::new();
        for e in sidecar.params {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n;
            if end > flat.len() {
                return Err(Error::Config(format!("parameter `{}` overruns checkpoint", e.name)));
            }
            store.insert(e.name, Tensor::new(e.shape, flat[e.offset..end].to_vec())?);
        }
        Ok(store)
    }
}

/// Tape handles for a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Gradients in the store's flat order; missing entries are zero.
    pub fn flat_grad(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        self.vars
            .iter()
            .flat_map(|(_, v)| match grads.get(*v) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; tape.value(*v).numel()],
            })
            .collect()
    }
}

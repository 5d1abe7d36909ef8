//! Named parameter storage, Adam, and the versioned checkpoint container.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use base64::Engine as _;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::LastlabError;

pub const CKPT_FORMAT: &str = "lastlab-ckpt-v1";

/// Ordered collection of named `f64` matrices. Iteration order is insertion
/// order and is part of the determinism contract.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.values[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.values[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// True iff both stores hold identical names with bit-identical contents.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        if self.names != other.names {
            return false;
        }
        self.values.iter().zip(&other.values).all(|(a, b)| {
            a.dim() == b.dim()
                && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }

    /// Subset comparison by name prefix, bitwise.
    pub fn namespace_bitwise_eq(&self, other: &ParamStore, prefix: &str) -> bool {
        for (name, v) in self.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            if !other.contains(name) {
                return false;
            }
            let w = other.get(name);
            if v.dim() != w.dim()
                || v.iter().zip(w.iter()).any(|(x, y)| x.to_bits() != y.to_bits())
            {
                return false;
            }
        }
        true
    }
}

/// First-order adaptive optimizer (Adam) over a [`ParamStore`].
///
/// Parameters whose name starts with one of the frozen prefixes are never
/// touched, not even by a zero-magnitude update.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    frozen_prefixes: Vec<String>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            frozen_prefixes: Vec::new(),
        }
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen_prefixes.push(prefix.to_string());
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p))
    }

    /// Applies one descent step on `grads` (missing grads are skipped).
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
        for name in names {
            if self.is_frozen(&name) {
                continue;
            }
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            let w = params.get_mut(&name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(w.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(w.dim()));
            for ((wij, gij), (mij, vij)) in
                w.iter_mut().zip(grad.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mij = self.beta1 * *mij + (1.0 - self.beta1) * gij;
                *vij = self.beta2 * *vij + (1.0 - self.beta2) * gij * gij;
                let mh = *mij / bc1;
                let vh = *vij / bc2;
                *wij -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Plain gradient step, used where the update direction itself is under test.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Array2<f64>>,
    lr: f64,
    frozen_prefixes: &[String],
) {
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in names {
        if frozen_prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let Some(grad) = grads.get(&name) else {
            continue;
        };
        let w = params.get_mut(&name);
        for (wij, gij) in w.iter_mut().zip(grad.iter()) {
            *wij -= lr * gij;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CkptEntry {
    name: String,
    rows: usize,
    cols: usize,
    data_b64: String,
}

#[derive(Serialize, Deserialize)]
struct CkptFile {
    format: String,
    config_hash: String,
    config: String,
    params: Vec<CkptEntry>,
}

fn encode_f64s(data: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64s(s: &str) -> Result<Vec<f64>, LastlabError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| LastlabError::Checkpoint(format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(LastlabError::Checkpoint("truncated f64 payload".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes the versioned checkpoint container: named arrays plus a canonical
/// config echo, byte-stable for identical inputs.
pub fn save_checkpoint(
    path: &Path,
    params: &ParamStore,
    config_canonical: &str,
    config_hash: &str,
) -> Result<(), LastlabError> {
    let file = CkptFile {
        format: CKPT_FORMAT.to_string(),
        config_hash: config_hash.to_string(),
        config: config_canonical.to_string(),
        params: params
            .iter()
            .map(|(name, v)| CkptEntry {
                name: name.to_string(),
                rows: v.nrows(),
                cols: v.ncols(),
                data_b64: encode_f64s(v.as_slice().expect("contiguous")),
            })
            .collect(),
    };
    let f = std::fs::File::create(path)
        .map_err(|e| LastlabError::Checkpoint(format!("create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, &file)
        .map_err(|e| LastlabError::Checkpoint(format!("serialize: {e}")))?;
    w.flush()
        .map_err(|e| LastlabError::Checkpoint(format!("flush: {e}")))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, String, String), LastlabError> {
    let f = std::fs::File::open(path)
        .map_err(|_| LastlabError::MissingCheckpoint(path.display().to_string()))?;
    let file: CkptFile = serde_json::from_reader(BufReader::new(f))
        .map_err(|e| LastlabError::Checkpoint(format!("parse {}: {e}", path.display())))?;
    if file.format != CKPT_FORMAT {
        return Err(LastlabError::Checkpoint(format!(
            "unsupported format tag {:?}",
            file.format
        )));
    }
    let mut params = ParamStore::new();
    for e in file.params {
        let data = decode_f64s(&e.data_b64)?;
        if data.len() != e.rows * e.cols {
            return Err(LastlabError::Checkpoint(format!(
                "shape mismatch for {}",
                e.name
            )));
        }
        let arr = Array2::from_shape_vec((e.rows, e.cols), data)
            .map_err(|e| LastlabError::Checkpoint(format!("shape: {e}")))?;
        params.insert(&e.name, arr);
    }
    Ok((params, file.config, file.config_hash))
}

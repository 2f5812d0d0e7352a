//! Named-tensor checkpoint container.
//!
//! ```text
//! 8 bytes   magic "PVTFCKPT"
//! 8 bytes   u64 LE length of the index
//! N bytes   index JSON: config, epoch, best_val_loss, optimizer header,
//!           tensors [{name, dtype, shape, offset, nbytes}]
//! ...       tensor blobs, f32 little-endian, row-major; offsets are
//!           relative to the first byte after the index
//! ```
//!
//! Model tensors use their dotted parameter names (batch-norm running
//! statistics included). Adam moments are stored as `optim.m.<name>` and
//! `optim.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::Visit;
use crate::error::{Error, Result};
use crate::model::{PvtFormer, PvtFormerConfig};
use crate::optim::{Adam, AdamConfig, Moments};

const MAGIC: &[u8; 8] = b"PVTFCKPT";
const VERSION: u32 = 1;
const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Index {
    version: u32,
    config: PvtFormerConfig,
    epoch: usize,
    best_val_loss: Option<f64>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory checkpoint: everything needed to rebuild a model and resume
/// its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PvtFormerConfig,
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    pub optimizer: Option<OptimizerHeader>,
    pub tensors: Vec<NamedTensor>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

impl Checkpoint {
    pub fn capture(
        model: &PvtFormer<f32>,
        epoch: usize,
        best_val_loss: Option<f64>,
        optim: Option<&Adam<f32>>,
    ) -> Self {
        let mut tensors = Vec::new();
        model.visit("", &mut |name, p| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                shape: p.shape.clone(),
                data: p.value.clone(),
            })
        });
        let optimizer = optim.map(|a| {
            let mut shapes = BTreeMap::new();
            model.visit("", &mut |name, p| {
                shapes.insert(name.to_string(), p.shape.clone());
            });
            for (name, slot) in a.slots() {
                let shape = shapes.get(name).cloned().unwrap_or_else(|| vec![slot.m.len()]);
                tensors.push(NamedTensor {
                    name: format!("{M_PREFIX}{name}"),
                    shape: shape.clone(),
                    data: slot.m.clone(),
                });
                tensors.push(NamedTensor {
                    name: format!("{V_PREFIX}{name}"),
                    shape,
                    data: slot.v.clone(),
                });
            }
            OptimizerHeader {
                config: a.config,
                step: a.step_count(),
            }
        });
        Self {
            config: model.config().clone(),
            epoch,
            best_val_loss,
            optimizer,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for t in &self.tensors {
            let nbytes = 4 * t.data.len() as u64;
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: "f32".into(),
                shape: t.shape.clone(),
                offset,
                nbytes,
            });
            offset += nbytes;
        }
        let index = serde_json::to_vec(&Index {
            version: VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            optimizer: self.optimizer.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + index.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("index length exceeds file size"))?;
        let index: Index = serde_json::from_slice(&bytes[16..body])?;
        if index.version != VERSION {
            return Err(bad(format!("unsupported version {}", index.version)));
        }
        let blobs = &bytes[body..];
        let mut tensors = Vec::with_capacity(index.tensors.len());
        let mut seen = BTreeMap::new();
        for e in index.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            if e.nbytes != 4 * numel as u64 {
                return Err(bad(format!("{}: {} bytes for shape {:?}", e.name, e.nbytes, e.shape)));
            }
            let start = e.offset as usize;
            let end = start
                .checked_add(e.nbytes as usize)
                .filter(|&end| end <= blobs.len())
                .ok_or_else(|| bad(format!("{}: blob out of range", e.name)))?;
            if seen.insert(e.name.clone(), ()).is_some() {
                return Err(bad(format!("duplicate tensor {}", e.name)));
            }
            let data = blobs[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            config: index.config,
            epoch: index.epoch,
            best_val_loss: index.best_val_loss,
            optimizer: index.optimizer,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Rebuilds the model; every parameter name must appear exactly once
    /// with a matching shape, and no unknown model tensors may remain.
    pub fn to_model(&self) -> Result<PvtFormer<f32>> {
        let mut model = PvtFormer::new(&self.config, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &mut PvtFormer<f32>) -> Result<()> {
        if model.config() != &self.config {
            return Err(bad("model configuration differs from checkpoint"));
        }
        let mut by_name: BTreeMap<&str, &NamedTensor> = self
            .tensors
            .iter()
            .filter(|t| !t.name.starts_with("optim."))
            .map(|t| (t.name.as_str(), t))
            .collect();
        let mut err = None;
        model.visit_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            match by_name.remove(name) {
                None => err = Some(bad(format!("missing tensor {name}"))),
                Some(t) if t.shape != p.shape => {
                    err = Some(bad(format!(
                        "{name}: shape {:?} but model expects {:?}",
                        t.shape, p.shape
                    )))
                }
                Some(t) => p.value.copy_from_slice(&t.data),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    pub fn to_optimizer(&self) -> Result<Option<Adam<f32>>> {
        let Some(h) = &self.optimizer else {
            return Ok(None);
        };
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for t in &self.tensors {
            if let Some(n) = t.name.strip_prefix(M_PREFIX) {
                m.insert(n.to_string(), t.data.clone());
            } else if let Some(n) = t.name.strip_prefix(V_PREFIX) {
                v.insert(n.to_string(), t.data.clone());
            }
        }
        let mut slots = BTreeMap::new();
        for (name, mm) in m {
            let vv = v
                .remove(&name)
                .ok_or_else(|| bad(format!("first moment of {name} has no second moment")))?;
            slots.insert(name, Moments { m: mm, v: vv });
        }
        if let Some(name) = v.keys().next() {
            return Err(bad(format!("second moment of {name} has no first moment")));
        }
        Ok(Some(Adam::from_state(h.config, h.step, slots)?))
    }
}

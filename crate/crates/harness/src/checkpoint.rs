//! Binary checkpoint.
//!
//! ```text
//! "VCXM"            magic
//! u32 LE            format version
//! u64 LE            metadata length in bytes
//! JSON              metadata, including the tensor table
//! f32 LE …          tensor data in table order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use viconex_core::autodiff::Tensor;
use viconex_core::{ModelConfig, ParamStore};

use crate::config::TrainConfig;
use crate::error::{read, write, HarnessError, Result};
use crate::optim::AdamW;

pub const MAGIC: &[u8; 4] = b"VCXM";
pub const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        if self.seed.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).ok()?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub concepts: Vec<String>,
    /// Epochs completed.
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub best_val_f1: Option<f64>,
    pub optimizer: Option<OptimizerMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    /// Builds the tensor table from `params` and `optimizer`.
    pub fn new(mut meta: CheckpointMeta, params: ParamStore<f32>, optimizer: Option<AdamW>) -> Self {
        let mut table = Vec::new();
        for (name, t) in params.params() {
            table.push(entry(name, TensorKind::Param, t.shape()));
        }
        for (name, t) in params.buffers() {
            table.push(entry(name, TensorKind::Buffer, t.shape()));
        }
        if let Some(opt) = &optimizer {
            for (name, m) in &opt.m {
                table.push(entry(name, TensorKind::AdamM, &[m.len()]));
            }
            for (name, v) in &opt.v {
                table.push(entry(name, TensorKind::AdamV, &[v.len()]));
            }
        }
        meta.tensors = table;
        meta.optimizer = optimizer.as_ref().map(|o| OptimizerMeta { step: o.step });
        Self {
            meta,
            params,
            optimizer,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let mut put = |data: &[f32]| data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for e in &self.meta.tensors {
            match e.kind {
                TensorKind::Param => put(self.params.param(&e.name).expect("table entry").data()),
                TensorKind::Buffer => put(self.params.buffer(&e.name).expect("table entry").data()),
                TensorKind::AdamM => put(&self.optimizer.as_ref().expect("optimizer").m[&e.name]),
                TensorKind::AdamV => put(&self.optimizer.as_ref().expect("optimizer").v[&e.name]),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| HarnessError::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("format version {version}, expected {VERSION}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(meta_len))
            .ok_or_else(|| bad("truncated metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(body).map_err(|e| bad(format!("metadata: {e}")))?;
        let mut off = 16 + meta_len;
        let mut params = ParamStore::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes
                .get(off..off + 4 * n)
                .ok_or_else(|| bad(format!("truncated tensor {}", e.name)))?;
            off += 4 * n;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            match e.kind {
                TensorKind::Param => params.insert_param(&e.name, tensor(&e.shape, data, &bad)?),
                TensorKind::Buffer => params.insert_buffer(&e.name, tensor(&e.shape, data, &bad)?),
                TensorKind::AdamM => {
                    m.insert(e.name.clone(), data);
                }
                TensorKind::AdamV => {
                    v.insert(e.name.clone(), data);
                }
            }
        }
        if off != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
        }
        let optimizer = meta.optimizer.as_ref().map(|o| {
            let mut opt = AdamW::new(&meta.train);
            opt.step = o.step;
            opt.m = m;
            opt.v = v;
            opt
        });
        if meta.rng.restore().is_none() {
            return Err(bad("malformed RNG state".into()));
        }
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?, path)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        self.meta.rng.restore().expect("validated on load")
    }
}

fn entry(name: &str, kind: TensorKind, shape: &[usize]) -> TensorEntry {
    TensorEntry {
        name: name.to_string(),
        kind,
        shape: shape.to_vec(),
    }
}

fn tensor(shape: &[usize], data: Vec<f32>, bad: &dyn Fn(String) -> HarnessError) -> Result<Tensor<f32>> {
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

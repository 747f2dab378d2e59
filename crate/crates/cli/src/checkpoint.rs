//! `MMTH` checkpoint files.
//!
//! Layout: the magic `MMTH`, a little-endian `u32` header length, a JSON
//! header, then the f32 little-endian payload. Tensor offsets in the header
//! are byte offsets into the payload.

use std::path::Path;

use anyhow::{bail, ensure, Context};
use mammoth::model::{Model, ModelConfig};
use mammoth::params::ParamStore;
use mammoth::Tensor;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::atomic;

pub const MAGIC: &[u8; 4] = b"MMTH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    layer: String,
    agg: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: Option<Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub store: ParamStore<f32>,
    /// Free-form provenance (run configuration, stored metrics).
    pub meta: Option<Value>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, meta: Option<Value>) -> Self {
        Checkpoint {
            config: model.cfg.clone(),
            store: model.store.clone(),
            meta,
        }
    }

    /// Rebuilds the model, checking every tensor against the config.
    pub fn model(&self) -> anyhow::Result<Model<f32>> {
        let m = Model::from_store(&self.config, &self.store).context("checkpoint does not match its config")?;
        ensure!(
            m.store.len() == self.store.len(),
            "checkpoint holds {} tensors, the config expects {}",
            self.store.len(),
            m.store.len()
        );
        Ok(m)
    }

    pub fn to_bytes(&self) -> anyhow::Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(self.store.len());
        for (_, name, t) in self.store.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            layer: self.config.layer.kind.name().to_string(),
            agg: self.config.agg.kind.name().to_string(),
            config: self.config.clone(),
            tensors,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len()).context("checkpoint header exceeds 4 GiB")?;
        let mut out = Vec::with_capacity(8 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.store.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> anyhow::Result<Self> {
        ensure!(buf.len() >= 8, "checkpoint truncated: {} bytes", buf.len());
        ensure!(&buf[..4] == MAGIC, "not a checkpoint (bad magic)");
        let len = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
        let start = 8 + len;
        ensure!(buf.len() >= start, "checkpoint header runs past end of file");
        let header: Header = serde_json::from_slice(&buf[8..start]).context("malformed checkpoint header")?;
        ensure!(
            header.format_version == FORMAT_VERSION,
            "unsupported checkpoint version {}",
            header.format_version
        );
        let payload = &buf[start..];
        let mut store = ParamStore::new();
        let mut expect = 0u64;
        for e in &header.tensors {
            let bytes = 4 * e.shape.iter().product::<usize>() as u64;
            if e.offset != expect {
                bail!("tensor {} at offset {} overlaps or leaves a gap (expected {expect})", e.name, e.offset);
            }
            let end = e.offset + bytes;
            ensure!(end <= payload.len() as u64, "tensor {} extends past end of file", e.name);
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            expect = end;
        }
        ensure!(
            expect == payload.len() as u64,
            "{} trailing payload bytes",
            payload.len() as u64 - expect
        );
        Ok(Checkpoint {
            config: header.config,
            store,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        atomic::write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let buf = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&buf).with_context(|| format!("loading {}", path.display()))
    }
}

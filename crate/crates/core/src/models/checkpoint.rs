//! Self-describing checkpoint files: magic, version, JSON header, raw payload.
//!
//! ```text
//! b"GLCK" | u32 version | u64 header_len | header (JSON) | f64 LE payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::spec::ModelSpec;
use crate::autodiff::{LayoutEntry, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"GLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub epoch: usize,
    pub seed: u64,
    pub spec: ModelSpec,
    pub layout: Vec<LayoutEntry>,
}

/// Parameter snapshot of a model at one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<f64>,
}

impl Checkpoint {
    pub fn capture(model: &Model, epoch: usize, seed: u64) -> Self {
        let params = model.params();
        let mut values = Vec::with_capacity(params.numel());
        for p in params.iter() {
            values.extend_from_slice(p.value.data());
        }
        Self {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                epoch,
                seed,
                spec: model.spec().clone(),
                layout: params.layout(),
            },
            values,
        }
    }

    pub fn epoch(&self) -> usize {
        self.header.epoch
    }

    /// Rebuilds the model and loads the stored parameters. Noise streams
    /// restart from the checkpoint seed.
    pub fn restore(&self) -> Result<Model> {
        let mut model = Model::build(&self.header.spec, self.header.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        if model.params().layout() != self.header.layout {
            return Err(Error::usage("checkpoint layout does not match the model"));
        }
        let tensors = self
            .header
            .layout
            .iter()
            .map(|e| Tensor::new(e.shape.clone(), self.values[e.offset..e.offset + e.len].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        model.params_mut().set_values(tensors)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let bad = |detail: String| Error::format(file, detail);
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing checkpoint magic at offset 0".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("header length {header_len} exceeds file size")))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| bad(format!("header at offset 16: {e}")))?;
        let payload = &bytes[body..];
        let expected: usize = header.layout.iter().map(|e| e.len).sum();
        if payload.len() != expected * 8 {
            return Err(bad(format!(
                "payload at offset {body} holds {} bytes, layout needs {}",
                payload.len(),
                expected * 8
            )));
        }
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

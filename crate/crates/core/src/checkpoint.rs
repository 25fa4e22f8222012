//! Model checkpoint files.
//!
//! Layout: one line of compact JSON (the header) terminated by `\n`, then
//! the parameter blocks as little-endian f32 in layer order, weights before
//! bias. Header offsets are byte offsets into the data section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::layers::LayerParams;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epochs_completed: usize,
    pub final_lr: f64,
    /// SHA-256 of the model config's JSON encoding.
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Block {
    layer: usize,
    name: String,
    role: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    provenance: Provenance,
    blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model<f32>,
    pub provenance: Provenance,
}

pub fn config_digest(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

impl ModelCheckpoint {
    pub fn new(model: Model<f32>, seed: u64, epochs_completed: usize, final_lr: f64) -> Self {
        let config_digest = config_digest(model.config());
        Self {
            model,
            provenance: Provenance {
                seed,
                epochs_completed,
                final_lr,
                config_digest,
            },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks = Vec::new();
        let mut data = Vec::with_capacity(self.model.param_count() * 4);
        for (i, layer) in self.model.layers().iter().enumerate() {
            let Some(p) = &layer.params else { continue };
            for (role, t) in [("weights", &p.weights), ("bias", &p.bias)] {
                blocks.push(Block {
                    layer: i,
                    name: layer.spec.name().to_string(),
                    role: role.to_string(),
                    shape: t.shape().to_vec(),
                    offset: data.len(),
                    len: t.len() * 4,
                });
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.model.config().clone(),
            provenance: self.provenance.clone(),
            blocks,
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        bytes.extend_from_slice(&data);
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..split])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let digest = config_digest(&header.config);
        if digest != header.provenance.config_digest {
            return Err(Error::Checkpoint("config digest does not match header config".into()));
        }
        let data = &bytes[split + 1..];
        let specs = header.config.layer_specs();
        let mut params: Vec<Option<LayerParams<f32>>> = vec![None; specs.len()];
        let mut pending: Option<(usize, Tensor<f32>)> = None;
        let mut expected_end = 0;
        for block in &header.blocks {
            let spec = specs.get(block.layer).ok_or_else(|| {
                Error::Checkpoint(format!("block for layer {} beyond model depth", block.layer))
            })?;
            let (ws, bs) = spec.param_shapes().ok_or_else(|| {
                Error::Checkpoint(format!("layer {} ({}) has no parameters", block.layer, spec.name()))
            })?;
            let expected = if block.role == "weights" { ws } else { bs };
            if block.shape != expected {
                return Err(Error::Checkpoint(format!(
                    "layer {} ({}) {} shape {:?} does not match config shape {:?}",
                    block.layer,
                    spec.name(),
                    block.role,
                    block.shape,
                    expected
                )));
            }
            let count: usize = block.shape.iter().product();
            if block.len != count * 4 || block.offset != expected_end {
                return Err(Error::Checkpoint(format!(
                    "layer {} {} block has inconsistent offset/length",
                    block.layer, block.role
                )));
            }
            let raw = data.get(block.offset..block.offset + block.len).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "truncated data for layer {} {} (need {} bytes, file has {})",
                    block.layer,
                    block.role,
                    block.offset + block.len,
                    data.len()
                ))
            })?;
            expected_end = block.offset + block.len;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            let tensor = Tensor::new(block.shape.clone(), values)?;
            match (block.role.as_str(), pending.take()) {
                ("weights", None) => pending = Some((block.layer, tensor)),
                ("bias", Some((layer, weights))) if layer == block.layer => {
                    params[layer] = Some(LayerParams { weights, bias: tensor });
                }
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "unexpected {} block for layer {}",
                        block.role, block.layer
                    )))
                }
            }
        }
        if expected_end != data.len() {
            return Err(Error::Checkpoint(format!(
                "data section has {} bytes, blocks cover {expected_end}",
                data.len()
            )));
        }
        let model = Model::from_parts(header.config, params)?;
        Ok(Self {
            model,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and checks the stored parameters against `config`, naming the
    /// first layer whose shapes differ.
    pub fn load_for_config(path: &Path, config: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        let want = config.layer_specs();
        let have = ckpt.model.config().layer_specs();
        for (i, (a, b)) in want.iter().zip(&have).enumerate() {
            if a.param_shapes() != b.param_shapes() {
                return Err(Error::Checkpoint(format!(
                    "layer {i} ({}) expected shapes {:?}, checkpoint has {:?}",
                    a.name(),
                    a.param_shapes(),
                    b.param_shapes()
                )));
            }
        }
        if want.len() != have.len() {
            return Err(Error::Checkpoint(format!(
                "config has {} layers, checkpoint {}",
                want.len(),
                have.len()
            )));
        }
        Ok(ckpt)
    }
}

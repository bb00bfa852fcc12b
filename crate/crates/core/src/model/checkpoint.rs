//! Checkpoint file layout, all integers little-endian:
//!
//! ```text
//! b"HWCK" | u32 version | u64 header_len | header (JSON, UTF-8) | f64 data…
//! ```
//!
//! The header holds the model config, PAL config, pattern assignments and the
//! tensor table `[{name, rows, cols}]` in [`Params::named`] order; the data
//! section is every tensor's row-major values in that same order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadAssignment, Model, ModelConfig, PalParams, Params};
use crate::error::{Error, Result};
use crate::pal::PalConfig;
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"HWCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    pal: Option<PalConfig>,
    assignments: Vec<HeadAssignment>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let named = self.params.named();
        let header = Header {
            config: self.config,
            pal: self.pal.clone(),
            assignments: self.assignments.clone(),
            tensors: named
                .iter()
                .map(|(name, m)| TensorEntry {
                    name: name.clone(),
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in named {
            for x in &m.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..header_end]).map_err(|e| Error::json("checkpoint header", e))?;

        header.config.validate()?;
        let mut params = Params::init(&header.config, 0);
        if let Some(pal) = &header.pal {
            pal.validate(header.config.d_model)?;
            let d_pal = pal.resolved_d_pal(header.config.d_model);
            for layer in &mut params.layers {
                layer.pal = Some(PalParams {
                    down: Mat::zeros(header.config.d_model, d_pal),
                    wq: Mat::zeros(d_pal, d_pal),
                    wk: Mat::zeros(d_pal, d_pal),
                    wv: Mat::zeros(d_pal, d_pal),
                    wo: Mat::zeros(d_pal, d_pal),
                    up: Mat::zeros(d_pal, header.config.d_model),
                });
            }
        }

        let mut data = &bytes[header_end..];
        let slots = params.named_mut();
        if slots.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, header lists {}",
                slots.len(),
                header.tensors.len()
            )));
        }
        for ((name, m), entry) in slots.into_iter().zip(&header.tensors) {
            if name != entry.name || m.rows != entry.rows || m.cols != entry.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {} ({}x{}) does not match expected {name} ({}x{})",
                    entry.name, entry.rows, entry.cols, m.rows, m.cols
                )));
            }
            let n = m.data.len() * 8;
            if data.len() < n {
                return Err(bad("truncated tensor data"));
            }
            for (x, chunk) in m.data.iter_mut().zip(data[..n].chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
            data = &data[n..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }

        let mut model = Model {
            config: header.config,
            params,
            assignments: Vec::new(),
            pal: header.pal,
        };
        model.set_assignments(header.assignments)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

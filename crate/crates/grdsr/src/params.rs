//! Flat named parameter store and its on-disk format.
//!
//! A model serializes to a single file: one line of JSON listing entry
//! names, shapes and trainable flags, followed by every entry's values as
//! contiguous little-endian f32, concatenated in entry order. Running
//! batch-norm statistics live in the same store as non-trainable entries,
//! so a saved file captures the complete inference state.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GrdError, Result};

pub const PARAMS_FORMAT_TAG: &str = "grdsr-params-v1";

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    pub entries: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    byte_order: String,
    dtype: String,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

impl ModelParams {
    /// Appends an entry and returns its index.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
        trainable: bool,
    ) -> usize {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "parameter shape/data mismatch");
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            data,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn trainable_values(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.data.len())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = Manifest {
            format: PARAMS_FORMAT_TAG.to_string(),
            byte_order: "little".to_string(),
            dtype: "f32".to_string(),
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    trainable: e.trainable,
                })
                .collect(),
        };
        let header = serde_json::to_string(&manifest)
            .map_err(|e| GrdError::format(format!("manifest encoding failed: {e}")))?;

        let mut payload = Vec::with_capacity(self.total_values() * 4);
        for entry in &self.entries {
            for &v in &entry.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }

        // write to a sibling temp file first so aborted runs never leave a
        // half-written model behind
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(header.as_bytes())?;
            f.write_all(b"\n")?;
            f.write_all(&payload)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| GrdError::format("missing manifest line".to_string()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| GrdError::format(format!("manifest decoding failed: {e}")))?;
        if manifest.format != PARAMS_FORMAT_TAG {
            return Err(GrdError::format(format!(
                "unknown format tag '{}'",
                manifest.format
            )));
        }
        if manifest.byte_order != "little" || manifest.dtype != "f32" {
            return Err(GrdError::format(format!(
                "unsupported payload encoding {}/{}",
                manifest.byte_order, manifest.dtype
            )));
        }

        let payload = &bytes[newline + 1..];
        let expected: usize = manifest
            .entries
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum::<usize>()
            * 4;
        if payload.len() != expected {
            return Err(GrdError::format(format!(
                "payload length mismatch: expected {expected} bytes, found {}",
                payload.len()
            )));
        }

        let mut entries = Vec::with_capacity(manifest.entries.len());
        let mut offset = 0usize;
        for me in manifest.entries {
            let numel: usize = me.shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                let at = offset + i * 4;
                data.push(f32::from_le_bytes([
                    payload[at],
                    payload[at + 1],
                    payload[at + 2],
                    payload[at + 3],
                ]));
            }
            offset += numel * 4;
            entries.push(ParamEntry {
                name: me.name,
                shape: me.shape,
                data,
                trainable: me.trainable,
            });
        }
        Ok(ModelParams { entries })
    }
}

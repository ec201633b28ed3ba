//! Checkpoint files: one line of compact JSON describing the tensors, then
//! the raw little-endian `f32` payloads in header order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::real::Real;

pub const FORMAT: &str = "fapnet-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata, e.g. the model configuration.
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub payloads: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_store<F: Real>(store: &ParamStore<F>, config_hash: &str, meta: serde_json::Value) -> Self {
        let tensors = store
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec() })
            .collect();
        let payloads = store
            .iter()
            .map(|p| p.tensor.values().iter().map(|v| v.as_f64() as f32).collect())
            .collect();
        Self {
            header: CheckpointHeader { format: FORMAT.into(), config_hash: config_hash.into(), tensors, meta },
            payloads,
        }
    }

    /// Copies payloads into a store with the same tensor names and shapes.
    pub fn load_into<F: Real>(&self, store: &mut ParamStore<F>) -> Result<()> {
        if store.len() != self.header.tensors.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.header.tensors.len(),
                store.len()
            )));
        }
        for ((p, entry), payload) in store.iter_mut().zip(&self.header.tensors).zip(&self.payloads) {
            if p.name != entry.name || p.tensor.shape() != entry.shape.as_slice() {
                return Err(AutodiffError::Checkpoint(format!(
                    "tensor {} {:?} does not match model tensor {} {:?}",
                    entry.name,
                    entry.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
            for (dst, &src) in p.tensor.values_mut().iter_mut().zip(payload) {
                *dst = F::of(src as f64);
            }
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let json = serde_json::to_string(&self.header)?;
        w.write_all(json.as_bytes())?;
        w.write_all(b"\n")?;
        for payload in &self.payloads {
            for v in payload {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(AutodiffError::Checkpoint("missing header terminator".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&line[..line.len() - 1])?;
        if header.format != FORMAT {
            return Err(AutodiffError::Checkpoint(format!("unsupported format {:?}", header.format)));
        }
        let mut payloads = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            r.read_exact(&mut bytes)
                .map_err(|e| AutodiffError::Checkpoint(format!("payload for {} truncated: {e}", entry.name)))?;
            payloads.push(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect());
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(AutodiffError::Checkpoint("trailing bytes after payloads".into()));
        }
        Ok(Self { header, payloads })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(File::open(path)?)
    }
}

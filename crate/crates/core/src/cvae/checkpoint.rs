//! Checkpoint format: an 8-byte little-endian header length, a JSON header,
//! then every tensor as little-endian `f64` in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::context::{AgentTable, ContextMode};
use super::params::{HyperParams, ModelDims, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "cavae-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: String,
    vocab_size: usize,
    context_mode: ContextMode,
    seed: u64,
    dims: ModelDims,
    hyperparams: HyperParams,
    agents: AgentTable,
    tensors: Vec<TensorHeader>,
}

/// A trained model with everything needed to score new sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hyperparams: HyperParams,
    pub mode: ContextMode,
    pub agents: AgentTable,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            version: CHECKPOINT_VERSION.to_string(),
            vocab_size: self.params.dims.vocab,
            context_mode: self.mode,
            seed: self.hyperparams.seed,
            dims: self.params.dims,
            hyperparams: self.hyperparams.clone(),
            agents: self.agents.clone(),
            tensors: self
                .params
                .named()
                .into_iter()
                .map(|(name, t)| TensorHeader { name: name.to_string(), rows: t.rows, cols: t.cols })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in self.params.named() {
            let mut buf = Vec::with_capacity(t.data.len() * 8);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 64 << 20 {
            return Err(Error::Checkpoint(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {:?} does not match {CHECKPOINT_VERSION:?}",
                header.version
            )));
        }
        let mut params = ModelParams::zeros(header.dims);
        let expected: Vec<(&str, usize, usize)> = params.named().into_iter().map(|(n, t)| (n, t.rows, t.cols)).collect();
        let found: Vec<(&str, usize, usize)> = header.tensors.iter().map(|t| (t.name.as_str(), t.rows, t.cols)).collect();
        if expected != found {
            return Err(Error::Checkpoint("tensor table does not match the declared dimensions".into()));
        }
        for (_, t) in params.named_mut() {
            let mut buf = vec![0u8; t.data.len() * 8];
            r.read_exact(&mut buf)?;
            for (v, chunk) in t.data.iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self { hyperparams: header.hyperparams, mode: header.context_mode, agents: header.agents, params })
    }
}

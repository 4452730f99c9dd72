//! `agent.ckpt`: the online network's weights behind a small header.
//!
//! Layout, all integers u32 little-endian:
//! magic `PAIAASCK`, version, length-prefixed JSON echo of the DQN config,
//! layer count, (inputs, outputs) per layer, then for each layer its weights
//! (input-major) and biases as f64 little-endian.

use paiaas_core::agents::network::{Dense, Mlp};
use paiaas_core::agents::{DqnAgent, DqnConfig};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"PAIAASCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("trailing bytes after the last tensor")]
    Trailing,
    #[error("config echo: {0}")]
    Config(#[from] serde_json::Error),
    #[error("layer shapes do not chain")]
    Shape,
}

pub fn encode(agent: &DqnAgent) -> Vec<u8> {
    let net = agent.network();
    let config = serde_json::to_vec(agent.config()).expect("DQN config serializes");
    let mut out = Vec::with_capacity(64 + config.len() + 8 * net.num_params());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    put_u32(&mut out, net.layers().len() as u32);
    for layer in net.layers() {
        put_u32(&mut out, layer.inputs as u32);
        put_u32(&mut out, layer.outputs as u32);
    }
    for layer in net.layers() {
        for v in layer.weights.iter().chain(&layer.biases) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(DqnConfig, Mlp), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.u32()? as usize;
    let config: DqnConfig = serde_json::from_slice(r.take(len)?)?;
    let count = r.u32()? as usize;
    let mut shapes = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        shapes.push((r.u32()? as usize, r.u32()? as usize));
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (inputs, outputs) in shapes {
        let weights = r.f64s(inputs.checked_mul(outputs).ok_or(CheckpointError::Shape)?)?;
        let biases = r.f64s(outputs)?;
        layers.push(Dense { inputs, outputs, weights, biases });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Trailing);
    }
    let net = Mlp::from_layers(layers).ok_or(CheckpointError::Shape)?;
    Ok((config, net))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

//! Binary checkpoint format for [`MlpDenoiser`].
//!
//! Little-endian throughout:
//!
//! ```text
//! magic        4 bytes  "NDC1"
//! version      u8       1
//! dim          u32
//! num_classes  u32
//! activation   u8       0 = tanh, 1 = relu, 2 = silu
//! sigma_data   f64
//! num_layers   u32
//! per layer:
//!   inputs     u32
//!   outputs    u32
//!   weights    outputs·inputs × f64, row-major
//!   bias       outputs × f64
//! ```

use std::fs;
use std::path::Path;

use super::mlp::{Activation, Layer, MlpDenoiser};
use crate::error::{NdcError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NDC1";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint(model: &MlpDenoiser) -> Vec<u8> {
    let mut buf = Vec::with_capacity(32 + 8 * model.num_params());
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.push(CHECKPOINT_VERSION);
    buf.extend_from_slice(&(model.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(model.num_classes as u32).to_le_bytes());
    buf.push(model.activation.tag());
    buf.extend_from_slice(&model.sigma_data.to_le_bytes());
    buf.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for l in &model.layers {
        buf.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        buf.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        for w in l.weights.iter().chain(&l.bias) {
            buf.extend_from_slice(&w.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(NdcError::Truncated { offset: self.pos, needed: n - remaining });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| NdcError::MalformedCheckpoint("layer too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<MlpDenoiser> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(NdcError::BadMagic { found: magic, expected: CHECKPOINT_MAGIC });
    }
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(NdcError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let dim = r.u32()?;
    let num_classes = r.u32()?;
    let tag = r.u8()?;
    let activation = Activation::from_tag(tag)
        .ok_or_else(|| NdcError::MalformedCheckpoint(format!("unknown activation tag {tag}")))?;
    let sigma_data = r.f64()?;
    let n_layers = r.u32()?;
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let inputs = r.u32()?;
        let outputs = r.u32()?;
        let count = inputs
            .checked_mul(outputs)
            .ok_or_else(|| NdcError::MalformedCheckpoint("layer too large".into()))?;
        let weights = r.f64s(count)?;
        let bias = r.f64s(outputs)?;
        layers.push(Layer { inputs, outputs, weights, bias });
    }
    if r.pos != bytes.len() {
        return Err(NdcError::MalformedCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    MlpDenoiser::from_parts(dim, num_classes, sigma_data, activation, layers)
}

pub fn save_checkpoint(model: &MlpDenoiser, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MlpDenoiser> {
    read_checkpoint(&fs::read(path)?)
}

//! Versioned binary checkpoints.
//!
//! Layout (integers little-endian): `b"FBCK"`, `u32` version, `u32` header
//! length, a JSON header with the method, config and trace, `u32` tensor
//! count, then per tensor: `u32` name length, name, `u8` kind (0 parameter,
//! 1 buffer), `u32` rank, `u64` dims, `f64` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bvae::BvaeModel;
use crate::error::{Error, Result};
use crate::experiment::{Method, TrainedModel};
use crate::fbc::{FbcConfig, FbcModel, TraceRow};
use crate::nn::ParameterSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    method: Method,
    config: FbcConfig,
    trace: Vec<TraceRow>,
}

fn params_of(model: &TrainedModel) -> &ParameterSet {
    match model {
        TrainedModel::Fbc(m) => m.params(),
        TrainedModel::Bvae(m) => m.params(),
    }
}

pub fn encode_checkpoint(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        method: model.method(),
        config: model.config().clone(),
        trace: model.trace().to_vec(),
    })?;
    let params = params_of(model);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let tensors: Vec<(u8, &str, &Tensor)> =
        params.iter().map(|(n, t)| (0, n, t)).chain(params.buffers().map(|(n, t)| (1, n, t))).collect();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (kind, name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(kind);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)?;
    let mut params = ParameterSet::new();
    for _ in 0..r.u32()? {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let kind = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        match kind {
            0 => params.insert(name, t),
            1 => params.insert_buffer(name, t),
            k => return Err(Error::Checkpoint(format!("tensor {name} has unknown kind {k}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(match header.method {
        Method::Fbc => TrainedModel::Fbc(FbcModel::from_parts(header.config, params, header.trace)?),
        Method::Bvae => TrainedModel::Bvae(BvaeModel::from_parts(header.config, params, header.trace)?),
    })
}

pub fn save_checkpoint(path: &Path, model: &TrainedModel) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::make_synthetic_unfair_tabular;

    #[test]
    fn round_trip_preserves_behaviour() {
        let data = make_synthetic_unfair_tabular(64, 9, 4, 0.8, 0).unwrap().batch;
        let config = FbcConfig::synthetic().with_steps(5).with_beta(0.5);
        let model = TrainedModel::Fbc(crate::fbc::train(config, &data).unwrap());
        let bytes = encode_checkpoint(&model).unwrap();
        assert_eq!(&bytes[..4], b"FBCK");
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        assert_eq!(back.represent(&data.features).unwrap(), model.represent(&data.features).unwrap());
        assert_eq!(back.trace(), model.trace());
        assert_eq!(back.config(), model.config());
    }

    #[test]
    fn rejects_damage() {
        let model = TrainedModel::Bvae(BvaeModel::new(FbcConfig::compas()).unwrap());
        let bytes = encode_checkpoint(&model).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}

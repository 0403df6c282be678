//! Binary model checkpoints.
//!
//! Layout: the 8-byte magic `CMAAECK\0`, a little-endian `u32` format
//! version, a little-endian `u32` header length, a JSON header, and then
//! every parameter tensor as raw little-endian `f64` in [`Params::tensors`]
//! order. Round trips are bit exact.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frm::RepairMode;
use crate::memory::MemoryBank;
use crate::model::{ArchConfig, CmaAe, Params, Stage};

pub const MAGIC: &[u8; 8] = b"CMAAECK\0";
pub const VERSION: u32 = 1;
const MAX_HEADER: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    stage: Stage,
    memory_frozen: bool,
    tensor_lengths: Vec<usize>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// Lengths of the parameter tensors implied by `arch`, in checkpoint order,
/// or `None` on arithmetic overflow.
pub fn tensor_lengths(arch: &ArchConfig) -> Option<Vec<usize>> {
    let mut out = Vec::new();
    let mut in_ch = arch.in_channels;
    for l in &arch.layers {
        out.push(l.channels.checked_mul(in_ch)?.checked_mul(l.kernel.checked_mul(l.kernel)?)?);
        out.push(l.channels);
        in_ch = l.channels;
    }
    let side = *arch.feature_sizes(arch.patch_size).last()?;
    let flat = in_ch.checked_mul(side.checked_mul(side)?)?;
    let c = arch.latent_dim;
    out.push(flat.checked_mul(c)?);
    out.push(c);
    out.push(c.checked_mul(flat)?);
    out.push(flat);
    for (i, l) in arch.layers.iter().enumerate().rev() {
        let out_ch = if i == 0 {
            arch.in_channels
        } else {
            arch.layers[i - 1].channels
        };
        out.push(l.channels.checked_mul(out_ch)?.checked_mul(l.kernel.checked_mul(l.kernel)?)?);
        out.push(out_ch);
    }
    out.push(arch.memory_items.checked_mul(c)?);
    let gates = match arch.repair {
        RepairMode::Gated => 3,
        RepairMode::Concat => 1,
        RepairMode::MemoryOnly => 0,
    };
    for _ in 0..gates {
        out.push(c.checked_mul(2)?.checked_mul(c)?);
        out.push(c);
    }
    Some(out)
}

/// Serializes the model and free-form string metadata.
pub fn encode(model: &CmaAe, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let tensors = model.params.tensors();
    let header = Header {
        arch: model.arch.clone(),
        stage: model.stage,
        memory_frozen: model.params.memory.is_frozen(),
        tensor_lengths: tensors.iter().map(|(_, t)| t.len()).collect(),
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let total: usize = header.tensor_lengths.iter().sum();
    let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_le_bytes(b.try_into().unwrap())),
        None => bad("truncated preamble"),
    }
}

/// Parses a checkpoint produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<(CmaAe, BTreeMap<String, String>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return bad("not a checkpoint file");
    }
    let version = read_u32(bytes, 8)?;
    if version != VERSION {
        return bad(format!("unsupported checkpoint version {version}"));
    }
    let hlen = read_u32(bytes, 12)? as usize;
    if hlen > MAX_HEADER {
        return bad("header too large");
    }
    let Some(hbytes) = bytes.get(16..16 + hlen) else {
        return bad("truncated header");
    };
    let header: Header =
        serde_json::from_slice(hbytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    header
        .arch
        .validate()
        .map_err(|e| Error::Checkpoint(format!("bad architecture: {e}")))?;
    let Some(expected) = tensor_lengths(&header.arch) else {
        return bad("architecture is too large");
    };
    if expected != header.tensor_lengths {
        return bad("tensor lengths do not match the architecture");
    }
    let payload = &bytes[16 + hlen..];
    let total = expected.iter().try_fold(0usize, |a, &b| a.checked_add(b));
    if total.and_then(|t| t.checked_mul(8)) != Some(payload.len()) {
        return bad(format!(
            "payload of {} bytes does not match the architecture",
            payload.len()
        ));
    }

    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut tensors: Vec<Vec<f64>> = expected
        .iter()
        .map(|&n| values.by_ref().take(n).collect())
        .collect();
    let mem_index = 4 * header.arch.layers.len() + 4;
    let items = Array2::from_shape_vec(
        (header.arch.memory_items, header.arch.latent_dim),
        std::mem::take(&mut tensors[mem_index]),
    )
    .expect("length checked");
    let memory = MemoryBank::new(items).map_err(|e| Error::Checkpoint(format!("bad memory bank: {e}")))?;
    let mut params = Params::zeros(&header.arch, memory)?;
    for (i, (dst, src)) in params.tensors_for_restore().into_iter().zip(&tensors).enumerate() {
        if i != mem_index {
            dst.copy_from_slice(src);
        }
    }
    if header.memory_frozen {
        params.memory.freeze();
    }
    let model = CmaAe::from_params(header.arch, params, header.stage)?;
    Ok((model, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: RepairMode) -> ArchConfig {
        use crate::model::LayerSpec;
        ArchConfig {
            patch_size: 16,
            layers: vec![LayerSpec::new(4, 2, 3), LayerSpec::new(3, 1, 3), LayerSpec::new(4, 2, 4)],
            latent_dim: 6,
            memory_items: 4,
            repair: mode,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn lengths_match_params() {
        for mode in [RepairMode::Gated, RepairMode::Concat, RepairMode::MemoryOnly] {
            let arch = tiny(mode);
            let m = CmaAe::new(arch.clone(), 1).unwrap();
            let got: Vec<usize> = m.params.tensors().iter().map(|(_, t)| t.len()).collect();
            assert_eq!(tensor_lengths(&arch).unwrap(), got);
        }
        let d = ArchConfig::default();
        let m = CmaAe::new(d.clone(), 0).unwrap();
        let got: Vec<usize> = m.params.tensors().iter().map(|(_, t)| t.len()).collect();
        assert_eq!(tensor_lengths(&d).unwrap(), got);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut m = CmaAe::new(tiny(RepairMode::Gated), 3).unwrap();
        m.stage = Stage::Stage2Complete;
        m.params.memory.freeze();
        let mut meta = BTreeMap::new();
        meta.insert("note".to_string(), "x".to_string());
        let bytes = encode(&m, &meta);
        let (back, meta2) = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(meta2, meta);
        assert_eq!(encode(&back, &meta2), bytes);
    }

    #[test]
    fn corrupt_inputs_fail_cleanly() {
        let m = CmaAe::new(tiny(RepairMode::Concat), 3).unwrap();
        let bytes = encode(&m, &BTreeMap::new());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode(&bytes[..10]).is_err());
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(decode(&v).is_err());
        let mut v = bytes.clone();
        v.push(0);
        assert!(decode(&v).is_err());
        assert!(decode(b"").is_err());
    }
}

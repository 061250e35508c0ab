//! Model checkpoints.
//!
//! Layout: the 8-byte magic `MEMLOC01`, a little-endian u64 header length, a
//! UTF-8 JSON header (format version, model config, run metadata, and a tensor
//! manifest of name/shape/byte-offset/element-count), then every parameter's
//! raw f64 little-endian payload concatenated in manifest order. Writing the
//! same model twice produces byte-identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{manifest_shapes, ModelConfig, TransformerLM};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"MEMLOC01";
const FORMAT_VERSION: u32 = 1;

/// Run provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Seed the run was launched with.
    pub seed: u64,
    /// Hash of the effective run configuration (hex).
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
    /// Element count (shape product).
    len: u64,
}

/// Serialize to the checkpoint byte format.
pub fn checkpoint_bytes(model: &TransformerLM, meta: &CheckpointMeta) -> Vec<u8> {
    let named = model.named_params();
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0u64;
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len() as u64,
        });
        offset += (t.len() * 8) as u64;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.cfg.clone(),
        meta: meta.clone(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(16 + header_json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in &named {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(
    model: &TransformerLM,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    crate::report::atomic_write(path, &checkpoint_bytes(model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(TransformerLM, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(TransformerLM, CheckpointMeta)> {
    if bytes.len() < 16 {
        return Err(Error::Format("checkpoint shorter than its fixed header".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .ok_or_else(|| Error::Format("header length overflows".into()))?;
    if payload_start > bytes.len() {
        return Err(Error::Format(format!(
            "header claims {header_len} bytes but file has {}",
            bytes.len() - 16
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    header.config.validate()?;

    let expected = manifest_shapes(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, config requires {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let payload = &bytes[payload_start..];
    let mut params = Vec::with_capacity(expected.len());
    let mut cursor = 0u64;
    for (entry, (want_name, want_shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != want_name || &entry.shape != want_shape {
            return Err(Error::Format(format!(
                "manifest entry `{}` {:?} does not match expected `{want_name}` {want_shape:?}",
                entry.name, entry.shape
            )));
        }
        let len: usize = entry.shape.iter().product();
        if entry.len as usize != len || entry.offset != cursor {
            return Err(Error::Format(format!(
                "manifest entry `{}` has inconsistent offset/len",
                entry.name
            )));
        }
        let start = entry.offset as usize;
        let end = start + len * 8;
        if end > payload.len() {
            return Err(Error::Format(format!(
                "payload truncated inside tensor `{}`",
                entry.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(entry.shape.clone(), data)?);
        cursor = end as u64;
    }
    if cursor as usize != payload.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            payload.len() - cursor as usize
        )));
    }
    Ok((TransformerLM { cfg: header.config, params }, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TransformerLM {
        let cfg = ModelConfig { layers: 2, d_model: 8, d_hidden: 12, heads: 2, vocab: 256, context: 16 };
        TransformerLM::new_random(cfg, 77).unwrap()
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta { seed: 77, config_hash: "abc123".into() }
    }

    #[test]
    fn roundtrip_preserves_weights_and_meta() {
        let m = model();
        let bytes = checkpoint_bytes(&m, &meta());
        let (loaded, got_meta) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(loaded.weights_hash(), m.weights_hash());
        assert_eq!(got_meta, meta());
        assert_eq!(loaded.cfg, m.cfg);
        // exact bitwise equality of every parameter
        for ((_, a), (_, b)) in m.named_params().iter().zip(loaded.named_params().iter()) {
            let bits_a: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn serialization_is_byte_stable() {
        let m = model();
        assert_eq!(checkpoint_bytes(&m, &meta()), checkpoint_bytes(&m, &meta()));
    }

    #[test]
    fn save_and_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let m = model();
        save_checkpoint(&m, &meta(), &path).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.weights_hash(), m.weights_hash());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = model();
        let good = checkpoint_bytes(&m, &meta());

        assert!(checkpoint_from_bytes(&good[..10]).is_err(), "truncated fixed header");

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(checkpoint_from_bytes(&bad_magic).is_err(), "magic");

        let truncated = &good[..good.len() - 8];
        assert!(checkpoint_from_bytes(truncated).is_err(), "truncated payload");

        let mut extended = good.clone();
        extended.extend_from_slice(&[0u8; 8]);
        assert!(checkpoint_from_bytes(&extended).is_err(), "trailing bytes");

        let mut bad_len = good;
        bad_len[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(checkpoint_from_bytes(&bad_len).is_err(), "absurd header length");
    }

    #[test]
    fn manifest_mismatch_is_rejected() {
        // Claim a different config than the tensors were written for.
        let m = model();
        let bytes = checkpoint_bytes(&m, &meta());
        // splice the other config into the header
        let header_len =
            u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[16..16 + header_len]).unwrap();
        header["config"]["d_hidden"] = serde_json::json!(13);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut tampered = Vec::new();
        tampered.extend_from_slice(&bytes[..8]);
        tampered.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        tampered.extend_from_slice(&new_header);
        tampered.extend_from_slice(&bytes[16 + header_len..]);
        assert!(checkpoint_from_bytes(&tampered).is_err());
    }
}

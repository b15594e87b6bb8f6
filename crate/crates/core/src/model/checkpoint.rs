//! Binary checkpoint format.
//!
//! Layout: 8-byte magic `CABERT01`, a length-prefixed UTF-8 JSON config
//! record, then every parameter in stable name order as
//! `(u32 name length, name bytes, u32 rank, u32 dims..., raw f32 LE values)`,
//! and finally a CRC-32 (IEEE) of all preceding bytes as a u32 LE trailer.
//! Round-trips are bitwise lossless; the trailing checksum doubles as the
//! served model's identity string.

use super::{CaBertModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CABERT01";

/// Serializes the model to `path`.
pub fn save_checkpoint(model: &CaBertModel<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);

    let config_json = serde_json::to_vec(&model.config)
        .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
    buf.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config_json);

    for param in model.parameters() {
        let name = param.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = param.value.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in shape {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in param.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    let checksum = crc32fast::hash(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let bytes = self.take(4, what)?;
        Ok(u32::from_le_bytes(bytes.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Loads and validates a checkpoint: magic, config, per-parameter names and
/// shapes against the config, byte count, and the CRC-32 trailer.
pub fn load_checkpoint(path: &Path) -> Result<CaBertModel<f32>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }

    let config_len = r.u32_le("config length")? as usize;
    let config_bytes = r.take(config_len, "config record")?;
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| Error::Checkpoint(format!("config record: {e}")))?;
    config.validate().map_err(|e| Error::Checkpoint(format!("config record: {e}")))?;

    let mut model = CaBertModel::<f32>::zeroed(config);
    for param in model.parameters_mut() {
        let name_len = r.u32_le("parameter name length")? as usize;
        let name_bytes = r.take(name_len, "parameter name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        if name != param.name {
            return Err(Error::Checkpoint(format!(
                "parameter order mismatch: expected {:?}, found {name:?}",
                param.name
            )));
        }
        let rank = r.u32_le("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32_le("parameter dimension")? as usize);
        }
        if shape != param.value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {:?}: declared shape {shape:?} does not match expected {:?}",
                param.name,
                param.value.shape()
            )));
        }
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, &format!("values of {:?}", param.name))?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        param.value = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("parameter {:?}: {e}", param.name)))?;
        param.zero_grad();
    }

    if r.remaining() != 4 {
        return Err(Error::Checkpoint(format!(
            "expected a 4-byte checksum trailer, found {} bytes",
            r.remaining()
        )));
    }
    let stored = r.u32_le("checksum")?;
    let computed = crc32fast::hash(&buf[..buf.len() - 4]);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }
    Ok(model)
}

/// The checkpoint's identity: its CRC-32 trailer rendered as 8 hex digits.
/// Validates the file before answering.
pub fn checkpoint_id(path: &Path) -> Result<String> {
    let buf = std::fs::read(path)?;
    if buf.len() < 12 {
        return Err(Error::Checkpoint("file too short for a checkpoint".into()));
    }
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&buf[..buf.len() - 4]);
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:08x}, computed {computed:08x}"
        )));
    }
    Ok(format!("{stored:08x}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{build_vocab, encode, TokenSequence};

    fn toy_model() -> CaBertModel<f32> {
        let config = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_len: 6,
            dropout_p: 0.1,
            n_classes: 2,
        };
        CaBertModel::init(config, 99).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = toy_model();
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(model.config, loaded.config);
        for (a, b) in model.parameters().iter().zip(loaded.parameters()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            // bitwise equality, not approximate
            let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }

        let vocab = build_vocab(&["alpha bravo charlie"], 16, 1).unwrap();
        let seq = encode(&["alpha bravo"], &vocab, 6).unwrap();
        let refs: Vec<&TokenSequence> = vec![&seq];
        let l1 = model.forward_eval(&refs).unwrap();
        let l2 = loaded.forward_eval(&refs).unwrap();
        let b1: Vec<u32> = l1.data().iter().map(|v| v.to_bits()).collect();
        let b2: Vec<u32> = l2.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(b1, b2);
    }

    #[test]
    fn save_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let model = toy_model();
        save_checkpoint(&model, &p1).unwrap();
        save_checkpoint(&model, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&toy_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_the_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = toy_model();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // First parameter is "embedding.token": magic(8) + cfg_len(4) + config
        // + name_len(4) + name + rank(4) + dim0(4). Bump dim0.
        let config_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let name_len_at = 12 + config_len;
        let name_len =
            u32::from_le_bytes(bytes[name_len_at..name_len_at + 4].try_into().unwrap()) as usize;
        let dim0_at = name_len_at + 4 + name_len + 4;
        let dim0 = u32::from_le_bytes(bytes[dim0_at..dim0_at + 4].try_into().unwrap());
        bytes[dim0_at..dim0_at + 4].copy_from_slice(&(dim0 + 1).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("embedding.token"), "{err}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&toy_model(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated") || err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&toy_model(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // inside the classifier bias values, just before the trailer, so the
        // structure still parses and only the checksum can catch it
        let mid = bytes.len() - 8;
        bytes[mid] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        assert!(checkpoint_id(&path).is_err());
    }

    /// Walks the raw bytes with an independent parser to pin the documented
    /// layout: magic, length-prefixed config JSON, per-parameter
    /// (name, rank, dims, f32 LE values) in order, CRC-32 trailer.
    #[test]
    fn format_layout_is_as_documented() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = toy_model();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        assert_eq!(&bytes[..8], b"CABERT01");
        let mut at = 8usize;
        let read_u32 = |bytes: &[u8], at: usize| {
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
        };
        let config_len = read_u32(&bytes, at);
        at += 4;
        let config: ModelConfig = serde_json::from_slice(&bytes[at..at + config_len]).unwrap();
        assert_eq!(config, model.config);
        at += config_len;

        for param in model.parameters() {
            let name_len = read_u32(&bytes, at);
            at += 4;
            assert_eq!(&bytes[at..at + name_len], param.name.as_bytes());
            at += name_len;
            let rank = read_u32(&bytes, at);
            at += 4;
            assert_eq!(rank, param.value.shape().len());
            for &dim in param.value.shape() {
                assert_eq!(read_u32(&bytes, at), dim);
                at += 4;
            }
            for &v in param.value.data() {
                assert_eq!(
                    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()).to_bits(),
                    v.to_bits()
                );
                at += 4;
            }
        }

        assert_eq!(at + 4, bytes.len());
        let stored = u32::from_le_bytes(bytes[at..].try_into().unwrap());
        assert_eq!(stored, crc32fast::hash(&bytes[..at]));
    }

    #[test]
    fn checkpoint_id_is_stable_hex() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&toy_model(), &path).unwrap();
        let id = checkpoint_id(&path).unwrap();
        assert_eq!(id.len(), 8);
        assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(id, checkpoint_id(&path).unwrap());
    }
}

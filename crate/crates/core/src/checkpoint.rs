//! Self-describing parameter files.
//!
//! Layout: magic `CTXCKPT1`, a little-endian `u32` header length, a JSON
//! header, then every tensor as little-endian `f32` in header order.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::codec_core::VideoCodec;
use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::tensor_ops::cpu;

pub const MAGIC: &[u8; 8] = b"CTXCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub config: String,
    /// Free-form provenance such as the last completed training stage.
    pub note: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(codec: &VideoCodec, note: &str) -> Result<Vec<u8>> {
    let vars = codec.store.vars_with_prefixes(&[]);
    let header = CheckpointHeader {
        config_hash: format!("{:016x}", codec.config_hash()),
        config: codec.cfg.to_toml(),
        note: note.into(),
        tensors: vars.iter().map(|(n, v)| TensorEntry { name: n.clone(), shape: v.dims().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, v) in &vars {
        for x in v.as_tensor().flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()? {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(codec: &VideoCodec, path: &Path, note: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, to_bytes(codec, note)?)?;
    Ok(())
}

fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let n = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body = bytes.get(12..12 + n).ok_or_else(|| Error::Data("checkpoint header truncated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    Ok((header, &bytes[12 + n..]))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(parse(&std::fs::read(path)?)?.0)
}

/// Copy stored parameters into `codec`; the config hashes must agree.
pub fn load_into(codec: &VideoCodec, bytes: &[u8]) -> Result<CheckpointHeader> {
    let (header, mut data) = parse(bytes)?;
    let found = u64::from_str_radix(&header.config_hash, 16).map_err(|_| Error::Data("bad config hash in checkpoint".into()))?;
    if found != codec.config_hash() {
        return Err(Error::HashMismatch { expected: codec.config_hash(), found });
    }
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        if data.len() < 4 * n {
            return Err(Error::Data(format!("checkpoint data truncated at `{}`", e.name)));
        }
        let v: Vec<f32> = data[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        data = &data[4 * n..];
        codec.store.set(&e.name, &Tensor::from_vec(v, e.shape.as_slice(), &cpu())?)?;
    }
    if !data.is_empty() {
        return Err(Error::Data(format!("{} trailing bytes in checkpoint", data.len())));
    }
    let stored: std::collections::BTreeSet<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
    if let Some(missing) = codec.store.names().iter().find(|n| !stored.contains(n.as_str())) {
        return Err(Error::Data(format!("checkpoint lacks parameter `{missing}`")));
    }
    Ok(header)
}

/// Build a codec from the configuration embedded in the checkpoint.
pub fn load(path: &Path) -> Result<(VideoCodec, CheckpointHeader)> {
    let bytes = std::fs::read(path)?;
    let (header, _) = parse(&bytes)?;
    let cfg = CodecConfig::from_toml_str(&header.config)?;
    let codec = VideoCodec::new(&cfg)?;
    let header = load_into(&codec, &bytes)?;
    Ok((codec, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn tiny(seed: u64, preset: &str) -> VideoCodec {
        let mut cfg = CodecConfig::with_preset(preset).unwrap();
        cfg.model = ModelConfig::tiny();
        cfg.seed = seed;
        VideoCodec::new(&cfg).unwrap()
    }

    #[test]
    fn round_trip_restores_every_parameter() {
        let a = tiny(1, "J");
        let b = tiny(2, "J");
        assert_ne!(a.store.hash(&[]).unwrap(), b.store.hash(&[]).unwrap());
        let bytes = to_bytes(&a, "test").unwrap();
        let h = load_into(&b, &bytes).unwrap();
        assert_eq!(h.note, "test");
        assert_eq!(a.store.hash(&[]).unwrap(), b.store.hash(&[]).unwrap());
    }

    #[test]
    fn foreign_config_is_refused() {
        let bytes = to_bytes(&tiny(1, "J"), "").unwrap();
        assert!(matches!(load_into(&tiny(1, "A"), &bytes), Err(Error::HashMismatch { .. })));
        assert!(load_into(&tiny(1, "J"), &bytes[..bytes.len() - 3]).is_err());
    }
}

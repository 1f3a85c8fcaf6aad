//! Checkpoint container:
//!
//! ```text
//! 8 bytes   magic "FSCECKPT"
//! u64 LE    header length in bytes
//! header    JSON: stage, seed, class ids, config, tensor names and shapes
//! payload   every tensor as f32 little-endian, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DetectorConfig, Stage};
use super::model::DetectorParams;
use super::DetectorState;
use crate::error::{FsceError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSCECKPT";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    stage: Stage,
    seed: u64,
    class_ids: Vec<u32>,
    config: DetectorConfig,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(state: &DetectorState) -> Result<Vec<u8>> {
    let named = state.params.named();
    let header = Header {
        stage: state.stage,
        seed: state.seed,
        class_ids: state.class_ids.clone(),
        config: state.config.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let payload: usize = named.iter().map(|(_, t)| t.len() * 4).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in named {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DetectorState> {
    let bad = |m: &str| FsceError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    header.config.validate()?;
    let mut rng = super::train::param_rng(0);
    let mut params = DetectorParams::init(&header.config, header.class_ids.len(), &mut rng);
    let mut cursor = 16 + len;
    {
        let slots = params.named_mut();
        if slots.len() != header.tensors.len() {
            return Err(bad("tensor count does not match the architecture"));
        }
        for ((name, slot), entry) in slots.into_iter().zip(&header.tensors) {
            if name != entry.name || slot.shape != entry.shape {
                return Err(FsceError::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {:?}",
                    entry.name, entry.shape, slot.shape
                )));
            }
            let n = slot.len() * 4;
            let raw = bytes.get(cursor..cursor + n).ok_or_else(|| bad("truncated payload"))?;
            for (v, chunk) in slot.data.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            cursor += n;
        }
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    params.classifier.alpha = header.config.cosine_scale;
    Ok(DetectorState {
        stage: header.stage,
        config: header.config,
        seed: header.seed,
        class_ids: header.class_ids,
        params,
    })
}

pub fn save_checkpoint(state: &DetectorState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| FsceError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| FsceError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<DetectorState> {
    if !path.exists() {
        return Err(FsceError::MissingPath(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| FsceError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut s = DetectorState::initialize(DetectorConfig::default(), vec![0, 1, 2, 5], 7).unwrap();
        s.params.roi_fc1.weight.data[3] = f32::from_bits(0x0000_0001);
        s.params.roi_fc1.weight.data[4] = -0.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&s, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.stage, s.stage);
        assert_eq!(back.class_ids, s.class_ids);
        assert_eq!(back.config, s.config);
        for ((_, a), (_, b)) in s.params.named().into_iter().zip(back.params.named()) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode_checkpoint(&back).unwrap(), fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_input_is_error() {
        let s = DetectorState::initialize(DetectorConfig::default(), vec![0, 1], 7).unwrap();
        let bytes = encode_checkpoint(&s).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"NOTACKPTxxxxxxxxxxxx").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_checkpoint(Path::new("/nonexistent/a.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/a.ckpt"));
    }
}

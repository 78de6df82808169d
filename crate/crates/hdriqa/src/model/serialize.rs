//! Weight bundle files: one JSON header line (format version, config and
//! its fingerprint, tensor directory, payload checksum), then the
//! little-endian IEEE-754 double payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig};
use crate::nn::optim::ParamSet;
use crate::nn::Tensor;

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: usize,
    len: usize,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    fingerprint: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write a bundle. The file is written to a temporary sibling and renamed
/// into place, so a failed write never leaves a partial bundle.
pub fn save_bundle(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::with_capacity(bundle.params.len());
    let mut payload = Vec::new();
    let mut offset = 0usize;
    for (name, p) in bundle.params.iter() {
        let len = p.value.numel();
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            offset,
            len,
            trainable: p.trainable,
        });
        for &x in p.value.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        offset += len;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        fingerprint: bundle.config.fingerprint(),
        config: bundle.config.clone(),
        tensors,
        payload_sha256: sha256_hex(&payload),
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| Error::invalid(format!("header serialization: {e}")))?;

    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(header_json.as_bytes())
            .and_then(|_| f.write_all(b"\n"))
            .and_then(|_| f.write_all(&payload))
            .map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Read a bundle back, verifying the format version, the payload checksum,
/// and that the stored fingerprint matches the stored config.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "missing header line", Some(bytes.len())))?;
    let header: Header = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::format(path, format!("header JSON: {e}"), None))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format version {}", header.format_version),
            None,
        ));
    }
    if header.config.fingerprint() != header.fingerprint {
        return Err(Error::format(
            path,
            "config fingerprint mismatch (header does not match its own config)",
            None,
        ));
    }
    let payload = &bytes[newline + 1..];
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if payload.len() != total * 8 {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), total * 8),
            Some(bytes.len()),
        ));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(Error::format(path, "payload checksum mismatch", None));
    }

    let mut params = ParamSet::new();
    for t in &header.tensors {
        let mut data = Vec::with_capacity(t.len);
        for i in 0..t.len {
            let base = (t.offset + i) * 8;
            let raw: [u8; 8] = payload[base..base + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(raw));
        }
        let tensor = Tensor::from_vec(&t.shape, data)
            .map_err(|e| Error::format(path, format!("tensor {}: {e}", t.name), None))?;
        params.insert(&t.name, tensor, t.trainable);
    }
    Ok(ModelBundle {
        config: header.config,
        params,
    })
}

/// Load a bundle and require it to match an expected configuration.
pub fn load_bundle_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<ModelBundle> {
    let path = path.as_ref();
    let bundle = load_bundle(path)?;
    if bundle.config.fingerprint() != expected.fingerprint() {
        return Err(Error::format(
            path,
            "config fingerprint mismatch (bundle was built for a different architecture/config)",
            None,
        ));
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::PreprocessMode;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tmp();
        let a = dir.path().join("a.weights");
        let b = dir.path().join("b.weights");
        let bundle = ModelBundle::init(ModelConfig::default(), 3).unwrap();
        save_bundle(&bundle, &a).unwrap();
        let loaded = load_bundle(&a).unwrap();
        assert_eq!(loaded.params.value_hash(), bundle.params.value_hash());
        save_bundle(&loaded, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("t.weights");
        let bundle = ModelBundle::init(ModelConfig::default(), 4).unwrap();
        save_bundle(&bundle, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        let err = load_bundle(&p).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let dir = tmp();
        let p = dir.path().join("m.weights");
        let bundle = ModelBundle::init(ModelConfig::default(), 5).unwrap();
        save_bundle(&bundle, &p).unwrap();
        let other = ModelConfig {
            preprocess: PreprocessMode::Pu,
            ..ModelConfig::default()
        };
        let err = load_bundle_expecting(&p, &other).unwrap_err();
        assert!(err.to_string().contains("fingerprint"), "{err}");
        assert!(load_bundle_expecting(&p, &ModelConfig::default()).is_ok());
    }

    #[test]
    fn trainable_flags_survive_round_trip() {
        let dir = tmp();
        let p = dir.path().join("f.weights");
        let mut bundle = ModelBundle::init(ModelConfig::default(), 6).unwrap();
        bundle.params.set_trainable_prefix("noise.", false);
        save_bundle(&bundle, &p).unwrap();
        let loaded = load_bundle(&p).unwrap();
        assert!(!loaded.params.get("noise.conv0.w").trainable);
        assert!(loaded.params.get("resist.conv0.w").trainable);
    }
}

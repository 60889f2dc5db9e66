//! Policy snapshot files.
//!
//! Layout: one line of compact JSON holding the manifest (an array of
//! `{name, shape, offset}` entries, `offset` counted in bytes from the start
//! of the payload), a single `\n`, then every tensor's data as consecutive
//! little-endian f64 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub fn encode(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, t) in tensors {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len() * 8;
    }
    let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
    out.push(b'\n');
    out.reserve(offset);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, TensorError> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TensorError::Checkpoint("missing manifest terminator".into()))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[..split])
        .map_err(|e| TensorError::Checkpoint(format!("manifest: {e}")))?;
    let payload = &bytes[split + 1..];
    let mut out = Vec::with_capacity(manifest.len());
    for entry in manifest {
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * 8;
        if end > payload.len() {
            return Err(TensorError::Checkpoint(format!(
                "tensor `{}` overruns payload ({end} > {})",
                entry.name,
                payload.len()
            )));
        }
        let data = payload[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((entry.name, Tensor::new(entry.shape, data)?));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<(), TensorError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(tensors))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, TensorError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_manifest_line_then_le_payload() {
        let t = vec![
            ("a".to_string(), Tensor::matrix(1, 2, vec![1.0, -2.5])),
            ("b".to_string(), Tensor::scalar(3.0)),
        ];
        let bytes = encode(&t);
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(manifest[1]["offset"], 16);
        assert_eq!(manifest[0]["shape"], serde_json::json!([1, 2]));
        assert_eq!(bytes.len(), nl + 1 + 24);
        assert_eq!(&bytes[nl + 1..nl + 9], &1.0f64.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = vec![("a".to_string(), Tensor::matrix(1, 2, vec![1.0, 2.0]))];
        let mut bytes = encode(&t);
        bytes.truncate(bytes.len() - 3);
        assert!(decode(&bytes).is_err());
    }
}

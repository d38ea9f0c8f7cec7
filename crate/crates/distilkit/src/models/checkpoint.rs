//! Checkpoint container: a text header (version, seed, config, array
//! directory) followed by named float32 little-endian arrays in
//! registration order. A load/save round trip is byte-identical.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const MAGIC: &str = "distilkit-checkpoint v1";

#[derive(Debug, Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    seed: u64,
    config: ModelConfig,
    arrays: Vec<ArrayMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
}

pub fn save_model(model: &Model<f32>, seed: u64, path: &Path) -> Result<()> {
    let named = model.named_parameters();
    let header = CkptHeader {
        version: 1,
        seed,
        config: model.config.clone(),
        arrays: named
            .iter()
            .map(|(n, t)| ArrayMeta { name: n.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC.as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(serde_json::to_string(&header)?.as_bytes());
    buf.push(b'\n');
    for (_, t) in &named {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<(Model<f32>, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    let magic = lines.next().unwrap_or_default();
    if magic != MAGIC.as_bytes() {
        return Err(Error::Checkpoint(format!("{}: bad magic line", path.display())));
    }
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing header", path.display())))?;
    let header: CkptHeader = serde_json::from_slice(header_line)?;
    if header.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let mut payload = lines
        .next()
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing payload", path.display())))?;

    let mut model: Model<f32> = Model::init(&header.config, &mut Rng::new(0))?;
    {
        let params = model.parameters_mut();
        if params.len() != header.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "directory lists {} arrays, model has {}",
                header.arrays.len(),
                params.len()
            )));
        }
        for (tensor, meta) in params.into_iter().zip(&header.arrays) {
            if tensor.shape() != meta.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "array '{}' has shape {:?}, expected {:?}",
                    meta.name,
                    meta.shape,
                    tensor.shape()
                )));
            }
            let n = tensor.numel() * 4;
            if payload.len() < n {
                return Err(Error::Checkpoint("payload truncated".into()));
            }
            for (v, chunk) in tensor.data_mut().iter_mut().zip(payload[..n].chunks_exact(4)) {
                *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            }
            payload = &payload[n..];
        }
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", payload.len())));
    }
    // names in the directory must match the model's registry
    for ((name, _), meta) in model.named_parameters().iter().zip(&header.arrays) {
        if name != &meta.name {
            return Err(Error::Checkpoint(format!(
                "array order mismatch: '{}' vs '{}'",
                meta.name, name
            )));
        }
    }
    Ok((model, header.seed))
}

/// Hex SHA-256 of a file, used for cache invalidation and manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex_encode(&hasher.finalize()))
}

/// Hex SHA-256 of an in-memory buffer.
pub fn bytes_sha256(bytes: &[u8]) -> String {
    hex_encode(&Sha256::digest(bytes))
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write as _;
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Arch, HeadKind};

    fn cfg() -> ModelConfig {
        ModelConfig {
            encoder_channels: 4,
            encoder_strides: vec![2, 2],
            encoder_kernels: vec![4, 3],
            arch: Arch::Bilstm,
            num_layers: 1,
            hidden: 3,
            ffn: 0,
            heads: 0,
            num_clusters: 4,
            head: HeadKind::Linear,
            head_dim: 2,
            head_temperature: 0.1,
            pos_conv_kernel: 3,
            pos_conv_groups: 1,
        }
    }

    #[test]
    fn save_load_resave_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let model: Model<f32> = Model::init(&cfg(), &mut Rng::new(77)).unwrap();
        save_model(&model, 77, &p1).unwrap();
        let (loaded, seed) = load_model(&p1).unwrap();
        assert_eq!(seed, 77);
        save_model(&loaded, seed, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(file_sha256(&p1).unwrap(), file_sha256(&p2).unwrap());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        fs::write(&p, b"not a checkpoint\n{}\n").unwrap();
        assert!(matches!(load_model(&p), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ckpt");
        let model: Model<f32> = Model::init(&cfg(), &mut Rng::new(1)).unwrap();
        save_model(&model, 1, &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Checkpoint(_))));
    }
}

//! Parameter checkpoints: a TOML manifest of tensor names and shapes plus a
//! sidecar of little-endian `f64` values in manifest order.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::{BranchConfig, BranchParams};
use crate::error::{Result, TrackError};

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: BranchConfig,
    data_file: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (values).
pub fn save_checkpoint(params: &BranchParams, path: &Path) -> Result<()> {
    let data_path = sidecar_path(path);
    let mut tensors = Vec::new();
    let mut bytes = Vec::with_capacity(params.num_parameters() * 8);
    params.for_each_tensor(|name, t| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [t.nrows(), t.ncols()],
        });
        // Row-major within each tensor.
        for r in 0..t.nrows() {
            for c in 0..t.ncols() {
                bytes.extend_from_slice(&t[(r, c)].to_le_bytes());
            }
        }
    });
    let manifest = Manifest {
        config: params.config,
        data_file: data_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        tensors,
    };
    let text = toml::to_string(&manifest).map_err(|e| TrackError::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    std::fs::write(data_path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<BranchParams> {
    let text = std::fs::read_to_string(path)?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| TrackError::Parse(e.to_string()))?;
    manifest.config.validate()?;
    let data_path = path
        .parent()
        .map(|p| p.join(&manifest.data_file))
        .unwrap_or_else(|| PathBuf::from(&manifest.data_file));
    let bytes = std::fs::read(data_path)?;
    let mut params = BranchParams::zeros(manifest.config);
    let expected: Vec<(String, [usize; 2])> = {
        let mut v = Vec::new();
        params.for_each_tensor(|n, t| v.push((n.to_string(), [t.nrows(), t.ncols()])));
        v
    };
    let found: Vec<(String, [usize; 2])> = manifest
        .tensors
        .iter()
        .map(|t| (t.name.clone(), t.shape))
        .collect();
    if expected != found {
        return Err(TrackError::ShapeMismatch(
            "checkpoint tensors do not match the configured architecture".into(),
        ));
    }
    if bytes.len() != params.num_parameters() * 8 {
        return Err(TrackError::ShapeMismatch(format!(
            "checkpoint holds {} bytes, expected {}",
            bytes.len(),
            params.num_parameters() * 8
        )));
    }
    let mut chunks = bytes.chunks_exact(8);
    params.for_each_tensor_mut(|_, t| {
        for r in 0..t.nrows() {
            for c in 0..t.ncols() {
                let chunk = chunks.next().expect("length checked");
                t[(r, c)] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
    });
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = BranchConfig {
            dim: 8,
            heads: 2,
            ffn_dim: 12,
            blocks: 2,
            ..BranchConfig::default()
        };
        let params = BranchParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.toml");
        save_checkpoint(&params, &path).unwrap();
        assert!(path.with_extension("bin").exists());
        assert_eq!(load_checkpoint(&path).unwrap(), params);
    }

    #[test]
    fn truncated_sidecar_is_rejected() {
        let cfg = BranchConfig {
            dim: 4,
            heads: 1,
            ffn_dim: 4,
            ..BranchConfig::default()
        };
        let params = BranchParams::zeros(cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.toml");
        save_checkpoint(&params, &path).unwrap();
        let bin = path.with_extension("bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

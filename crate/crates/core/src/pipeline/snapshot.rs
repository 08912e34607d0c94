//! Model snapshots: a small JSON manifest followed by float32 tensor blobs.
//! Snapshots are viewing/exchange artifacts, not bit-exact resume points.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::vpg::PromptBank;

use super::{CloudModelState, ExperimentConfig};

const MAGIC: &[u8; 6] = b"CAHQ1\0";
const SLOW_BANK_ENTRY: &str = "vpg.bank.slow";

/// Stable identity of a configuration: SHA-256 over its canonical JSON.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the blob, counted in f32 values.
    offset: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct Manifest {
    version: u32,
    config_hash: String,
    cycle: usize,
    bank_beta: f64,
    tensors: Vec<TensorMeta>,
}

pub fn save_snapshot(path: &Path, state: &CloudModelState) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let entries = state
        .params
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .chain([(SLOW_BANK_ENTRY, &state.bank.slow)]);
    for (name, tensor) in entries {
        tensors.push(TensorMeta {
            name: name.to_string(),
            rows: tensor.rows,
            cols: tensor.cols,
            offset,
        });
        for v in &tensor.data {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        offset += tensor.len();
    }
    let manifest = Manifest {
        version: 1,
        config_hash: state.config_hash.clone(),
        cycle: state.cycle,
        bank_beta: state.bank.beta,
        tensors,
    };
    let manifest_json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + manifest_json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&blob);
    std::fs::write(path, out)?;
    Ok(())
}

/// Parameters and bank recovered from disk (float32 precision).
#[derive(Debug, Clone)]
pub struct LoadedSnapshot {
    pub params: ParamSet,
    pub bank: PromptBank,
    pub cycle: usize,
    pub config_hash: String,
}

pub fn load_snapshot(path: &Path, expected_hash: Option<&str>) -> Result<LoadedSnapshot> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Snapshot(format!("{} is not a model snapshot", path.display())));
    }
    let len_at = MAGIC.len();
    let manifest_len =
        u32::from_le_bytes(bytes[len_at..len_at + 4].try_into().expect("sized")) as usize;
    let blob_at = len_at + 4 + manifest_len;
    if bytes.len() < blob_at {
        return Err(Error::Snapshot("manifest extends past end of file".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[len_at + 4..blob_at])
        .map_err(|e| Error::Snapshot(format!("bad manifest: {e}")))?;
    if manifest.version != 1 {
        return Err(Error::Snapshot(format!("unsupported version {}", manifest.version)));
    }
    if let Some(expected) = expected_hash {
        if expected != manifest.config_hash {
            return Err(Error::Snapshot(format!(
                "snapshot was produced under config {} but {} was requested",
                manifest.config_hash, expected
            )));
        }
    }
    let blob = &bytes[blob_at..];
    let mut params = ParamSet::new();
    let mut slow: Option<Tensor> = None;
    for meta in &manifest.tensors {
        let n = meta.rows * meta.cols;
        let start = meta.offset * 4;
        let end = start + n * 4;
        if end > blob.len() {
            return Err(Error::Snapshot(format!("tensor {} overruns the blob", meta.name)));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("sized")) as f64)
            .collect();
        let tensor = Tensor::from_vec(meta.rows, meta.cols, data);
        if meta.name == SLOW_BANK_ENTRY {
            slow = Some(tensor);
        } else {
            params.insert(meta.name.clone(), tensor);
        }
    }
    let slow = slow.ok_or_else(|| Error::Snapshot("snapshot lacks the slow bank".into()))?;
    Ok(LoadedSnapshot {
        params,
        bank: PromptBank { slow, beta: manifest.bank_beta },
        cycle: manifest.cycle,
        config_hash: manifest.config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::testutil::tiny_config;
    use crate::pipeline::init_cloud_state;

    #[test]
    fn hash_is_stable_and_config_sensitive() {
        let cfg = tiny_config();
        let a = config_hash(&cfg).unwrap();
        let b = config_hash(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let mut other = cfg.clone();
        other.adversarial.tau = 0.9;
        assert_ne!(a, config_hash(&other).unwrap());
    }

    #[test]
    fn snapshot_roundtrip_at_float32_precision() {
        let cfg = tiny_config();
        let state = init_cloud_state(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state_cycle0.bin");
        save_snapshot(&path, &state).unwrap();

        let loaded = load_snapshot(&path, Some(&state.config_hash)).unwrap();
        assert_eq!(loaded.cycle, state.cycle);
        assert_eq!(loaded.params.tensor_count(), state.params.tensor_count());
        for (name, t) in state.params.iter() {
            let back = loaded.params.get(name);
            assert!(t.same_shape(back));
            let worst = t
                .data
                .iter()
                .zip(&back.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-6, "{name} drifted by {worst}");
        }
        assert_eq!(loaded.bank.beta, state.bank.beta);
    }

    #[test]
    fn snapshot_rejects_wrong_hash_and_garbage() {
        let cfg = tiny_config();
        let state = init_cloud_state(&cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.bin");
        save_snapshot(&path, &state).unwrap();
        assert!(load_snapshot(&path, Some("deadbeef")).is_err());
        assert!(load_snapshot(&path, None).is_ok());

        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"not a snapshot").unwrap();
        assert!(load_snapshot(&junk, None).is_err());
    }
}

//! Versioned checkpoint archive: a JSON header (config, iteration, label
//! sets, candidate cache, tensor directory) followed by a raw
//! little-endian f64 blob. Round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Model, ModelState, NetworkConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::types::KeypointSet;

const MAGIC: &[u8; 8] = b"VKRCKPT1";

/// Format tag stored in the header.
pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the data blob, in f64 units.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    config: NetworkConfig,
    iteration: u64,
    original_labels: BTreeMap<String, KeypointSet>,
    expanded_labels: BTreeMap<String, KeypointSet>,
    candidates: BTreeMap<String, KeypointSet>,
    tensors: Vec<TensorEntry>,
}

/// Writes a model state to `path`.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for (name, value) in state.model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            offset,
        });
        offset += value.len() as u64;
    }
    let header = Header {
        format: CHECKPOINT_FORMAT,
        config: state.model.config.clone(),
        iteration: state.iteration,
        original_labels: state.original_labels.clone(),
        expanded_labels: state.expanded_labels.clone(),
        candidates: state.candidates.clone(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for (_, value) in state.model.params.iter() {
        for &v in value.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Reads a model state from `path`.
pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format tag {}",
            path.display(),
            header.format
        )));
    }

    let mut params = ParamStore::new();
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        file.read_exact(&mut bytes).map_err(|_| {
            Error::Checkpoint(format!(
                "{}: truncated tensor `{}`",
                path.display(),
                entry.name
            ))
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", entry.name)))?;
        params.register(entry.name.clone(), arr);
    }

    Ok(ModelState {
        model: Model {
            config: header.config,
            params,
        },
        iteration: header.iteration,
        original_labels: header.original_labels,
        expanded_labels: header.expanded_labels,
        candidates: header.candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::FrameSize;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut cfg = NetworkConfig::tiny(64);
        cfg.working_size = (64, 64);
        let model = Model::init(cfg, 3);
        let mut state = ModelState::new(model);
        state.iteration = 42;
        let frame = FrameSize::new(64, 64);
        let pts = KeypointSet::from_points(vec![[1.5, 2.25], [10.0, 20.0]], frame).unwrap();
        state.original_labels.insert("img0".into(), pts.clone());
        state.expanded_labels.insert("img0".into(), pts.clone());
        state.candidates.insert("img1".into(), pts);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        assert_eq!(loaded.iteration, 42);
        assert_eq!(loaded.model.config, state.model.config);
        assert_eq!(loaded.original_labels, state.original_labels);
        assert_eq!(loaded.expanded_labels, state.expanded_labels);
        assert_eq!(loaded.candidates, state.candidates);
        assert_eq!(loaded.model.params.len(), state.model.params.len());
        for ((n1, v1), (n2, v2)) in loaded.model.params.iter().zip(state.model.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1, v2, "tensor {n1} differs");
        }
    }

    #[test]
    fn load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}

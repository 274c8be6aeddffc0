//! Single-file checkpoint archive: a JSON header (config snapshot, epoch,
//! RNG streams, optimizer state, calibrated sigma reference, tensor table)
//! followed by raw little-endian f64 tensor data. Covers task model,
//! projection head, generator, mixup head, and BN running statistics, so a
//! resumed run continues bit-compatibly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::CudgNetModel;
use crate::optim::OptimStateDump;
use crate::rng::RngBundle;

const MAGIC: &[u8; 8] = b"CUDGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Opaque config snapshot (the trainer owns its schema).
    pub config: serde_json::Value,
    pub epoch: u64,
    pub rng: RngBundle,
    pub sigma_s_ref: Option<f64>,
    pub opt_task: OptimStateDump,
    pub opt_gen: OptimStateDump,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorMeta>,
}

fn model_tensors(model: &CudgNetModel) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    let mut params = Vec::new();
    model.collect(&mut params);
    for p in params {
        out.push((
            p.name.clone(),
            p.value.shape().to_vec(),
            p.value.iter().copied().collect(),
        ));
    }
    for (name, buf) in model.buffers() {
        out.push((name, buf.shape().to_vec(), buf.iter().copied().collect()));
    }
    out
}

pub fn save_checkpoint(path: &Path, model: &CudgNetModel, meta: &CheckpointMeta) -> Result<()> {
    let tensors = model_tensors(model);
    let header = Header {
        meta: meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, shape, _)| TensorMeta {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("serialize header: {e}")))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, _, data) in &tensors {
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_header(r: &mut impl Read, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let mut vbuf = [0u8; 4];
    r.read_exact(&mut vbuf)?;
    let version = u32::from_le_bytes(vbuf);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut lbuf = [0u8; 8];
    r.read_exact(&mut lbuf)?;
    let hlen = u64::from_le_bytes(lbuf) as usize;
    let mut hjson = vec![0u8; hlen];
    r.read_exact(&mut hjson)?;
    serde_json::from_slice(&hjson).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))
}

/// Read only the metadata (to reconstruct the model before loading weights).
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(read_header(&mut r, path)?.meta)
}

/// Load tensor data into an already constructed model. Names and shapes must
/// match the model exactly.
pub fn load_checkpoint_into(path: &Path, model: &mut CudgNetModel) -> Result<CheckpointMeta> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r, path)?;

    let mut stored = std::collections::HashMap::new();
    for tm in &header.tensors {
        let n: usize = tm.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(|e| {
            Error::Checkpoint(format!("{}: truncated tensor {}: {e}", path.display(), tm.name))
        })?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&tm.shape), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", tm.name)))?;
        stored.insert(tm.name.clone(), arr);
    }

    let mut params = Vec::new();
    model.collect_mut(&mut params);
    for p in params {
        let arr = stored.remove(&p.name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint missing tensor {}", p.name))
        })?;
        if arr.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} shape {:?} does not match model {:?}",
                p.name,
                arr.shape(),
                p.value.shape()
            )));
        }
        p.value = arr;
    }
    for (name, buf) in model.buffers_mut() {
        let arr = stored.remove(&name).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint missing buffer {name}"))
        })?;
        if arr.shape() != buf.shape() {
            return Err(Error::Checkpoint(format!("buffer {name} shape mismatch")));
        }
        *buf = arr;
    }
    if !stored.is_empty() {
        let extra: Vec<_> = stored.keys().cloned().collect();
        return Err(Error::Checkpoint(format!(
            "checkpoint carries tensors the model does not have: {}",
            extra.join(", ")
        )));
    }
    Ok(header.meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TaskModelConfig;
    use crate::rng::{stream_rng, RngBundle, Stream};

    fn tiny_model(seed: u64) -> CudgNetModel {
        let cfg = TaskModelConfig {
            depth: 10,
            widen_factor: 1,
            ..Default::default()
        };
        let mut rng = stream_rng(seed, Stream::Init);
        CudgNetModel::new(cfg, &mut rng).unwrap()
    }

    #[test]
    fn weights_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model(1);
        let meta = CheckpointMeta {
            config: serde_json::json!({"note": "test"}),
            epoch: 3,
            rng: RngBundle::from_seed(7),
            sigma_s_ref: Some(0.42),
            opt_task: Default::default(),
            opt_gen: Default::default(),
        };
        save_checkpoint(&path, &model, &meta).unwrap();

        let mut other = tiny_model(2); // different init
        let loaded = load_checkpoint_into(&path, &mut other).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.sigma_s_ref, Some(0.42));

        let mut pa = Vec::new();
        model.collect(&mut pa);
        let mut pb = Vec::new();
        other.collect(&mut pb);
        for (a, b) in pa.iter().zip(pb.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value, "param {} diverged", a.name);
        }
    }

    #[test]
    fn corrupt_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.ckpt");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_meta(&path).is_err());
        let mut model = tiny_model(3);
        assert!(load_checkpoint_into(&path, &mut model).is_err());
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let model = tiny_model(4);
        let meta = CheckpointMeta {
            config: serde_json::Value::Null,
            epoch: 0,
            rng: RngBundle::from_seed(0),
            sigma_s_ref: None,
            opt_task: Default::default(),
            opt_gen: Default::default(),
        };
        save_checkpoint(&path, &model, &meta).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        let mut m2 = tiny_model(5);
        assert!(load_checkpoint_into(&path, &mut m2).is_err());
    }
}

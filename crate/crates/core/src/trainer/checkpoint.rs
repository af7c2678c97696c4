//! Model checkpoints.
//!
//! ```text
//! "DEDN" | version: u32 LE | header_len: u32 LE | header (JSON) | blobs
//! ```
//!
//! The header records dims, partition, training hyperparameters and the
//! name and shape of every blob; blobs are little-endian `f32` in that order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::dedn::{ClusterPartition, DednModel, ModelDims};
use crate::error::{CheckpointError, Error, Result};

pub const MAGIC: [u8; 4] = *b"DEDN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: ModelDims,
    partition: ClusterPartition,
    hyperparameters: TrainConfig,
    blob_order: Vec<BlobInfo>,
}

fn blob_layout(model: &DednModel) -> Vec<BlobInfo> {
    model
        .matrix_names()
        .into_iter()
        .zip(model.matrices())
        .map(|(name, w)| BlobInfo {
            name,
            shape: w.shape().to_vec(),
        })
        .collect()
}

pub fn checkpoint_bytes(model: &DednModel, cfg: &TrainConfig) -> Result<Vec<u8>> {
    model.validate()?;
    let header = Header {
        dims: model.dims,
        partition: model.partition.clone(),
        hyperparameters: cfg.clone(),
        blob_order: blob_layout(model),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + 4 * model.matrices().iter().map(|w| w.numel()).sum::<usize>());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for w in model.matrices() {
        out.extend(w.data().iter().flat_map(|x| x.to_le_bytes()));
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> Result<u32, CheckpointError> {
    let b = bytes.get(at..at + 4).ok_or(CheckpointError::Truncated)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(DednModel, TrainConfig)> {
    let magic: [u8; 4] = bytes
        .get(..4)
        .ok_or(CheckpointError::Truncated)?
        .try_into()
        .expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = u32_at(bytes, 4)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version).into());
    }
    let header_len = u32_at(bytes, 8)? as usize;
    let json = bytes.get(12..12 + header_len).ok_or(CheckpointError::Truncated)?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Header(e.to_string()))?;

    if header.partition.d() != header.dims.d {
        return Err(CheckpointError::Header(format!(
            "partition covers {} attributes but dims declare {}",
            header.partition.d(),
            header.dims.d
        ))
        .into());
    }
    let mut model = DednModel::zeros(header.dims, header.partition.clone())?;
    let expected_layout = blob_layout(&model);
    if header.blob_order != expected_layout {
        return Err(CheckpointError::Header("blob order does not match dims and partition".into()).into());
    }

    let blobs = &bytes[12 + header_len..];
    let expected: u64 = 4 * expected_layout
        .iter()
        .map(|b| b.shape.iter().product::<usize>() as u64)
        .sum::<u64>();
    if blobs.len() as u64 != expected {
        return Err(CheckpointError::Size {
            expected,
            actual: blobs.len() as u64,
        }
        .into());
    }
    let mut offset = 0;
    for w in model.matrices_mut() {
        let n = w.numel();
        for (x, b) in w.data_mut().iter_mut().zip(blobs[offset..offset + 4 * n].chunks_exact(4)) {
            *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
        offset += 4 * n;
    }
    header.hyperparameters.validate()?;
    model.validate()?;
    Ok((model, header.hyperparameters))
}

pub fn save_checkpoint(model: &DednModel, cfg: &TrainConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = checkpoint_bytes(model, cfg)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DednModel, TrainConfig)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> DednModel {
        let dims = ModelDims { c: 3, r: 4, g: 2, d: 5 };
        let part = ClusterPartition::new(vec![vec![4, 0], vec![1, 2, 3]], 5).unwrap();
        DednModel::init_uniform(dims, part, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn roundtrip() {
        let m = model();
        let cfg = TrainConfig::default();
        let bytes = checkpoint_bytes(&m, &cfg).unwrap();
        let (m2, cfg2) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(m2, m);
        assert_eq!(cfg2, cfg);
        assert_eq!(checkpoint_bytes(&m2, &cfg2).unwrap(), bytes);
    }

    #[test]
    fn layout_prefix() {
        let bytes = checkpoint_bytes(&model(), &TrainConfig::default()).unwrap();
        assert_eq!(&bytes[..4], b"DEDN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
        let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        assert_eq!(header["blob_order"][4]["name"], "fexp0.w1");
        assert_eq!(header["partition"], serde_json::json!([[4, 0], [1, 2, 3]]));
        // 3 networks x (2·3 + 2·3 + 2·4 + 2·4) floats
        assert_eq!(bytes.len() - 12 - hl, 4 * 3 * 28);
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = checkpoint_bytes(&model(), &TrainConfig::default()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(Error::Checkpoint(CheckpointError::BadMagic(_)))
        ));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = checkpoint_bytes(&model(), &TrainConfig::default()).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(Error::Checkpoint(CheckpointError::BadVersion(7)))
        ));
    }

    #[test]
    fn blob_length_disagreeing_with_dims() {
        let mut bytes = checkpoint_bytes(&model(), &TrainConfig::default()).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(Error::Checkpoint(CheckpointError::Size { .. }))
        ));
        let mut bytes = checkpoint_bytes(&model(), &TrainConfig::default()).unwrap();
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(
            parse_checkpoint(&bytes),
            Err(Error::Checkpoint(CheckpointError::Size { .. }))
        ));
    }

    #[test]
    fn header_dims_disagreeing_with_partition() {
        let bytes = checkpoint_bytes(&model(), &TrainConfig::default()).unwrap();
        let hl = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hl]).unwrap();
        header["dims"]["d"] = 6.into();
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[12 + hl..]);
        assert!(matches!(
            parse_checkpoint(&out),
            Err(Error::Checkpoint(CheckpointError::Header(_)))
        ));
    }

    #[test]
    fn truncated_file() {
        assert!(matches!(
            parse_checkpoint(b"DED"),
            Err(Error::Checkpoint(CheckpointError::Truncated))
        ));
    }
}

//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `DAMCKPT\0`, `u32` format version, `u64` header length, a JSON
//! header (config, view ids, iteration, block sizes), then the grid, MLP and embedding
//! parameter blocks as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::appearance::{AppearanceConfig, AppearanceModel};
use crate::encoding::HashGridStack;
use crate::error::{Error, Result};
use crate::network::Mlp;

const MAGIC: &[u8; 8] = b"DAMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: AppearanceModel,
    /// Training iterations completed when the checkpoint was written.
    pub iteration: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: AppearanceConfig,
    mlp_sizes: Vec<usize>,
    view_ids: Vec<usize>,
    iteration: usize,
    grid_len: usize,
    mlp_len: usize,
    embedding_len: usize,
}

pub fn encode_checkpoint(model: &AppearanceModel, iteration: usize) -> Result<Vec<u8>> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        mlp_sizes: model.mlp().sizes().to_vec(),
        view_ids: model.view_ids().to_vec(),
        iteration,
        grid_len: model.grids().params().len(),
        mlp_len: model.mlp().params().len(),
        embedding_len: model.embeddings().len(),
    };
    let json = serde_json::to_vec(&header)?;
    let n = header.grid_len + header.mlp_len + header.embedding_len;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for block in [model.grids().params(), model.mlp().params(), model.embeddings()] {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(err("not a checkpoint file (bad magic or truncated preamble)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < hlen {
        return Err(err("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.version != version {
        return Err(err("header version disagrees with preamble"));
    }
    let data = &body[hlen..];
    let n = header.grid_len + header.mlp_len + header.embedding_len;
    if data.len() != 8 * n {
        return Err(Error::Checkpoint(format!(
            "parameter section has {} bytes, header implies {}",
            data.len(),
            8 * n
        )));
    }
    let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut take = |k: usize| -> Vec<f64> { values.by_ref().take(k).collect() };
    let grid = take(header.grid_len);
    let mlp = take(header.mlp_len);
    let emb = take(header.embedding_len);
    let grids = HashGridStack::from_parts(header.config.grid.clone(), grid)?;
    let mlp = Mlp::from_parts(&header.mlp_sizes, header.config.activation, mlp)?;
    let model = AppearanceModel::from_parts(header.config, grids, mlp, header.view_ids, emb)?;
    Ok(Checkpoint { model, iteration: header.iteration })
}

pub fn save_checkpoint(model: &AppearanceModel, iteration: usize, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(model, iteration)?;
    fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path.as_ref(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::HashGridConfig;

    fn model() -> AppearanceModel {
        let cfg = AppearanceConfig {
            grid: HashGridConfig { levels: 3, table_size: 1 << 10, ..Default::default() },
            embedding_dim: 5,
            ..Default::default()
        };
        let mut m = AppearanceModel::new(cfg, &[0, 2, 7], 11).unwrap();
        m.embeddings_mut()[4] = 0.1 + 0.2;
        m.mlp_mut().params_mut()[0] = f64::MIN_POSITIVE;
        m
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let m = model();
        save_checkpoint(&m, 42, &a).unwrap();
        let c = load_checkpoint(&a).unwrap();
        assert_eq!(c.model, m);
        assert_eq!(c.iteration, 42);
        save_checkpoint(&c.model, c.iteration, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_and_corrupt_files_are_errors() {
        let bytes = encode_checkpoint(&model(), 0).unwrap();
        for cut in [0, 5, 19, 40, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut v = bytes.clone();
        v[8] = 9;
        let e = decode_checkpoint(&v).unwrap_err();
        assert!(e.to_string().contains("version"));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}

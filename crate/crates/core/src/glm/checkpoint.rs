//! Binary checkpoint format.
//!
//! ```text
//! b"LADC" | u32 version | u64 metadata length | metadata JSON | f32 tensors
//! ```
//!
//! All integers and floats are little-endian. The metadata holds the
//! hyperparameters, the vocabulary and the tensor directory (name, shape) in
//! storage order.

use super::{Hyper, Model, ModelState, Param};
use crate::error::{LadError, Result};
use crate::tensor::Matrix;
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LADC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    hyper: Hyper,
    vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let meta = Metadata {
        hyper: model.hyper().clone(),
        vocab: model.vocab().clone(),
        tensors: model
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                rows: p.value.rows,
                cols: p.value.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(16 + json.len() + model.param_count() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &model.params {
        for v in &p.value.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::corpus::write_atomic(path, &buf)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(LadError::Checkpoint("file is truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let data = std::fs::read(path).map_err(|e| LadError::io(path, e))?;
    let mut rest = data.as_slice();
    if take(&mut rest, 4)? != CHECKPOINT_MAGIC {
        return Err(LadError::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut rest, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(LadError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let meta_len = u64::from_le_bytes(take(&mut rest, 8)?.try_into().unwrap()) as usize;
    let meta: Metadata = serde_json::from_slice(take(&mut rest, meta_len)?)
        .map_err(|e| LadError::Checkpoint(format!("bad metadata: {e}")))?;
    let mut params = Vec::with_capacity(meta.tensors.len());
    for t in meta.tensors {
        let n = t.rows * t.cols;
        let raw = take(&mut rest, n * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Param {
            name: t.name,
            value: Matrix::from_vec(t.rows, t.cols, values),
        });
    }
    if !rest.is_empty() {
        return Err(LadError::Checkpoint("trailing bytes after tensors".into()));
    }
    let model = Model::from_params(meta.hyper, meta.vocab, params)?;
    if !model.is_finite() {
        return Err(LadError::Checkpoint("checkpoint contains non-finite values".into()));
    }
    Ok(model)
}

/// Load and require the stored hyperparameters to equal `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &Hyper) -> Result<ModelState> {
    let m = load_checkpoint(path)?;
    if m.hyper() != expected {
        return Err(LadError::Checkpoint(format!(
            "hyperparameters differ: checkpoint has {:?}, expected {:?}",
            m.hyper(),
            expected
        )));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelState {
        let h = Hyper {
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            enc_layers: 1,
            dec_layers: 1,
            lte_layers: 1,
            ..Hyper::default()
        };
        Model::new(h, Vocabulary::build("abc ".chars()).unwrap(), 3).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = tiny();
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.vocab(), m.vocab());
        assert_eq!(back.hyper(), m.hyper());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&tiny(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(LadError::Checkpoint(_))));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(LadError::Checkpoint(_))));

        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(LadError::Io { .. })
        ));
    }

    #[test]
    fn hyper_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = tiny();
        save_checkpoint(&m, &p).unwrap();
        assert!(load_checkpoint_expecting(&p, m.hyper()).is_ok());
        let other = Hyper {
            dim: 16,
            ..m.hyper().clone()
        };
        assert!(matches!(
            load_checkpoint_expecting(&p, &other),
            Err(LadError::Checkpoint(_))
        ));
    }
}

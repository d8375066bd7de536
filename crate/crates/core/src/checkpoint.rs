//! Model checkpoints on disk.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    4 bytes  "MCKP"
//! version  u32      format version, currently 1
//! digest   u64      FNV-1a hash of the architecture dimensions
//! count    u32      number of parameter matrices
//! then per matrix:
//!   name_len u32, name bytes (UTF-8), rows u32, cols u32, rows*cols f64
//! ```
//!
//! Values are stored as f64, so a save/load round-trip is bit-identical.
//! The digest pins the architecture (frame features, trunk width, hidden
//! size, classes, context radius): loading a checkpoint into a config with
//! different dimensions fails rather than silently misbehaving.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::numerics::Matrix;
use crate::sampler::{ModelDims, ModelParameters, PARAM_COUNT};

const MAGIC: &[u8; 4] = b"MCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path} is not a checkpoint (bad magic)")]
    BadMagic { path: String },
    #[error("{path} has format version {got}, this build reads {want}")]
    UnsupportedVersion { path: String, got: u32, want: u32 },
    #[error("{path} is truncated or malformed: {detail}")]
    Truncated { path: String, detail: String },
    #[error(
        "{path} was written for a different architecture \
         (digest {stored:#018x}, these dimensions hash to {computed:#018x})"
    )]
    DigestMismatch { path: String, stored: u64, computed: u64 },
    #[error("{path} does not contain parameter {name:?}")]
    MissingParam { path: String, name: String },
    #[error("{path}: {detail}")]
    BadShape { path: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// FNV-1a over the architecture dimensions, in a fixed field order.
pub fn config_digest(dims: &ModelDims) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for byte in v.to_le_bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(dims.feat_dim as u64);
    eat(dims.obs_dim as u64);
    eat(dims.hidden as u64);
    eat(dims.classes as u64);
    eat(dims.context_radius as u64);
    hash
}

pub fn save_checkpoint(params: &ModelParameters, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&config_digest(&params.dims).to_le_bytes())?;
    w.write_all(&(PARAM_COUNT as u32).to_le_bytes())?;
    for (name, matrix) in params.entries() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(matrix.rows() as u32).to_le_bytes())?;
        w.write_all(&(matrix.cols() as u32).to_le_bytes())?;
        for &v in matrix.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                path: self.path.to_string(),
                detail: format!("ran out of bytes reading {what}"),
            });
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Load a checkpoint, inferring the architecture from the stored matrix
/// shapes and verifying it against the stored digest.
pub fn load_checkpoint(path: &Path) -> Result<ModelParameters, CheckpointError> {
    let shown = path.display().to_string();
    let bytes = fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, at: 0, path: &shown };

    if c.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic { path: shown.clone() });
    }
    let version = c.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            path: shown.clone(),
            got: version,
            want: FORMAT_VERSION,
        });
    }
    let stored_digest = c.u64("config digest")?;
    let count = c.u32("matrix count")? as usize;

    let mut by_name: Vec<(String, Matrix)> = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "parameter name")?)
            .map_err(|_| CheckpointError::Truncated {
                path: shown.clone(),
                detail: format!("parameter {i} has a non-UTF-8 name"),
            })?
            .to_string();
        let rows = c.u32("matrix rows")? as usize;
        let cols = c.u32("matrix cols")? as usize;
        let len = rows.checked_mul(cols).ok_or_else(|| CheckpointError::Truncated {
            path: shown.clone(),
            detail: format!("{name}: rows * cols overflows"),
        })?;
        let raw = c.take(len * 8, "matrix values")?;
        let data = raw
            .chunks_exact(8)
            .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()))
            .collect();
        by_name.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if c.at != bytes.len() {
        return Err(CheckpointError::Truncated {
            path: shown.clone(),
            detail: format!("{} trailing bytes after the last matrix", bytes.len() - c.at),
        });
    }

    let find = |name: &str| -> Result<&Matrix, CheckpointError> {
        by_name
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| CheckpointError::MissingParam {
                path: shown.clone(),
                name: name.to_string(),
            })
    };

    let trunk_w1 = find("trunk_w1")?;
    let gru_wz = find("gru_wz")?;
    let gru_uz = find("gru_uz")?;
    let cls_w = find("cls_w")?;
    let obs_dim = trunk_w1.cols();
    let bad_shape = |detail: String| CheckpointError::BadShape { path: shown.clone(), detail };
    if obs_dim == 0 || gru_wz.rows() % obs_dim != 0 || (gru_wz.rows() / obs_dim) % 2 == 0 {
        return Err(bad_shape(format!(
            "gru_wz has {} rows, not an odd multiple of the trunk width {obs_dim}",
            gru_wz.rows()
        )));
    }
    let dims = ModelDims {
        feat_dim: trunk_w1.rows(),
        obs_dim,
        hidden: gru_uz.rows(),
        classes: cls_w.cols(),
        context_radius: (gru_wz.rows() / obs_dim - 1) / 2,
    };

    let expected = ModelParameters::zeros(dims);
    let mut matrices = Vec::with_capacity(PARAM_COUNT);
    for (name, reference) in expected.entries() {
        let m = find(name)?;
        if m.shape() != reference.shape() {
            return Err(bad_shape(format!(
                "{name} is {:?}, expected {:?}",
                m.shape(),
                reference.shape()
            )));
        }
        matrices.push(m.clone());
    }

    let computed = config_digest(&dims);
    if stored_digest != computed {
        return Err(CheckpointError::DigestMismatch {
            path: shown.clone(),
            stored: stored_digest,
            computed,
        });
    }

    Ok(ModelParameters::from_entry_values(dims, &matrices))
}

/// Load a checkpoint and require it to match `expected` dimensions, the
/// guard commands use between a config file and a checkpoint argument.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: ModelDims,
) -> Result<ModelParameters, CheckpointError> {
    let params = load_checkpoint(path)?;
    if params.dims != expected {
        return Err(CheckpointError::DigestMismatch {
            path: path.display().to_string(),
            stored: config_digest(&params.dims),
            computed: config_digest(&expected),
        });
    }
    Ok(params)
}

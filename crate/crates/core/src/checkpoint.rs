//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | field        | encoding                                             |
//! |--------------|------------------------------------------------------|
//! | magic        | 8 bytes `ITLCKPT\0`                                  |
//! | version      | u32, currently 1                                     |
//! | config       | u32 byte length + UTF-8 run configuration (TOML)     |
//! | epoch        | u64, number of completed epochs                      |
//! | seed         | u64, base seed of all counter-based random streams   |
//! | adam step    | u64                                                  |
//! | 9 matrices   | w_in, w_rec, w_out, m_in, m_rec, m_out, v_in, v_rec, v_out |
//! | silenced     | u32 length + one byte (0/1) per hidden unit          |
//!
//! Each matrix is a presence byte (0 = absent, only legal for the recurrent
//! slots), then u32 rows, u32 cols and `rows * cols` f64 values in row-major
//! order. Random streams are keyed by `(seed, epoch, index)`, so the seed and
//! the epoch counter together are the complete RNG state.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::matrix::Matrix;
use crate::network::NetworkWeights;
use crate::trainer::OptimState;

pub const MAGIC: &[u8; 8] = b"ITLCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub epoch: u64,
    pub seed: u64,
    pub weights: NetworkWeights,
    pub opt: OptimState,
    pub silenced: Vec<bool>,
}

fn put_matrix(out: &mut Vec<u8>, m: Option<&Matrix>) {
    match m {
        None => out.push(0),
        Some(m) => {
            out.push(1);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

fn put_set(out: &mut Vec<u8>, w: &NetworkWeights) {
    put_matrix(out, Some(&w.w_in));
    put_matrix(out, w.w_rec.as_ref());
    put_matrix(out, Some(&w.w_out));
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.opt.step.to_le_bytes());
        put_set(&mut out, &self.weights);
        put_set(&mut out, &self.opt.m);
        put_set(&mut out, &self.opt.v);
        out.extend_from_slice(&(self.silenced.len() as u32).to_le_bytes());
        out.extend(self.silenced.iter().map(|&s| s as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("configuration is not UTF-8".into()))?;
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let step = r.u64()?;
        let weights = r.set()?;
        let m = r.set()?;
        let v = r.set()?;
        let n = r.u32()? as usize;
        let silenced = r.take(n)?.iter().map(|&b| b != 0).collect();
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self { config, epoch, seed, weights, opt: OptimState { m, v, step }, silenced })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self) -> Result<Option<Matrix>, CheckpointError> {
        match self.take(1)?[0] {
            0 => Ok(None),
            1 => {
                let rows = self.u32()? as usize;
                let cols = self.u32()? as usize;
                let raw = self.take(rows * cols * 8)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
                Ok(Some(Matrix::from_vec(rows, cols, data)))
            }
            b => Err(CheckpointError::Corrupt(format!("bad presence flag {b}"))),
        }
    }

    fn set(&mut self) -> Result<NetworkWeights, CheckpointError> {
        let missing = || CheckpointError::Corrupt("required matrix missing".into());
        let w_in = self.matrix()?.ok_or_else(missing)?;
        let w_rec = self.matrix()?;
        let w_out = self.matrix()?.ok_or_else(missing)?;
        Ok(NetworkWeights { w_in, w_rec, w_out })
    }
}

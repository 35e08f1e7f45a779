//! Binary snapshot files ("VVF1"): one real scalar field per file.
//!
//! Layout, all little-endian:
//! - 4 magic bytes `VVF1`
//! - `u32` grid size `n` (must be even)
//! - `f64` time tag
//! - `n*n` nodal `f64` values, row-major.

use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"VVF1";

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("not a VVF1 file (bad magic)")]
    BadMagic,
    #[error("grid size {0} is not an even integer >= 8")]
    BadGridSize(u32),
    #[error("file ends before {expected} values were read")]
    Truncated { expected: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Raw contents of a snapshot file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSnapshot {
    pub n: usize,
    pub time_tag: f64,
    pub values: Array2<f64>,
}

pub fn write_snapshot(
    path: &Path,
    n: usize,
    time_tag: f64,
    values: &Array2<f64>,
) -> Result<(), SnapshotError> {
    assert_eq!(values.dim(), (n, n), "values must be n x n");
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&time_tag.to_le_bytes())?;
    for v in values.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<RawSnapshot, SnapshotError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| SnapshotError::BadMagic)?;
    if &magic != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let mut n_bytes = [0u8; 4];
    r.read_exact(&mut n_bytes)?;
    let n32 = u32::from_le_bytes(n_bytes);
    if n32 < 8 || n32 % 2 != 0 {
        return Err(SnapshotError::BadGridSize(n32));
    }
    let n = n32 as usize;
    let mut t_bytes = [0u8; 8];
    r.read_exact(&mut t_bytes)?;
    let time_tag = f64::from_le_bytes(t_bytes);
    let mut values = Vec::with_capacity(n * n);
    let mut buf = [0u8; 8];
    for _ in 0..n * n {
        r.read_exact(&mut buf)
            .map_err(|_| SnapshotError::Truncated { expected: n * n })?;
        values.push(f64::from_le_bytes(buf));
    }
    let values = Array2::from_shape_vec((n, n), values).expect("length checked");
    Ok(RawSnapshot { n, time_tag, values })
}

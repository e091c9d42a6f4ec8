//! Binary parameter dump.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "VBAECKPT"
//! version  u32
//! blocks   u32
//! per block:
//!   name_len u32, name (UTF-8), rows u64, cols u64, rows*cols f64 (row-major)
//! ```

use std::io::{Read, Write};

use ndarray::Array2;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VBAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, params: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, name, value) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.nrows() as u64).to_le_bytes())?;
        w.write_all(&(value.ncols() as u64).to_le_bytes())?;
        for x in value.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let magic: [u8; 8] = read_array(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n = u32::from_le_bytes(read_array(&mut r)?);
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated block name: {e}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let rows = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let cols = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            values.push(f64::from_le_bytes(read_array(&mut r)?));
        }
        let value = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        if store.index_of(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate block `{name}`")));
        }
        store.push(name, value);
    }
    Ok(store)
}

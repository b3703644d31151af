//! Binary parameter file for a trained two-channel student.
//!
//! Layout, all little-endian:
//!
//! ```text
//! K: u32 | version: u32          (8-byte header)
//! W_n: K·K f64, row-major
//! W_g: K·K f64, row-major
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{IcpoError, Result};
use crate::lsa::TwoChannelParams;

pub const PARAMS_VERSION: u32 = 1;

pub fn encode_params(tc: &TwoChannelParams) -> Vec<u8> {
    let k = tc.arms();
    let mut out = Vec::with_capacity(8 + 16 * k * k);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    for m in [&tc.wn, &tc.wg] {
        for i in 0..k {
            for j in 0..k {
                out.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_params(bytes: &[u8], path: &str) -> Result<TwoChannelParams> {
    let bad = |reason: String| IcpoError::Format {
        path: path.into(),
        reason,
    };
    if bytes.len() < 8 {
        return Err(bad("missing header".into()));
    }
    let k = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != PARAMS_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if bytes.len() != 8 + 16 * k * k {
        return Err(bad(format!(
            "expected {} bytes for K={k}, found {}",
            8 + 16 * k * k,
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[8..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let wn = DMatrix::from_row_slice(k, k, &values[..k * k]);
    let wg = DMatrix::from_row_slice(k, k, &values[k * k..]);
    TwoChannelParams::new(wn, wg).map_err(|e| bad(e.to_string()))
}

pub fn write_params(path: &Path, tc: &TwoChannelParams) -> Result<()> {
    fs::write(path, encode_params(tc))?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<TwoChannelParams> {
    let bytes = fs::read(path)?;
    decode_params(&bytes, &path.display().to_string())
}

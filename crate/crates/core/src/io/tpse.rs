//! TPSE embedding container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "TPSE"
//!      4     2  version, u16 LE (= 1)
//!      6     1  dtype, u8 (0 = f32)
//!      7     1  flags, u8 (reserved, 0)
//!      8     8  rows, u64 LE
//!     16     8  cols, u64 LE
//!     24     *  rows * cols f32 LE, row-major
//! ```
//!
//! No trailing bytes are allowed. Values are widened to `f64` on read.

use std::fs;
use std::path::Path;

use crate::error::{Result, TpsError};
use crate::numkernel::Mat;

pub const MAGIC: [u8; 4] = *b"TPSE";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 24;

pub fn encode(mat: &Mat) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + mat.as_slice().len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(0);
    out.extend_from_slice(&(mat.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(mat.cols() as u64).to_le_bytes());
    for &v in mat.as_slice() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(TpsError::NonFinite("value not representable as f32"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Mat> {
    let fail = |offset: usize, msg: String| TpsError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[0..4] != MAGIC {
        return Err(fail(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[0..4]))));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    if bytes[6] != DTYPE_F32 {
        return Err(fail(6, format!("unsupported dtype {}", bytes[6])));
    }
    if bytes[7] != 0 {
        return Err(fail(7, format!("reserved flags byte is {}", bytes[7])));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8-byte slice"));
    let rows = u64_at(8);
    let cols = u64_at(16);
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(8, format!("shape {rows}x{cols} overflows")))?;
    let have = (bytes.len() - HEADER_LEN) as u64;
    if have < payload {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: {have} of {payload} bytes for {rows}x{cols}"),
        ));
    }
    if have > payload {
        return Err(fail(
            HEADER_LEN + payload as usize,
            format!("{} trailing bytes", have - payload),
        ));
    }
    let mut data = Vec::with_capacity((rows * cols) as usize);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        if !v.is_finite() {
            return Err(fail(HEADER_LEN + 4 * i, "non-finite value".into()));
        }
        data.push(v as f64);
    }
    Mat::new(rows as usize, cols as usize, data)
}

pub fn read_tpse(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| TpsError::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_tpse(mat: &Mat, path: &Path) -> Result<()> {
    let bytes = encode(mat)?;
    fs::write(path, bytes).map_err(|e| TpsError::io(path, e))
}

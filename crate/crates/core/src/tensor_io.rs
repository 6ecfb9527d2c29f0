//! Standalone tensor files.
//!
//! Layout: magic `TNSR`, `u16` version, `u32` rank, `rank x u32` dims, then
//! the row-major payload as little-endian `f32`.

use std::fs;
use std::path::Path;

use crate::codec::{put_tensor, put_u16, Reader};
use crate::error::{ensure, ParseError, Result, SfdaError};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const TENSOR_VERSION: u16 = 1;

/// Bytes before the payload of a rank-`rank` tensor file.
pub fn header_len(rank: usize) -> usize {
    4 + 2 + 4 + 4 * rank
}

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    ensure!(
        t.data().iter().all(|&v| (v as f32).is_finite()),
        "refusing to write values that are not finite in single precision"
    );
    ensure!(
        t.shape().iter().all(|&d| d <= u32::MAX as usize),
        "tensor dimension exceeds u32: {:?}",
        t.shape()
    );
    let mut out = Vec::with_capacity(header_len(t.rank()) + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    put_u16(&mut out, TENSOR_VERSION);
    put_tensor(&mut out, t.shape(), t.data());
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    let version = r.u16()?;
    if version != TENSOR_VERSION {
        return Err(ParseError::UnsupportedVersion(version));
    }
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| SfdaError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| SfdaError::io(path, e))?;
    decode_tensor(&bytes).map_err(|source| SfdaError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

//! Little-endian binary encoding shared by tensor and model files.
//!
//! A tensor record is `u32 rank`, `rank x u32 dims`, then the row-major
//! payload as `f32`.

use crate::error::ParseError;
use crate::tensor::Tensor;

pub(crate) const MAX_RANK: u32 = 8;

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(ParseError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<(), ParseError> {
        let found: [u8; 4] = self.take(4)?.try_into().expect("4 bytes");
        if &found != expected {
            return Err(ParseError::BadMagic {
                expected: *expected,
                found,
            });
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self) -> Result<u16, ParseError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, ParseError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn tensor(&mut self) -> Result<Tensor, ParseError> {
        let rank = self.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(ParseError::Structure(format!(
                "tensor rank {rank} outside 1..={MAX_RANK}"
            )));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(self.u32()? as u64);
        }
        if dims.contains(&0) {
            return Err(ParseError::Structure(format!("zero dimension in {dims:?}")));
        }
        let numel = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .filter(|&bytes| bytes <= isize::MAX as u64)
            .ok_or_else(|| ParseError::DimOverflow(dims.clone()))?
            / 4;
        let payload = self.take(numel as usize * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let shape = dims.iter().map(|&d| d as usize).collect();
        Tensor::new(shape, data).map_err(|e| ParseError::Structure(e.to_string()))
    }

    pub(crate) fn finish(self) -> Result<(), ParseError> {
        match self.bytes.len() - self.pos {
            0 => Ok(()),
            n => Err(ParseError::TrailingBytes(n)),
        }
    }
}

pub(crate) fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_tensor(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

//! Shared binary layout for the gate, importance and head files.
//!
//! ```text
//! magic     [u8; 4]
//! version   u16
//! task_id   u32
//! count     u16
//! shapes    count × (rows u32, cols u32)
//! payload   format-specific
//! crc       u32, CRC-32 (IEEE) of the payload bytes
//! ```
//!
//! All multi-byte integers and floats are little-endian.

use crate::error::{Result, TssError};
use crate::tensor::Matrix;

pub const VERSION: u16 = 1;

/// Bytes before the payload for `count` tensors.
pub fn header_len(count: usize) -> usize {
    4 + 2 + 4 + 2 + 8 * count
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

pub fn write_header(
    out: &mut Vec<u8>,
    magic: &[u8; 4],
    task_id: u32,
    shapes: &[(usize, usize)],
) -> Result<()> {
    let count = u16::try_from(shapes.len())
        .map_err(|_| TssError::Format(format!("{} tensors exceed u16", shapes.len())))?;
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&task_id.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for &(r, c) in shapes {
        let r = u32::try_from(r).map_err(|_| TssError::Format("row count exceeds u32".into()))?;
        let c = u32::try_from(c).map_err(|_| TssError::Format("col count exceeds u32".into()))?;
        out.extend_from_slice(&r.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub task_id: u32,
    pub shapes: Vec<(usize, usize)>,
}

impl Header {
    pub fn element_count(&self) -> usize {
        self.shapes.iter().map(|&(r, c)| r * c).sum()
    }
}

/// Minimal forward-only reader over a byte slice.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TssError::Format(format!(
                "truncated: wanted {n} bytes at offset {}, {} available",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn read_header(reader: &mut Reader<'_>, magic: &[u8; 4]) -> Result<Header> {
    let got = reader.take(4)?;
    if got != magic {
        return Err(TssError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = reader.u16()?;
    if version != VERSION {
        return Err(TssError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let task_id = reader.u32()?;
    let count = reader.u16()? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let r = reader.u32()? as usize;
        let c = reader.u32()? as usize;
        shapes.push((r, c));
    }
    Ok(Header { task_id, shapes })
}

/// Reads the payload of `len` bytes and the trailing CRC, and checks both the
/// checksum and that nothing follows.
pub fn read_checked_payload<'a>(reader: &mut Reader<'a>, len: usize) -> Result<&'a [u8]> {
    let payload = reader.take(len)?;
    let stored = reader.u32()?;
    let actual = crc32(payload);
    if stored != actual {
        return Err(TssError::Format(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    if reader.remaining() != 0 {
        return Err(TssError::Format(format!(
            "{} trailing bytes after CRC",
            reader.remaining()
        )));
    }
    Ok(payload)
}

/// Encodes a set of real-valued tensors with a 64-bit float payload.
pub fn encode_floats(magic: &[u8; 4], task_id: u32, tensors: &[Matrix]) -> Result<Vec<u8>> {
    let shapes: Vec<_> = tensors.iter().map(Matrix::shape).collect();
    let n: usize = tensors.iter().map(Matrix::len).sum();
    let mut out = Vec::with_capacity(header_len(shapes.len()) + 8 * n + 4);
    write_header(&mut out, magic, task_id, &shapes)?;
    let start = out.len();
    for t in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_floats(magic: &[u8; 4], bytes: &[u8]) -> Result<(u32, Vec<Matrix>)> {
    let mut reader = Reader::new(bytes);
    let header = read_header(&mut reader, magic)?;
    let payload = read_checked_payload(&mut reader, 8 * header.element_count())?;
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let mut tensors = Vec::with_capacity(header.shapes.len());
    for &(r, c) in &header.shapes {
        let data: Vec<f64> = values.by_ref().take(r * c).collect();
        tensors.push(Matrix::from_vec(r, c, data)?);
    }
    Ok((header.task_id, tensors))
}

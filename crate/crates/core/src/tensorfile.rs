//! Little-endian container for a JSON header plus named `f32` tensors,
//! shared by the model and fusion-head checkpoints:
//!
//! ```text
//! magic[4] | version u32 | header_len u32 | header (JSON) | tensor_count u32 |
//!   tensor_count × (name_len u32 | name | ndim u32 | ndim × u32 | f32 data) | crc32 u32
//! ```
//!
//! The CRC32 covers every byte before the trailer.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub header: String,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

pub fn encode(magic: &[u8; 4], version: u32, file: &TensorFile) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(file.header.len() as u32).to_le_bytes());
    out.extend_from_slice(file.header.as_bytes());
    out.extend_from_slice(&(file.tensors.len() as u32).to_le_bytes());
    for (name, m) in &file.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(magic: &[u8; 4], version: u32, bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "file too short for header"));
    }
    if &bytes[0..4] != magic {
        return Err(Error::format(
            0,
            format!("bad magic {:?}, expected {:?}", &bytes[0..4], std::str::from_utf8(magic).unwrap_or("?")),
        ));
    }
    let found = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if found != version {
        return Err(Error::Version {
            found,
            expected: version,
        });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut cur = Cursor { bytes: body, pos: 8 };
    let hlen = cur.u32("header length")? as usize;
    let header = std::str::from_utf8(cur.take(hlen, "header")?)
        .map_err(|e| Error::format(12, format!("header is not UTF-8: {e}")))?
        .to_string();
    let count = cur.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let nlen = cur.u32("name length")? as usize;
        let at = cur.pos as u64;
        let name = std::str::from_utf8(cur.take(nlen, "tensor name")?)
            .map_err(|e| Error::format(at, format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let ndim = cur.u32("ndim")?;
        if ndim != 2 {
            return Err(Error::format(cur.pos as u64, format!("tensor {name}: expected 2 dims, got {ndim}")));
        }
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(cur.pos as u64, "tensor size overflows"))?;
        let raw = cur.take(n, &format!("tensor {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Matrix::new(rows, cols, data)?));
    }
    if cur.pos != body.len() {
        return Err(Error::format(cur.pos as u64, "trailing bytes before checksum"));
    }
    Ok(TensorFile { header, tensors })
}

pub fn save(path: &Path, magic: &[u8; 4], version: u32, file: &TensorFile) -> Result<()> {
    let bytes = encode(magic, version, file);
    let mut f = File::create(path).map_err(Error::file(path))?;
    f.write_all(&bytes).map_err(Error::file(path))?;
    Ok(())
}

pub fn load(path: &Path, magic: &[u8; 4], version: u32) -> Result<TensorFile> {
    let bytes = std::fs::read(path).map_err(Error::file(path))?;
    decode(magic, version, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        TensorFile {
            header: r#"{"a":1}"#.into(),
            tensors: vec![
                ("w".into(), Matrix::from_f64(2, 3, &[1., 2., 3., 4., 5., 6.]).unwrap()),
                ("b".into(), Matrix::zeros(1, 3)),
            ],
        }
    }

    #[test]
    fn round_trip() {
        let bytes = encode(b"TEST", 3, &sample());
        assert_eq!(decode(b"TEST", 3, &bytes).unwrap(), sample());
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = encode(b"TEST", 3, &sample());
        for i in 8..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(decode(b"TEST", 3, &b).is_err(), "flip at {i} undetected");
        }
        let mut b = bytes.clone();
        b[20] ^= 1;
        assert!(matches!(decode(b"TEST", 3, &b), Err(Error::Checksum { .. })));
    }

    #[test]
    fn version_and_magic_checked() {
        let bytes = encode(b"TEST", 2, &sample());
        assert!(matches!(
            decode(b"TEST", 3, &bytes),
            Err(Error::Version { found: 2, expected: 3 })
        ));
        assert!(matches!(decode(b"XXXX", 2, &bytes), Err(Error::Format { offset: 0, .. })));
        assert!(decode(b"TEST", 2, &bytes[..10]).is_err());
    }
}

//! `UQTE` embedding file, all little-endian:
//!
//! ```text
//! "UQTE" | version u32 = 1 | dim u32 | count u64 | count × (user_id u64, source u8, dim × f32)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EmbeddingRecord, SourceTag};
use crate::error::{Error, Result};
use crate::ndmath::Matrix;

const MAGIC: &[u8; 4] = b"UQTE";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 20;

fn record_len(dim: u32) -> u64 {
    8 + 1 + 4 * dim as u64
}

pub fn encode_embeddings<W: Write>(records: &[EmbeddingRecord], mut w: W) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.dim());
    if let Some(bad) = records.iter().find(|r| r.dim() != dim) {
        return Err(Error::invalid(format!(
            "record for user {} has dim {}, expected {dim}",
            bad.user_id,
            bad.dim()
        )));
    }
    if records.iter().any(|r| !r.vector.is_finite()) {
        return Err(Error::NonFinite("embedding record".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        w.write_all(&r.user_id.to_le_bytes())?;
        w.write_all(&[r.source.code()])?;
        for v in r.vector.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Decodes records from `r`, which holds exactly `total_len` bytes.
///
/// The header and declared length are validated before any record storage
/// is allocated.
pub fn decode_embeddings<R: Read>(mut r: R, total_len: u64) -> Result<Vec<EmbeddingRecord>> {
    if total_len < HEADER_LEN {
        return Err(Error::format(
            total_len,
            format!("file is {total_len} bytes, shorter than the {HEADER_LEN}-byte header"),
        ));
    }
    let mut header = [0u8; HEADER_LEN as usize];
    r.read_exact(&mut header)?;
    if &header[0..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"UQTE\"", &header[0..4])));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(header[12..20].try_into().unwrap());
    if dim == 0 && count > 0 {
        return Err(Error::format(8, "zero embedding dimension"));
    }
    let expected = count
        .checked_mul(record_len(dim))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::format(12, "record count overflows"))?;
    if expected != total_len {
        return Err(Error::format(
            total_len.min(expected),
            format!("expected {expected} bytes for {count} records of dim {dim}, found {total_len}"),
        ));
    }

    let mut records = Vec::with_capacity(count as usize);
    let mut buf = vec![0u8; record_len(dim) as usize];
    for i in 0..count {
        let offset = HEADER_LEN + i * record_len(dim);
        r.read_exact(&mut buf)
            .map_err(|e| Error::format(offset, format!("record {i}: {e}")))?;
        let user_id = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        let source = SourceTag::from_code(buf[8])
            .ok_or_else(|| Error::format(offset + 8, format!("invalid source code {}", buf[8])))?;
        let values: Vec<f32> = buf[9..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(offset + 9, format!("record {i} has non-finite values")));
        }
        records.push(EmbeddingRecord {
            user_id,
            source,
            vector: Matrix::row_vector(values),
        });
    }
    Ok(records)
}

pub fn save_embeddings(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    let f = File::create(path).map_err(Error::file(path))?;
    encode_embeddings(records, BufWriter::new(f))
}

pub fn load_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let f = File::open(path).map_err(Error::file(path))?;
    let len = f.metadata().map_err(Error::file(path))?.len();
    decode_embeddings(BufReader::new(f), len)
}

//! Token files.
//!
//! Binary (little-endian):
//!
//! ```text
//! "UQTT" | version u32 | vocab_len u32 | vocabulary JSON | count u64 |
//!   count × (user_id u64 | one index per position) | crc32 u32
//! ```
//!
//! Each position stores its id relative to the offset of the block it draws
//! from, using the narrowest of 1, 2 or 4 bytes that fits that block's size.
//! With `K ≤ 256` and at most 256 special tokens, every token takes one byte.
//!
//! JSONL: one `{"user_id":7,"tokens":[1,2,3]}` object per line, absolute ids.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TokenVocabulary, UserTokenSequence};
use crate::error::{Error, Result};

pub const TOKENS_MAGIC: &[u8; 4] = b"UQTT";
pub const TOKENS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenFormat {
    Binary,
    Jsonl,
}

/// Decoded token file. JSONL files carry no vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenFile {
    pub vocabulary: Option<TokenVocabulary>,
    pub sequences: Vec<UserTokenSequence>,
}

fn width(size: u32) -> usize {
    if size <= 1 << 8 {
        1
    } else if size <= 1 << 16 {
        2
    } else {
        4
    }
}

fn widths(vocab: &TokenVocabulary) -> Result<Vec<(u32, usize)>> {
    (0..vocab.sequence_len())
        .map(|p| vocab.position_range(p).map(|(off, size)| (off, width(size))))
        .collect()
}

pub fn encode_tokens_binary(
    sequences: &[UserTokenSequence],
    vocab: &TokenVocabulary,
) -> Result<Vec<u8>> {
    vocab.validate()?;
    let layout = widths(vocab)?;
    let header = serde_json::to_vec(vocab)?;
    let per_user = 8 + layout.iter().map(|w| w.1).sum::<usize>();
    let mut out = Vec::with_capacity(24 + header.len() + sequences.len() * per_user);
    out.extend_from_slice(TOKENS_MAGIC);
    out.extend_from_slice(&TOKENS_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(sequences.len() as u64).to_le_bytes());
    for s in sequences {
        vocab.check_sequence(&s.tokens, true)?;
        out.extend_from_slice(&s.user_id.to_le_bytes());
        for (&id, &(off, w)) in s.tokens.iter().zip(&layout) {
            let local = id - off;
            out.extend_from_slice(&local.to_le_bytes()[..w]);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_tokens_binary(bytes: &[u8]) -> Result<(TokenVocabulary, Vec<UserTokenSequence>)> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "file too short for token header"));
    }
    if &bytes[..4] != TOKENS_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"UQTT\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TOKENS_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TOKENS_VERSION,
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut pos = 8usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if body.len() - pos < n {
            return Err(Error::format(pos as u64, format!("truncated {what}")));
        }
        let s = &body[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let hlen = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
    let vocab: TokenVocabulary = serde_json::from_slice(take(hlen, "vocabulary")?)?;
    vocab.validate()?;
    let layout = widths(&vocab)?;
    let count = u64::from_le_bytes(take(8, "record count")?.try_into().unwrap());
    let per_user = 8 + layout.iter().map(|w| w.1).sum::<usize>();
    let expected = (count as u128) * per_user as u128;
    let remaining = (body.len() - 20 - hlen) as u128;
    if expected != remaining {
        return Err(Error::format(
            (20 + hlen) as u64,
            format!("{count} records need {expected} bytes, found {remaining}"),
        ));
    }
    let mut sequences = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let user_id = u64::from_le_bytes(take(8, "user id")?.try_into().unwrap());
        let mut tokens = Vec::with_capacity(layout.len());
        for &(off, w) in &layout {
            let mut buf = [0u8; 4];
            buf[..w].copy_from_slice(take(w, "token")?);
            tokens.push(off + u32::from_le_bytes(buf));
        }
        vocab.check_sequence(&tokens, true)?;
        sequences.push(UserTokenSequence { user_id, tokens });
    }
    Ok((vocab, sequences))
}

pub fn write_tokens_jsonl<W: Write>(sequences: &[UserTokenSequence], mut w: W) -> Result<()> {
    for s in sequences {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tokens_jsonl<R: BufRead>(r: R) -> Result<Vec<UserTokenSequence>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            let s: UserTokenSequence = serde_json::from_str(&line)
                .map_err(|e| Error::format(offset, format!("bad token line: {e}")))?;
            out.push(s);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

pub fn serialize_tokens(
    sequences: &[UserTokenSequence],
    vocab: &TokenVocabulary,
    path: &Path,
    format: TokenFormat,
) -> Result<()> {
    let bytes = match format {
        TokenFormat::Binary => encode_tokens_binary(sequences, vocab)?,
        TokenFormat::Jsonl => {
            for s in sequences {
                vocab.check_sequence(&s.tokens, true)?;
            }
            let mut buf = Vec::new();
            write_tokens_jsonl(sequences, &mut buf)?;
            buf
        }
    };
    std::fs::write(path, bytes).map_err(Error::file(path))
}

/// Reads either format, telling them apart by the binary magic.
pub fn deserialize_tokens(path: &Path) -> Result<TokenFile> {
    let bytes = std::fs::read(path).map_err(Error::file(path))?;
    if bytes.starts_with(TOKENS_MAGIC) {
        let (vocab, sequences) = decode_tokens_binary(&bytes)?;
        Ok(TokenFile {
            vocabulary: Some(vocab),
            sequences,
        })
    } else {
        Ok(TokenFile {
            vocabulary: None,
            sequences: read_tokens_jsonl(BufReader::new(&bytes[..]))?,
        })
    }
}

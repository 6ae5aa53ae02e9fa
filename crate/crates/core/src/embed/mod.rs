//! Embedding ingestion: source tags, per-user records, the `UQTE` file
//! format, embedding providers, and a synthetic multi-source generator.

mod provider;
mod synth;
mod uqte;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

pub use provider::{
    fetch_remote_embeddings, EmbeddingProvider, HashingProvider, HttpProvider, MapProvider,
    DEFAULT_QUERY,
};
pub use synth::{synth_generate, LabelTable, Latents, SyntheticConfig, SyntheticData};
pub use uqte::{decode_embeddings, encode_embeddings, load_embeddings, save_embeddings};

/// Data source a user embedding came from. The discriminant is the stable
/// on-disk encoding and also the canonical ordering of sources in token
/// sequences.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum SourceTag {
    Bill = 0,
    #[serde(rename = "SPM")]
    Spm = 1,
    MiniProgram = 2,
    App = 3,
    Search = 4,
    Tabular = 5,
}

impl SourceTag {
    pub const ALL: [SourceTag; 6] = [
        SourceTag::Bill,
        SourceTag::Spm,
        SourceTag::MiniProgram,
        SourceTag::App,
        SourceTag::Search,
        SourceTag::Tabular,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceTag::Bill => "Bill",
            SourceTag::Spm => "SPM",
            SourceTag::MiniProgram => "MiniProgram",
            SourceTag::App => "App",
            SourceTag::Search => "Search",
            SourceTag::Tabular => "Tabular",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown source tag `{s}`")))
    }
}

/// Sorts and deduplicates a source list into canonical order.
pub fn canonical_sources(sources: &[SourceTag]) -> Vec<SourceTag> {
    let mut v = sources.to_vec();
    v.sort();
    v.dedup();
    v
}

/// One user × source embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub user_id: u64,
    pub source: SourceTag,
    pub vector: Matrix<f32>,
}

impl EmbeddingRecord {
    pub fn new(user_id: u64, source: SourceTag, values: Vec<f32>) -> Self {
        Self {
            user_id,
            source,
            vector: Matrix::row_vector(values),
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.cols()
    }
}

/// Per-user engagement counts used to rank users that share a token sequence.
/// Users without an entry count as 0.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngagementTable {
    counts: BTreeMap<u64, u64>,
}

impl EngagementTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, user_id: u64, count: u64) {
        self.counts.insert(user_id, count);
    }

    pub fn get(&self, user_id: u64) -> u64 {
        self.counts.get(&user_id).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    /// Writes `user_id,engagement` CSV with a header row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "user_id,engagement")?;
        for (u, c) in self.iter() {
            writeln!(w, "{u},{c}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut table = Self::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let (u, c) = line
                .split_once(',')
                .ok_or_else(|| Error::format(i as u64, format!("line {}: expected 2 fields", i + 1)))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<u64>()
                    .map_err(|e| Error::format(i as u64, format!("line {}: {e}", i + 1)))
            };
            table.insert(parse(u)?, parse(c)?);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(Error::file(path))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(Error::file(path))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

impl FromIterator<(u64, u64)> for EngagementTable {
    fn from_iter<I: IntoIterator<Item = (u64, u64)>>(iter: I) -> Self {
        Self {
            counts: iter.into_iter().collect(),
        }
    }
}

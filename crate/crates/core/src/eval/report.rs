use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codebook::{CodebookStack, LevelUtilization, Scope};
use crate::embed::SourceTag;
use crate::error::{Error, Result};
use crate::ndmath::Real;
use crate::tokenizer::{detokenize, Position, TokenVocabulary, UserTokenSequence};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Codebook utilization over a tokenized corpus. See the README for the
/// field-by-field schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilizationReport {
    pub schema_version: u32,
    pub num_users: usize,
    pub sources: Vec<SourceTag>,
    pub codebook_size: u32,
    pub levels: Vec<LevelUtilization>,
    /// Distinct special tokens in use, i.e. the largest collision group.
    pub special_used: usize,
}

/// Counts code usage per (scope, level) block. Shared blocks pool the codes
/// of every source.
pub fn utilization_from_tokens(
    sequences: &[UserTokenSequence],
    vocab: &TokenVocabulary,
) -> Result<UtilizationReport> {
    vocab.validate()?;
    let mut hist: BTreeMap<(Scope, usize), Vec<u64>> = vocab
        .blocks
        .iter()
        .map(|b| ((b.scope, b.level), vec![0; b.size as usize]))
        .collect();
    let mut special = vec![false; vocab.special_size as usize];
    let positions: Vec<Position> = (0..vocab.sequence_len()).map(|p| vocab.position(p)).collect::<Result<_>>()?;
    for s in sequences {
        vocab.check_sequence(&s.tokens, true)?;
        for (&t, pos) in s.tokens.iter().zip(&positions) {
            match pos {
                Position::Code { block, .. } => {
                    hist.get_mut(&(block.scope, block.level)).expect("block")[(t - block.offset) as usize] += 1;
                }
                Position::Special => special[(t - vocab.special_offset) as usize] = true,
            }
        }
    }
    let levels = vocab
        .blocks
        .iter()
        .map(|b| {
            let histogram = hist.remove(&(b.scope, b.level)).expect("block");
            let used = histogram.iter().filter(|&&h| h > 0).count();
            LevelUtilization {
                scope: b.scope,
                level: b.level,
                used,
                total: b.size as usize,
                ratio: used as f64 / b.size as f64,
                histogram,
            }
        })
        .collect();
    Ok(UtilizationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        num_users: sequences.len(),
        sources: vocab.sources.clone(),
        codebook_size: vocab.codebook_size,
        levels,
        special_used: special.iter().filter(|&&u| u).count(),
    })
}

/// Parses a report and checks its internal consistency.
pub fn validate_report(json: &str) -> Result<UtilizationReport> {
    let r: UtilizationReport = serde_json::from_str(json)?;
    let bad = |msg: String| Err(Error::format(0, msg));
    if r.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Version {
            found: r.schema_version,
            expected: REPORT_SCHEMA_VERSION,
        });
    }
    for l in &r.levels {
        let tag = format!("{}/{}", l.scope, l.level);
        if l.histogram.len() != l.total || l.total != r.codebook_size as usize {
            return bad(format!("{tag}: histogram has {} bins, total {}", l.histogram.len(), l.total));
        }
        let used = l.histogram.iter().filter(|&&h| h > 0).count();
        if used != l.used || (l.ratio - used as f64 / l.total as f64).abs() > 1e-12 {
            return bad(format!("{tag}: used {} / ratio {} disagree with histogram", l.used, l.ratio));
        }
        let per_user = match l.scope {
            Scope::Shared => r.sources.len(),
            Scope::Specific(s) if r.sources.contains(&s) => 1,
            Scope::Specific(s) => return bad(format!("{tag}: source {s} not in report")),
        };
        let count: u64 = l.histogram.iter().sum();
        if count != (r.num_users * per_user) as u64 {
            return bad(format!("{tag}: {count} assignments for {} users", r.num_users));
        }
    }
    if r.num_users > 0 && r.special_used == 0 {
        return bad("special_used is 0 for a non-empty corpus".into());
    }
    Ok(r)
}

/// One row per (user, source): `user_id,source,z0,…,z{d_c−1}`, where `z`
/// is the quantized vector rebuilt from the tokens.
pub fn write_zhat_csv<T: Real, W: Write>(
    sequences: &[UserTokenSequence],
    stack: &CodebookStack<T>,
    vocab: &TokenVocabulary,
    mut w: W,
) -> Result<usize> {
    write!(w, "user_id,source")?;
    for i in 0..stack.code_dim() {
        write!(w, ",z{i}")?;
    }
    writeln!(w)?;
    let mut rows = 0;
    for s in sequences {
        for (source, z) in detokenize(s, stack, vocab)? {
            write!(w, "{},{}", s.user_id, source)?;
            for v in z.data() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
            rows += 1;
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub utilization: PathBuf,
    pub zhat: PathBuf,
}

/// Writes `utilization.json` and `zhat.csv` into `dir`.
pub fn export_report<T: Real>(
    stack: &CodebookStack<T>,
    vocab: &TokenVocabulary,
    sequences: &[UserTokenSequence],
    dir: &Path,
) -> Result<ReportPaths> {
    std::fs::create_dir_all(dir).map_err(Error::file(dir))?;
    let report = utilization_from_tokens(sequences, vocab)?;
    let paths = ReportPaths {
        utilization: dir.join("utilization.json"),
        zhat: dir.join("zhat.csv"),
    };
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&paths.utilization, json).map_err(Error::file(&paths.utilization))?;
    let f = std::fs::File::create(&paths.zhat).map_err(Error::file(&paths.zhat))?;
    let mut w = std::io::BufWriter::new(f);
    write_zhat_csv(sequences, stack, vocab, &mut w)?;
    w.flush()?;
    Ok(paths)
}

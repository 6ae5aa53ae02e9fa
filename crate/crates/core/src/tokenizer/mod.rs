//! Token vocabulary layout, per-user sequence assembly, engagement-ranked
//! collision tokens, and the inverse lookup back to quantized vectors.
//!
//! Vocabulary blocks, in id order: one block per shared level, then for each
//! source (canonical order) one block per specific level, then the special
//! block. A token id is its block offset plus the code index.
//!
//! A user's sequence lists, for each source in canonical order, that source's
//! `L_c` shared-level tokens followed by its `L_u` specific-level tokens, and
//! ends with a single special token.

mod format;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::codebook::{CodebookStack, Scope};
use crate::embed::{canonical_sources, EngagementTable, SourceTag};
use crate::error::{Error, Result};
use crate::mrqvae::{MrqModel, QuantizeResult, Sample};
use crate::ndmath::{Matrix, Real};

pub use format::{
    decode_tokens_binary, deserialize_tokens, encode_tokens_binary, read_tokens_jsonl,
    serialize_tokens, write_tokens_jsonl, TokenFile, TokenFormat, TOKENS_MAGIC, TOKENS_VERSION,
};

pub const DEFAULT_SPECIAL_CAPACITY: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabBlock {
    pub scope: Scope,
    /// Global level index (0-based).
    pub level: usize,
    pub offset: u32,
    pub size: u32,
}

/// What a sequence position holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Code { source: SourceTag, block: VocabBlock },
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenVocabulary {
    pub sources: Vec<SourceTag>,
    pub shared_levels: usize,
    pub specific_levels: usize,
    pub codebook_size: u32,
    pub blocks: Vec<VocabBlock>,
    pub special_offset: u32,
    pub special_size: u32,
}

impl TokenVocabulary {
    pub fn new(
        sources: &[SourceTag],
        shared_levels: usize,
        specific_levels: usize,
        codebook_size: u32,
        special_capacity: u32,
    ) -> Result<Self> {
        if sources.is_empty() || shared_levels + specific_levels == 0 {
            return Err(Error::invalid("vocabulary needs at least one source and one level"));
        }
        if codebook_size < 2 || special_capacity == 0 {
            return Err(Error::invalid("codebook size must be ≥ 2 and special capacity ≥ 1"));
        }
        let sources = canonical_sources(sources);
        let mut blocks = Vec::new();
        let mut offset: u64 = 0;
        let mut push = |scope, level| {
            blocks.push(VocabBlock {
                scope,
                level,
                offset: offset as u32,
                size: codebook_size,
            });
            offset += codebook_size as u64;
        };
        for l in 0..shared_levels {
            push(Scope::Shared, l);
        }
        for &s in &sources {
            for l in shared_levels..shared_levels + specific_levels {
                push(Scope::Specific(s), l);
            }
        }
        if offset + special_capacity as u64 > u32::MAX as u64 {
            return Err(Error::invalid("vocabulary exceeds 32-bit id space"));
        }
        Ok(Self {
            sources,
            shared_levels,
            specific_levels,
            codebook_size,
            blocks,
            special_offset: offset as u32,
            special_size: special_capacity,
        })
    }

    pub fn for_stack<T: Real>(stack: &CodebookStack<T>, special_capacity: u32) -> Result<Self> {
        Self::new(
            &stack.sources(),
            stack.shared_levels(),
            stack.specific_levels(),
            stack.codebook_size() as u32,
            special_capacity,
        )
    }

    pub fn levels(&self) -> usize {
        self.shared_levels + self.specific_levels
    }

    pub fn vocab_size(&self) -> u32 {
        self.special_offset + self.special_size
    }

    /// Tokens per user before the special token.
    pub fn base_len(&self) -> usize {
        self.sources.len() * self.levels()
    }

    pub fn sequence_len(&self) -> usize {
        self.base_len() + 1
    }

    pub fn block(&self, scope: Scope, level: usize) -> Option<&VocabBlock> {
        self.blocks.iter().find(|b| b.scope == scope && b.level == level)
    }

    pub fn token_id(&self, scope: Scope, level: usize, code: usize) -> Result<u32> {
        let b = self
            .block(scope, level)
            .ok_or_else(|| Error::invalid(format!("no vocabulary block for {scope}/{level}")))?;
        if code >= b.size as usize {
            return Err(Error::TokenOutOfRange {
                id: code as u64,
                reason: format!("code index ≥ K = {} at {scope}/{level}", b.size),
            });
        }
        Ok(b.offset + code as u32)
    }

    pub fn special_id(&self, rank: usize) -> Result<u32> {
        if rank >= self.special_size as usize {
            return Err(Error::TokenOutOfRange {
                id: rank as u64,
                reason: format!("special block holds {} tokens", self.special_size),
            });
        }
        Ok(self.special_offset + rank as u32)
    }

    /// Layout of sequence position `pos`.
    pub fn position(&self, pos: usize) -> Result<Position> {
        let levels = self.levels();
        if pos == self.base_len() {
            return Ok(Position::Special);
        }
        if pos > self.base_len() {
            return Err(Error::invalid(format!("position {pos} beyond sequence length")));
        }
        let source = self.sources[pos / levels];
        let level = pos % levels;
        let scope = if level < self.shared_levels {
            Scope::Shared
        } else {
            Scope::Specific(source)
        };
        Ok(Position::Code {
            source,
            block: *self.block(scope, level).expect("layout covers every level"),
        })
    }

    /// `(offset, size)` of the block that position `pos` draws from.
    pub fn position_range(&self, pos: usize) -> Result<(u32, u32)> {
        Ok(match self.position(pos)? {
            Position::Code { block, .. } => (block.offset, block.size),
            Position::Special => (self.special_offset, self.special_size),
        })
    }

    /// Checks that each id lies in the block its position requires.
    pub fn check_sequence(&self, tokens: &[u32], with_special: bool) -> Result<()> {
        let want = if with_special { self.sequence_len() } else { self.base_len() };
        if tokens.len() != want {
            return Err(Error::invalid(format!(
                "sequence has {} tokens, expected {want}",
                tokens.len()
            )));
        }
        for (pos, &id) in tokens.iter().enumerate() {
            let (off, size) = self.position_range(pos)?;
            if id < off || id - off >= size {
                return Err(Error::TokenOutOfRange {
                    id: id as u64,
                    reason: format!("position {pos} expects ids in [{off}, {})", off + size),
                });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fresh = Self::new(
            &self.sources,
            self.shared_levels,
            self.specific_levels,
            self.codebook_size,
            self.special_size,
        )?;
        if &fresh != self {
            return Err(Error::invalid("vocabulary layout is inconsistent"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserTokenSequence {
    pub user_id: u64,
    pub tokens: Vec<u32>,
}

/// Lays out one user's per-source code paths as token ids (no special token).
pub fn assemble_tokens<T: Real>(
    user_id: u64,
    results: &[&QuantizeResult<T>],
    vocab: &TokenVocabulary,
) -> Result<UserTokenSequence> {
    let mut tokens = Vec::with_capacity(vocab.base_len());
    for &s in &vocab.sources {
        let r = results
            .iter()
            .find(|r| r.source == s)
            .ok_or_else(|| Error::invalid(format!("user {user_id}: no quantization for source {s}")))?;
        if r.levels() != vocab.levels() {
            return Err(Error::invalid(format!(
                "user {user_id}, source {s}: {} levels, vocabulary has {}",
                r.levels(),
                vocab.levels()
            )));
        }
        for l in 0..r.levels() {
            tokens.push(vocab.token_id(r.scopes[l], l, r.codes[l])?);
        }
    }
    Ok(UserTokenSequence { user_id, tokens })
}

/// Appends the special token to every base sequence. Users sharing a base
/// sequence are ranked by engagement (descending, ties by ascending user id)
/// and the member at rank k gets special token k; unique users get rank 0.
/// Output order follows the input.
pub fn resolve_collisions(
    sequences: &[UserTokenSequence],
    engagement: &EngagementTable,
    vocab: &TokenVocabulary,
) -> Result<Vec<UserTokenSequence>> {
    let mut groups: HashMap<&[u32], Vec<usize>> = HashMap::new();
    let mut seen = HashMap::with_capacity(sequences.len());
    for (i, s) in sequences.iter().enumerate() {
        vocab.check_sequence(&s.tokens, false)?;
        if seen.insert(s.user_id, i).is_some() {
            return Err(Error::invalid(format!("user {} appears twice", s.user_id)));
        }
        groups.entry(&s.tokens).or_default().push(i);
    }
    let mut rank = vec![0usize; sequences.len()];
    for members in groups.values_mut() {
        if members.len() > vocab.special_size as usize {
            return Err(Error::Capacity {
                group_size: members.len(),
                capacity: vocab.special_size as usize,
            });
        }
        members.sort_by(|&a, &b| {
            let (ua, ub) = (sequences[a].user_id, sequences[b].user_id);
            engagement.get(ub).cmp(&engagement.get(ua)).then(ua.cmp(&ub))
        });
        for (k, &i) in members.iter().enumerate() {
            rank[i] = k;
        }
    }
    sequences
        .iter()
        .zip(rank)
        .map(|(s, k)| {
            let mut tokens = s.tokens.clone();
            tokens.push(vocab.special_id(k)?);
            Ok(UserTokenSequence {
                user_id: s.user_id,
                tokens,
            })
        })
        .collect()
}

/// Per-source `ẑ` named by a sequence (with or without its special token):
/// the selected codewords summed in level order, exactly as `quantize` does.
pub fn detokenize<T: Real>(
    sequence: &UserTokenSequence,
    stack: &CodebookStack<T>,
    vocab: &TokenVocabulary,
) -> Result<BTreeMap<SourceTag, Matrix<T>>> {
    let with_special = sequence.tokens.len() == vocab.sequence_len();
    vocab.check_sequence(&sequence.tokens, with_special)?;
    let dim = stack.code_dim();
    let mut out = BTreeMap::new();
    for (si, &s) in vocab.sources.iter().enumerate() {
        let mut z = Matrix::zeros(1, dim);
        for l in 0..vocab.levels() {
            let pos = si * vocab.levels() + l;
            let (off, _) = vocab.position_range(pos)?;
            let book = stack.level_book(s, l)?;
            let code = (sequence.tokens[pos] - off) as usize;
            if code >= book.size() {
                return Err(Error::TokenOutOfRange {
                    id: sequence.tokens[pos] as u64,
                    reason: format!("codebook {}/{l} has {} entries", book.scope, book.size()),
                });
            }
            for (q, &x) in z.data_mut().iter_mut().zip(book.entry(code)) {
                *q += x;
            }
        }
        out.insert(s, z);
    }
    Ok(out)
}

/// Quantizes every sample, assembles one sequence per user, and resolves
/// collisions. Users must have a sample for every configured source.
/// Sequences come back sorted by user id.
pub fn tokenize<T: Real>(
    model: &MrqModel<T>,
    samples: &[Sample<T>],
    engagement: &EngagementTable,
    special_capacity: u32,
) -> Result<(TokenVocabulary, Vec<UserTokenSequence>)> {
    let vocab = TokenVocabulary::for_stack(&model.codebooks, special_capacity)?;
    let quants = model.quantize_many(samples)?;
    let mut by_user: BTreeMap<u64, Vec<&QuantizeResult<T>>> = BTreeMap::new();
    for (s, q) in samples.iter().zip(&quants) {
        by_user.entry(s.user_id).or_default().push(q);
    }
    let base = by_user
        .iter()
        .map(|(&u, rs)| assemble_tokens(u, rs, &vocab))
        .collect::<Result<Vec<_>>>()?;
    let seqs = resolve_collisions(&base, engagement, &vocab)?;
    Ok((vocab, seqs))
}

#[cfg(test)]
mod tests;

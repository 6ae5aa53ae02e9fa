use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codebook::CodebookStack;
use crate::error::{Error, Result};
use crate::ndmath::{Matrix, Mlp, MlpCache, Real};
use crate::tensorfile::{self, TensorFile};
use crate::tokenizer::{Position, TokenVocabulary, UserTokenSequence};

pub const HEAD_MAGIC: &[u8; 4] = b"UQTF";
pub const HEAD_VERSION: u32 = 1;

/// Token embedding table plus an MLP over the mean token embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead<T = f32> {
    /// `vocab_size × d_cb`.
    pub table: Matrix<T>,
    pub mlp: Mlp<T>,
}

/// Values saved by [`FusionHead::forward_batch`] for the backward pass.
pub struct FusionCache<T> {
    tokens: Vec<Vec<u32>>,
    mlp: MlpCache<T>,
}

impl<T: Real> FusionHead<T> {
    /// Random table rows `N(0, 1/d_cb)` and a fresh MLP `d_cb → hidden… → out_dim`.
    pub fn new(vocab_size: usize, token_dim: usize, hidden: &[usize], out_dim: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || token_dim == 0 {
            return Err(Error::invalid("fusion head needs a non-empty vocabulary and token_dim ≥ 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (token_dim as f64).sqrt();
        let data = (0..vocab_size * token_dim)
            .map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let table = Matrix::new(vocab_size, token_dim, data)?;
        let mut sizes = vec![token_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(out_dim);
        let mlp = Mlp::new(&sizes, &mut rng)?;
        Ok(Self { table, mlp })
    }

    /// Like [`FusionHead::new`], but when `token_dim` equals the codebook
    /// dimension every code token starts as its codeword. Special tokens stay random.
    pub fn for_vocabulary(
        vocab: &TokenVocabulary,
        stack: &CodebookStack<T>,
        token_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut head = Self::new(vocab.vocab_size() as usize, token_dim, hidden, out_dim, seed)?;
        if token_dim == stack.code_dim() {
            for pos in 0..vocab.base_len() {
                if let Position::Code { source, block } = vocab.position(pos)? {
                    let book = stack.level_book(source, block.level)?;
                    for k in 0..block.size as usize {
                        head.table
                            .row_mut(block.offset as usize + k)
                            .copy_from_slice(book.entry(k));
                    }
                }
            }
        }
        Ok(head)
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn token_dim(&self) -> usize {
        self.table.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    fn mean_embedding(&self, tokens: &[u32]) -> Result<Vec<T>> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot fuse an empty token sequence"));
        }
        let mut acc = vec![T::zero(); self.token_dim()];
        for &t in tokens {
            if t as usize >= self.vocab_size() {
                return Err(Error::TokenOutOfRange {
                    id: t as u64,
                    reason: format!("fusion table has {} rows", self.vocab_size()),
                });
            }
            for (a, &v) in acc.iter_mut().zip(self.table.row(t as usize)) {
                *a += v;
            }
        }
        let inv = T::one() / T::lit(tokens.len() as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(acc)
    }

    /// `e^f` for one sequence.
    pub fn fuse(&self, sequence: &UserTokenSequence) -> Result<Matrix<T>> {
        let mean = Matrix::row_vector(self.mean_embedding(&sequence.tokens)?);
        self.mlp.forward(&mean)
    }

    pub fn forward_batch(&self, batch: &[&UserTokenSequence]) -> Result<(Matrix<T>, FusionCache<T>)> {
        let mut means = Matrix::zeros(batch.len(), self.token_dim());
        for (i, s) in batch.iter().enumerate() {
            means.row_mut(i).copy_from_slice(&self.mean_embedding(&s.tokens)?);
        }
        let (out, mlp) = self.mlp.forward_cached(&means)?;
        Ok((
            out,
            FusionCache {
                tokens: batch.iter().map(|s| s.tokens.clone()).collect(),
                mlp,
            },
        ))
    }

    /// Gradients in [`FusionHead::params`] order.
    pub fn backward(&self, cache: &FusionCache<T>, grad_out: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let (g_mean, g_mlp) = self.mlp.backward(&cache.mlp, grad_out)?;
        let mut g_table = Matrix::zeros(self.vocab_size(), self.token_dim());
        for (i, tokens) in cache.tokens.iter().enumerate() {
            let inv = T::one() / T::lit(tokens.len() as f64);
            for &t in tokens {
                for (dst, &g) in g_table.row_mut(t as usize).iter_mut().zip(g_mean.row(i)) {
                    *dst += g * inv;
                }
            }
        }
        let mut out = vec![g_table];
        out.extend(g_mlp);
        Ok(out)
    }

    /// `[table, w0, b0, w1, b1, …]`.
    pub fn params(&self) -> Vec<&Matrix<T>> {
        let mut v = vec![&self.table];
        v.extend(self.mlp.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = vec![&mut self.table];
        v.extend(self.mlp.params_mut());
        v
    }

    pub fn cast<U: Real>(&self) -> FusionHead<U> {
        FusionHead {
            table: self.table.cast(),
            mlp: self.mlp.cast(),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadHeader {
    sizes: Vec<usize>,
}

pub fn save_head<T: Real>(head: &FusionHead<T>, path: &Path) -> Result<()> {
    let mut sizes = vec![head.token_dim()];
    sizes.extend(head.mlp.layers.iter().map(|l| l.output_dim()));
    let mut tensors = vec![("table".to_string(), head.table.cast())];
    for (i, l) in head.mlp.layers.iter().enumerate() {
        tensors.push((format!("mlp.{i}.weight"), l.weight.cast()));
        tensors.push((format!("mlp.{i}.bias"), l.bias.cast()));
    }
    let file = TensorFile {
        header: serde_json::to_string(&HeadHeader { sizes })?,
        tensors,
    };
    tensorfile::save(path, HEAD_MAGIC, HEAD_VERSION, &file)
}

pub fn load_head<T: Real>(path: &Path) -> Result<FusionHead<T>> {
    let file = tensorfile::load(path, HEAD_MAGIC, HEAD_VERSION)?;
    let header: HeadHeader = serde_json::from_str(&file.header)?;
    if header.sizes.len() < 2 || file.tensors.len() != 1 + 2 * (header.sizes.len() - 1) {
        return Err(Error::format(0, "fusion head tensor count does not match its layer sizes"));
    }
    let vocab = file.tensors[0].1.rows();
    let mut head = FusionHead::<T>::new(
        vocab,
        header.sizes[0],
        &header.sizes[1..header.sizes.len() - 1],
        *header.sizes.last().unwrap(),
        0,
    )?;
    for (dst, (name, src)) in head.params_mut().into_iter().zip(&file.tensors) {
        if dst.shape() != src.shape() {
            return Err(Error::format(0, format!("tensor {name}: shape {:?}, expected {:?}", src.shape(), dst.shape())));
        }
        *dst = src.cast();
    }
    Ok(head)
}

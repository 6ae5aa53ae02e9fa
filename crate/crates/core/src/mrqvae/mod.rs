//! Multi-view residual-quantized autoencoder.
//!
//! For one user and source, the source's embeddings are mean-pooled and
//! projected by a shared MLP, encoded to `z`, and quantized greedily over
//! `L_c` shared levels followed by `L_u` levels that belong to the source.
//! The quantized sum `ẑ` goes through a per-source decoder that reconstructs
//! the pooled embedding. Training uses
//!
//! ```text
//! L_re = ‖X̂ − X‖²
//! L_rq = Σ_l ‖sg[r] − v‖² + α‖r − sg[v]‖²      (r: residual entering level l, v: its codeword)
//! ```
//!
//! with a straight-through estimator carrying the reconstruction gradient
//! from `ẑ` back to `z`.

mod checkpoint;
mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{nearest_code, CodebookStack, Scope};
use crate::embed::{canonical_sources, EmbeddingRecord, SourceTag};
use crate::error::{Error, Result};
use crate::ndmath::{sq_dist, Matrix, Mlp, Real};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use train::{
    check_coverage, compute_gradients, continue_training, evaluate, train, EpochMetrics, EvalMetrics, Gradients,
    StepMetrics, Trainer, TrainingCurve,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MrqConfig {
    pub sources: Vec<SourceTag>,
    /// `L_c`.
    pub shared_levels: usize,
    /// `L_u`.
    pub specific_levels: usize,
    /// `K`, entries per codebook.
    pub codebook_size: usize,
    /// `d_c`.
    pub code_dim: usize,
    /// `d`, the provider embedding width.
    pub input_dim: usize,
    pub pool_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Commitment coefficient α.
    pub alpha: f64,
    pub lr: f64,
    /// Decoupled weight decay, applied to MLP weight matrices only.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub kmeans_iters: usize,
    /// Upper bound on samples used for k-means codebook initialization.
    pub init_samples: usize,
    pub reseed_dead_codes: bool,
}

impl Default for MrqConfig {
    fn default() -> Self {
        Self {
            sources: SourceTag::ALL.to_vec(),
            shared_levels: 2,
            specific_levels: 2,
            codebook_size: 256,
            code_dim: 128,
            input_dim: 64,
            pool_hidden: vec![256],
            encoder_hidden: vec![256],
            decoder_hidden: vec![256],
            alpha: 0.25,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 256,
            epochs: 20,
            seed: 42,
            kmeans_iters: 10,
            init_samples: 8192,
            reseed_dead_codes: true,
        }
    }
}

impl MrqConfig {
    pub fn total_levels(&self) -> usize {
        self.shared_levels + self.specific_levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_levels() == 0 {
            return Err(Error::invalid("L_c + L_u must be ≥ 1"));
        }
        if self.codebook_size < 2 {
            return Err(Error::invalid("codebook_size K must be ≥ 2"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha must be > 0"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::invalid("lr and weight_decay must be ≥ 0"));
        }
        if self.sources.is_empty() {
            return Err(Error::invalid("at least one source is required"));
        }
        if canonical_sources(&self.sources) != self.sources {
            return Err(Error::invalid(
                "sources must be unique and listed in canonical order (Bill, SPM, MiniProgram, App, Search, Tabular)",
            ));
        }
        if self.code_dim == 0 || self.input_dim == 0 || self.batch_size == 0 {
            return Err(Error::invalid("code_dim, input_dim and batch_size must be ≥ 1"));
        }
        for h in [&self.pool_hidden, &self.encoder_hidden, &self.decoder_hidden] {
            if h.contains(&0) {
                return Err(Error::invalid("hidden sizes must be ≥ 1"));
            }
        }
        Ok(())
    }

    fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend_from_slice(hidden);
        s.push(output);
        s
    }

    /// Whether two configs describe the same parameter layout.
    pub fn same_architecture(&self, other: &Self) -> bool {
        self.sources == other.sources
            && self.shared_levels == other.shared_levels
            && self.specific_levels == other.specific_levels
            && self.codebook_size == other.codebook_size
            && self.code_dim == other.code_dim
            && self.input_dim == other.input_dim
            && self.pool_hidden == other.pool_hidden
            && self.encoder_hidden == other.encoder_hidden
            && self.decoder_hidden == other.decoder_hidden
    }
}

/// One (user, source) training or inference example: the mean of that
/// user's embeddings for the source, which is also the reconstruction target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T = f32> {
    pub user_id: u64,
    pub source: SourceTag,
    pub embedding: Matrix<T>,
}

/// Groups records by (user, source) and mean-pools each group. Output is
/// sorted by user id, then source.
pub fn samples_from_records<T: Real>(
    records: &[EmbeddingRecord],
    sources: &[SourceTag],
    dim: usize,
) -> Result<Vec<Sample<T>>> {
    let mut groups: BTreeMap<(u64, SourceTag), Vec<&Matrix<f32>>> = BTreeMap::new();
    for r in records {
        if !sources.contains(&r.source) {
            return Err(Error::UnknownSource(r.source));
        }
        if r.dim() != dim {
            return Err(Error::Dimension {
                op: "samples_from_records",
                left: r.vector.shape(),
                right: (1, dim),
            });
        }
        groups.entry((r.user_id, r.source)).or_default().push(&r.vector);
    }
    groups
        .into_iter()
        .map(|((user_id, source), vs)| {
            let vs: Vec<Matrix<T>> = vs.into_iter().map(|v| v.cast()).collect();
            let refs: Vec<&Matrix<T>> = vs.iter().collect();
            Ok(Sample {
                user_id,
                source,
                embedding: mean_pool(&refs)?,
            })
        })
        .collect()
}

/// Mean of a non-empty list of equally sized row vectors.
pub fn mean_pool<T: Real>(embeddings: &[&Matrix<T>]) -> Result<Matrix<T>> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::invalid("mean pooling needs at least one embedding"))?;
    if first.rows() != 1 {
        return Err(Error::Dimension {
            op: "mean_pool",
            left: first.shape(),
            right: (1, first.cols()),
        });
    }
    let mut acc = Matrix::zeros(1, first.cols());
    for e in embeddings {
        e.ensure_same_shape("mean_pool", first)?;
        acc.add_assign(e)?;
    }
    if embeddings.len() > 1 {
        acc.scale_mut(T::one() / T::lit(embeddings.len() as f64));
    }
    Ok(acc)
}

/// Greedy residual quantization path for one vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult<T = f32> {
    pub source: SourceTag,
    /// Selected code per level.
    pub codes: Vec<usize>,
    /// Scope of each level's codebook.
    pub scopes: Vec<Scope>,
    /// `(L+1) × d_c`; row 0 is `z`, row `l` is the residual after level `l`.
    pub residuals: Matrix<T>,
    /// `L × d_c`, the selected codeword per level.
    pub codewords: Matrix<T>,
    /// `1 × d_c`, sum of the selected codewords in level order.
    pub quantized: Matrix<T>,
}

impl<T: Real> QuantizeResult<T> {
    pub fn levels(&self) -> usize {
        self.codes.len()
    }

    pub fn residual(&self, l: usize) -> &[T] {
        self.residuals.row(l)
    }

    pub fn final_residual(&self) -> &[T] {
        self.residuals.row(self.codes.len())
    }
}

/// Greedy nearest-code selection through the shared levels, then the
/// source's own levels; `ẑ` is the sum of the selected codewords.
pub fn quantize<T: Real>(
    z: &[T],
    source: SourceTag,
    stack: &CodebookStack<T>,
) -> Result<QuantizeResult<T>> {
    if !stack.has_source(source) {
        return Err(Error::UnknownSource(source));
    }
    let levels = stack.total_levels();
    let dim = stack.code_dim();
    if z.len() != dim {
        return Err(Error::Dimension {
            op: "quantize",
            left: (1, z.len()),
            right: (1, dim),
        });
    }
    let mut residuals = Matrix::zeros(levels + 1, dim);
    let mut codewords = Matrix::zeros(levels, dim);
    let mut quantized = Matrix::zeros(1, dim);
    let mut codes = Vec::with_capacity(levels);
    let mut scopes = Vec::with_capacity(levels);
    residuals.row_mut(0).copy_from_slice(z);
    for l in 0..levels {
        let book = stack.level_book(source, l)?;
        let (c, _) = nearest_code(book, residuals.row(l))?;
        let v = book.entry(c);
        for j in 0..dim {
            let r = residuals.get(l, j) - v[j];
            residuals.set(l + 1, j, r);
        }
        codewords.row_mut(l).copy_from_slice(v);
        for (q, &x) in quantized.data_mut().iter_mut().zip(v) {
            *q += x;
        }
        codes.push(c);
        scopes.push(book.scope);
    }
    Ok(QuantizeResult {
        source,
        codes,
        scopes,
        residuals,
        codewords,
        quantized,
    })
}

/// Forward value of the straight-through estimator: the decoder sees `ẑ`.
pub fn straight_through<T: Real>(z: &Matrix<T>, quantized: &Matrix<T>) -> Result<Matrix<T>> {
    z.ensure_same_shape("straight_through", quantized)?;
    Ok(quantized.clone())
}

/// Backward of the straight-through estimator: the gradient reaching the
/// decoder input is passed to `z` unchanged. Codebooks get nothing on this path.
pub fn straight_through_backward<T: Real>(grad_decoder_input: &Matrix<T>) -> Matrix<T> {
    grad_decoder_input.clone()
}

/// Per-sample loss values and the gradients they induce.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub recon: T,
    pub rq: T,
    /// ∂L_re/∂X̂.
    pub grad_recon: Matrix<T>,
    /// Commitment part of ∂L_rq/∂z (the straight-through part comes from the decoder).
    pub grad_z: Matrix<T>,
    /// ∂L_rq/∂v for each level's selected codeword, `L × d_c`.
    pub grad_codewords: Matrix<T>,
}

impl<T: Real> LossOutput<T> {
    pub fn total(&self) -> T {
        self.recon + self.rq
    }
}

/// `L_re` and `L_rq` for one sample, with stop-gradient routing: the
/// codebook term pulls `v` toward the detached residual, the commitment term
/// pulls the encoder output toward the detached codeword.
pub fn losses<T: Real>(
    recon: &Matrix<T>,
    target: &Matrix<T>,
    result: &QuantizeResult<T>,
    alpha: f64,
) -> Result<LossOutput<T>> {
    recon.ensure_same_shape("losses", target)?;
    let diff = recon.sub(target)?;
    let re = diff.sq_norm();
    let grad_recon = diff.scaled(T::lit(2.0));

    let levels = result.levels();
    let dim = result.codewords.cols();
    let a = T::lit(alpha);
    let two = T::lit(2.0);
    let mut rq = T::zero();
    let mut grad_z = Matrix::zeros(1, dim);
    let mut grad_codewords = Matrix::zeros(levels, dim);
    for l in 0..levels {
        let r = result.residual(l);
        let v = result.codewords.row(l);
        let d2 = sq_dist(r, v);
        rq += d2 + a * d2;
        for j in 0..dim {
            let delta = v[j] - r[j];
            grad_codewords.set(l, j, two * delta);
            let gz = grad_z.get(0, j) - two * a * delta;
            grad_z.set(0, j, gz);
        }
    }
    Ok(LossOutput {
        recon: re,
        rq,
        grad_recon,
        grad_z,
        grad_codewords,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MrqModel<T = f32> {
    pub config: MrqConfig,
    /// Shared projection `d → d_c` applied after mean pooling.
    pub pool: Mlp<T>,
    pub encoder: Mlp<T>,
    pub decoders: BTreeMap<SourceTag, Mlp<T>>,
    pub codebooks: CodebookStack<T>,
    /// False until the codebooks have been k-means initialized.
    pub codebooks_initialized: bool,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub pooled: Matrix<T>,
    pub z: Matrix<T>,
    pub quant: QuantizeResult<T>,
    pub recon: Matrix<T>,
}

impl<T: Real> MrqModel<T> {
    /// Random MLP weights from `config.seed`, zero biases, zero codebooks.
    pub fn new(config: MrqConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dc) = (config.input_dim, config.code_dim);
        let pool = Mlp::new(&MrqConfig::sizes(d, &config.pool_hidden, dc), &mut rng)?;
        let encoder = Mlp::new(&MrqConfig::sizes(dc, &config.encoder_hidden, dc), &mut rng)?;
        let decoders = config
            .sources
            .iter()
            .map(|&s| Ok((s, Mlp::new(&MrqConfig::sizes(dc, &config.decoder_hidden, d), &mut rng)?)))
            .collect::<Result<_>>()?;
        let codebooks = CodebookStack::zeros(
            &config.sources,
            config.shared_levels,
            config.specific_levels,
            config.codebook_size,
            dc,
        )?;
        Ok(Self {
            config,
            pool,
            encoder,
            decoders,
            codebooks,
            codebooks_initialized: false,
        })
    }

    pub fn decoder(&self, source: SourceTag) -> Result<&Mlp<T>> {
        self.decoders.get(&source).ok_or(Error::UnknownSource(source))
    }

    /// Mean-pools one user's embeddings for a source and applies the shared projection.
    pub fn pool_project(&self, embeddings: &[&Matrix<T>]) -> Result<Matrix<T>> {
        let pooled = mean_pool(embeddings)?;
        pooled.ensure_shape("pool_project", (1, self.config.input_dim))?;
        self.pool.forward(&pooled)
    }

    pub fn encode(&self, projected: &Matrix<T>) -> Result<Matrix<T>> {
        projected.ensure_shape("encode", (projected.rows(), self.config.code_dim))?;
        self.encoder.forward(projected)
    }

    pub fn quantize(&self, z: &[T], source: SourceTag) -> Result<QuantizeResult<T>> {
        quantize(z, source, &self.codebooks)
    }

    pub fn decode(&self, quantized: &Matrix<T>, source: SourceTag) -> Result<Matrix<T>> {
        let dec = self.decoder(source)?;
        quantized.ensure_shape("decode", (quantized.rows(), self.config.code_dim))?;
        dec.forward(quantized)
    }

    /// Full forward pass for one pooled embedding.
    pub fn forward(&self, pooled: &Matrix<T>, source: SourceTag) -> Result<Forward<T>> {
        let projected = self.pool_project(&[pooled])?;
        let z = self.encode(&projected)?;
        let quant = self.quantize(z.row(0), source)?;
        let st = straight_through(&z, &quant.quantized)?;
        let recon = self.decode(&st, source)?;
        Ok(Forward {
            pooled: pooled.clone(),
            z,
            quant,
            recon,
        })
    }

    /// Tensor names in checkpoint order, matching [`MrqModel::params`].
    pub fn param_names(&self) -> Vec<String> {
        fn mlp_names<T>(prefix: &str, mlp: &Mlp<T>, out: &mut Vec<String>) {
            for i in 0..mlp.layers.len() {
                out.push(format!("{prefix}.{i}.weight"));
                out.push(format!("{prefix}.{i}.bias"));
            }
        }
        let mut out = Vec::new();
        mlp_names("pool", &self.pool, &mut out);
        mlp_names("encoder", &self.encoder, &mut out);
        for (s, d) in &self.decoders {
            mlp_names(&format!("decoder.{s}"), d, &mut out);
        }
        for b in self.codebooks.all() {
            out.push(format!("codebook.{}.{}", b.scope, b.level));
        }
        out
    }

    /// All trainable tensors, in the same order as [`MrqModel::named_params`].
    pub fn params(&self) -> Vec<&Matrix<T>> {
        let mut v = self.pool.params();
        v.extend(self.encoder.params());
        for d in self.decoders.values() {
            v.extend(d.params());
        }
        v.extend(self.codebooks.all().map(|b| &b.entries));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = self.pool.params_mut();
        v.extend(self.encoder.params_mut());
        for d in self.decoders.values_mut() {
            v.extend(d.params_mut());
        }
        v.extend(self.codebooks.all_mut().map(|b| &mut b.entries));
        v
    }

    pub fn cast<U: Real>(&self) -> MrqModel<U> {
        MrqModel {
            config: self.config.clone(),
            pool: self.pool.cast(),
            encoder: self.encoder.cast(),
            decoders: self.decoders.iter().map(|(s, d)| (*s, d.cast())).collect(),
            codebooks: self.codebooks.cast(),
            codebooks_initialized: self.codebooks_initialized,
        }
    }
}

#[cfg(test)]
mod tests;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{losses, quantize, Forward, MrqConfig, MrqModel, QuantizeResult, Sample};
use crate::codebook::{kmeans_init, record_utilization, Scope, UtilizationStats};
use crate::embed::SourceTag;
use crate::error::{Error, Result};
use crate::ndmath::{sq_dist, AdamW, AdamWConfig, Matrix, Real};

const EVAL_CHUNK: usize = 256;

/// Index of the codebook used at `level` for `source`, in [`crate::codebook::CodebookStack::all`] order.
fn book_index(config: &MrqConfig, source: SourceTag, level: usize) -> usize {
    if level < config.shared_levels {
        level
    } else {
        let pos = config
            .sources
            .iter()
            .position(|&s| s == source)
            .expect("source checked by quantize");
        config.shared_levels + pos * config.specific_levels + (level - config.shared_levels)
    }
}

fn stack_rows<T: Real>(samples: &[&Sample<T>], dim: usize) -> Result<Matrix<T>> {
    let mut x = Matrix::zeros(samples.len(), dim);
    for (i, s) in samples.iter().enumerate() {
        s.embedding.ensure_shape("sample embedding", (1, dim))?;
        x.row_mut(i).copy_from_slice(s.embedding.row(0));
    }
    Ok(x)
}

fn rows_by_source<T>(samples: &[&Sample<T>]) -> BTreeMap<SourceTag, Vec<usize>> {
    let mut m: BTreeMap<SourceTag, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        m.entry(s.source).or_default().push(i);
    }
    m
}

impl<T: Real> MrqModel<T> {
    /// Forward passes for many samples; chunks run in parallel, results keep input order.
    pub fn forward_many(&self, samples: &[Sample<T>]) -> Result<Vec<Forward<T>>> {
        let chunks: Vec<Vec<Forward<T>>> = samples
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let refs: Vec<&Sample<T>> = chunk.iter().collect();
                self.forward_batch(&refs)
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Encoder outputs and quantization paths, without decoding.
    pub fn quantize_many(&self, samples: &[Sample<T>]) -> Result<Vec<QuantizeResult<T>>> {
        let chunks: Vec<Vec<QuantizeResult<T>>> = samples
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let refs: Vec<&Sample<T>> = chunk.iter().collect();
                let x = stack_rows(&refs, self.config.input_dim)?;
                let z = self.encoder.forward(&self.pool.forward(&x)?)?;
                (0..refs.len())
                    .map(|i| self.quantize(z.row(i), refs[i].source))
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    fn forward_batch(&self, batch: &[&Sample<T>]) -> Result<Vec<Forward<T>>> {
        let x = stack_rows(batch, self.config.input_dim)?;
        let h = self.pool.forward(&x)?;
        let z = self.encoder.forward(&h)?;
        let quants = (0..batch.len())
            .map(|i| self.quantize(z.row(i), batch[i].source))
            .collect::<Result<Vec<_>>>()?;
        let mut recon = Matrix::zeros(batch.len(), self.config.input_dim);
        for (source, idx) in rows_by_source(batch) {
            let input = Matrix::from_rows(
                &idx.iter().map(|&i| quants[i].quantized.row(0)).collect::<Vec<_>>(),
            )?;
            let y = self.decode(&input, source)?;
            for (k, &i) in idx.iter().enumerate() {
                recon.row_mut(i).copy_from_slice(y.row(k));
            }
        }
        Ok(quants
            .into_iter()
            .enumerate()
            .map(|(i, quant)| Forward {
                pooled: x.row_matrix(i),
                z: z.row_matrix(i),
                quant,
                recon: recon.row_matrix(i),
            })
            .collect())
    }
}

/// Gradients for every tensor in [`MrqModel::params`] order. `touched` marks
/// tensors the batch actually reached; the optimizer skips the rest.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: Vec<Matrix<T>>,
    pub touched: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Mean over the batch of ‖X̂ − X‖².
    pub recon: f64,
    /// Mean over the batch of the summed per-level ℒ_rq terms.
    pub rq: f64,
    /// Mean ‖r^l‖ for l = 0..=L (row 0 is ‖z‖).
    pub residual_norms: Vec<f64>,
    /// Mean ‖r^{l−1} − v_{c^l}‖² per level.
    pub distortion: Vec<f64>,
}

impl StepMetrics {
    pub fn total(&self) -> f64 {
        self.recon + self.rq
    }
}

struct Accum {
    n: usize,
    recon: f64,
    rq: f64,
    norms: Vec<f64>,
    distortion: Vec<f64>,
}

impl Accum {
    fn new(levels: usize) -> Self {
        Self {
            n: 0,
            recon: 0.0,
            rq: 0.0,
            norms: vec![0.0; levels + 1],
            distortion: vec![0.0; levels],
        }
    }

    fn add<T: Real>(&mut self, recon: T, rq: T, q: &QuantizeResult<T>) {
        self.n += 1;
        self.recon += recon.as_f64();
        self.rq += rq.as_f64();
        for (l, acc) in self.norms.iter_mut().enumerate() {
            *acc += sq_norm(q.residual(l)).sqrt();
        }
        for (l, acc) in self.distortion.iter_mut().enumerate() {
            *acc += sq_dist(q.residual(l), q.codewords.row(l)).as_f64();
        }
    }

    fn merge(&mut self, other: &Accum) {
        self.n += other.n;
        self.recon += other.recon;
        self.rq += other.rq;
        for (a, b) in self.norms.iter_mut().zip(&other.norms) {
            *a += b;
        }
        for (a, b) in self.distortion.iter_mut().zip(&other.distortion) {
            *a += b;
        }
    }

    fn finish(&self) -> StepMetrics {
        let n = self.n.max(1) as f64;
        StepMetrics {
            recon: self.recon / n,
            rq: self.rq / n,
            residual_norms: self.norms.iter().map(|v| v / n).collect(),
            distortion: self.distortion.iter().map(|v| v / n).collect(),
        }
    }
}

fn sq_norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.as_f64() * x.as_f64()).sum()
}

fn check_finite<T: Real>(name: &str, m: &Matrix<T>) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

/// Loss metrics, gradients, and the quantization paths for one minibatch.
/// Losses are averaged over the batch, so gradients carry a `1/B` factor.
pub fn compute_gradients<T: Real>(
    model: &MrqModel<T>,
    batch: &[&Sample<T>],
) -> Result<(StepMetrics, Gradients<T>, Vec<QuantizeResult<T>>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = &model.config;
    let b = batch.len();
    let inv_b = T::one() / T::lit(b as f64);

    let x = stack_rows(batch, cfg.input_dim)?;
    check_finite("input embeddings", &x)?;
    let (h, pool_cache) = model.pool.forward_cached(&x)?;
    check_finite("pool projection output", &h)?;
    let (z, enc_cache) = model.encoder.forward_cached(&h)?;
    check_finite("encoder output z", &z)?;
    let quants: Vec<QuantizeResult<T>> = (0..b)
        .into_par_iter()
        .map(|i| quantize(z.row(i), batch[i].source, &model.codebooks))
        .collect::<Result<_>>()?;

    let groups = rows_by_source(batch);
    let mut recon = Matrix::zeros(b, cfg.input_dim);
    let mut dec_caches = BTreeMap::new();
    for (&source, idx) in &groups {
        let input = Matrix::from_rows(
            &idx.iter().map(|&i| quants[i].quantized.row(0)).collect::<Vec<_>>(),
        )?;
        let (y, cache) = model.decoder(source)?.forward_cached(&input)?;
        for (k, &i) in idx.iter().enumerate() {
            recon.row_mut(i).copy_from_slice(y.row(k));
        }
        dec_caches.insert(source, cache);
    }
    check_finite("reconstruction", &recon)?;

    let params = model.params();
    let mut grads: Vec<Matrix<T>> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
    let mut touched = vec![false; params.len()];
    let n_pool = model.pool.params().len();
    let n_enc = model.encoder.params().len();
    let n_dec = cfg.decoder_hidden.len() * 2 + 2;
    let book_base = n_pool + n_enc + n_dec * model.decoders.len();

    let mut acc = Accum::new(cfg.total_levels());
    let mut grad_recon = Matrix::zeros(b, cfg.input_dim);
    let mut grad_z = Matrix::zeros(b, cfg.code_dim);
    for (i, q) in quants.iter().enumerate() {
        let lo = losses(&recon.row_matrix(i), &x.row_matrix(i), q, cfg.alpha)?;
        acc.add(lo.recon, lo.rq, q);
        for (dst, &g) in grad_recon.row_mut(i).iter_mut().zip(lo.grad_recon.row(0)) {
            *dst = g * inv_b;
        }
        for (dst, &g) in grad_z.row_mut(i).iter_mut().zip(lo.grad_z.row(0)) {
            *dst = g * inv_b;
        }
        for l in 0..q.levels() {
            let p = book_base + book_index(cfg, q.source, l);
            touched[p] = true;
            let row = grads[p].row_mut(q.codes[l]);
            for (dst, &g) in row.iter_mut().zip(lo.grad_codewords.row(l)) {
                *dst += g * inv_b;
            }
        }
    }
    let metrics = acc.finish();
    if !metrics.recon.is_finite() || !metrics.rq.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }

    // Decoders, then the straight-through path into z.
    for (d, (&source, dec)) in model.decoders.iter().enumerate() {
        let Some(idx) = groups.get(&source) else { continue };
        let g = grad_recon.gather_rows(idx);
        let (g_in, g_params) = dec.backward(&dec_caches[&source], &g)?;
        let base = n_pool + n_enc + d * n_dec;
        for (k, gp) in g_params.into_iter().enumerate() {
            grads[base + k] = gp;
            touched[base + k] = true;
        }
        for (k, &i) in idx.iter().enumerate() {
            for (dst, &v) in grad_z.row_mut(i).iter_mut().zip(g_in.row(k)) {
                *dst += v;
            }
        }
    }
    let (g_h, g_enc) = model.encoder.backward(&enc_cache, &grad_z)?;
    let (_, g_pool) = model.pool.backward(&pool_cache, &g_h)?;
    for (k, gp) in g_pool.into_iter().chain(g_enc).enumerate() {
        grads[k] = gp;
        touched[k] = true;
    }

    let names = model.param_names();
    for (name, g) in names.iter().zip(&grads) {
        check_finite(&format!("gradient of {name}"), g)?;
    }
    Ok((
        metrics,
        Gradients {
            params: grads,
            touched,
        },
        quants,
    ))
}

/// Metrics from a full pass over a dataset with a fixed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub recon: f64,
    pub rq: f64,
    pub residual_norms: Vec<f64>,
    pub distortion: Vec<f64>,
    pub utilization: UtilizationStats,
}

/// Reconstruction / quantization metrics and codebook utilization on `samples`.
pub fn evaluate<T: Real>(model: &MrqModel<T>, samples: &[Sample<T>]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let fwd = model.forward_many(samples)?;
    let mut acc = Accum::new(model.config.total_levels());
    let mut assignments: BTreeMap<(Scope, usize), Vec<usize>> = BTreeMap::new();
    for (f, s) in fwd.iter().zip(samples) {
        let lo = losses(&f.recon, &s.embedding, &f.quant, model.config.alpha)?;
        acc.add(lo.recon, lo.rq, &f.quant);
        for l in 0..f.quant.levels() {
            assignments
                .entry((f.quant.scopes[l], l))
                .or_default()
                .push(f.quant.codes[l]);
        }
    }
    let m = acc.finish();
    Ok(EvalMetrics {
        recon: m.recon,
        rq: m.rq,
        residual_norms: m.residual_norms,
        distortion: m.distortion,
        utilization: record_utilization(&model.codebooks, &assignments)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub recon: f64,
    pub rq: f64,
    pub total: f64,
    pub residual_norms: Vec<f64>,
    pub distortion: Vec<f64>,
    /// Utilization ratio per codebook, in stack order (shared, then each source).
    pub utilization: Vec<f64>,
    pub reseeded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainingCurve {
    /// One row per epoch: `epoch,recon,rq,total,reseeded,norm_0..norm_L,util_0..`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if let Some(first) = self.epochs.first() {
            out.push_str("epoch,recon,rq,total,reseeded");
            for l in 0..first.residual_norms.len() {
                out.push_str(&format!(",residual_norm_{l}"));
            }
            for b in 0..first.utilization.len() {
                out.push_str(&format!(",utilization_{b}"));
            }
            out.push('\n');
        }
        for e in &self.epochs {
            out.push_str(&format!("{},{},{},{},{}", e.epoch, e.recon, e.rq, e.total, e.reseeded));
            for v in e.residual_norms.iter().chain(&e.utilization) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Highest-distortion residual inputs seen by one codebook during an epoch.
struct Candidates<T> {
    keep: usize,
    items: Vec<(f64, Vec<T>)>,
}

impl<T: Real> Candidates<T> {
    fn push(&mut self, d: f64, r: &[T]) {
        self.items.push((d, r.to_vec()));
        if self.items.len() > 4 * self.keep {
            self.prune();
        }
    }

    fn prune(&mut self) {
        self.items.sort_by(|a, b| b.0.total_cmp(&a.0));
        self.items.truncate(self.keep);
    }
}

/// Owns a model plus optimizer state and the shuffle RNG.
pub struct Trainer<T: Real> {
    pub model: MrqModel<T>,
    optimizer: AdamW<T>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: MrqModel<T>) -> Self {
        let cfg = &model.config;
        let base = AdamWConfig::default().with_lr(cfg.lr);
        let names = model.param_names();
        let wd = cfg.weight_decay;
        let optimizer = AdamW::new(&model.params(), |i| {
            if names[i].ends_with(".weight") {
                base.with_weight_decay(wd)
            } else {
                base
            }
        });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self {
            model,
            optimizer,
            rng,
            epoch: 0,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn into_model(self) -> MrqModel<T> {
        self.model
    }

    /// k-means initialization of every codebook, level by level, on the
    /// encoder outputs and running residuals of up to `init_samples` samples.
    pub fn initialize_codebooks(&mut self, samples: &[Sample<T>]) -> Result<()> {
        let cfg = self.model.config.clone();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        order.truncate(cfg.init_samples.max(cfg.codebook_size));
        order.sort_unstable();
        let subset: Vec<Sample<T>> = order.iter().map(|&i| samples[i].clone()).collect();
        let fwd = self.model.forward_many(&subset)?;
        let mut residuals: Vec<Vec<T>> = fwd.iter().map(|f| f.z.row(0).to_vec()).collect();

        let all: Vec<usize> = (0..subset.len()).collect();
        for l in 0..cfg.shared_levels {
            self.init_level(Scope::Shared, l, &all, &mut residuals)?;
        }
        for &s in &cfg.sources {
            let idx: Vec<usize> = (0..subset.len()).filter(|&i| subset[i].source == s).collect();
            if idx.is_empty() {
                return Err(Error::invalid(format!(
                    "source {s} has no samples for codebook initialization"
                )));
            }
            for l in cfg.shared_levels..cfg.total_levels() {
                self.init_level(Scope::Specific(s), l, &idx, &mut residuals)?;
            }
        }
        self.model.codebooks_initialized = true;
        Ok(())
    }

    fn init_level(
        &mut self,
        scope: Scope,
        level: usize,
        idx: &[usize],
        residuals: &mut [Vec<T>],
    ) -> Result<()> {
        let k = self.model.config.codebook_size;
        let dim = self.model.config.code_dim;
        let mut rows: Vec<Vec<T>> = idx.iter().map(|&i| residuals[i].clone()).collect();
        // Too few samples: pad with jittered copies so k-means has K distinct points.
        let m = rows.len();
        let mut c = 0;
        while rows.len() < k {
            let src = &rows[c % m];
            let scale = (sq_norm(src) / dim as f64).sqrt().max(1.0) * 1e-3;
            let jittered = src
                .iter()
                .map(|&v| v + T::lit(scale * Distribution::<f64>::sample(&StandardNormal, &mut self.rng)))
                .collect();
            rows.push(jittered);
            c += 1;
        }
        let samples = Matrix::from_rows(&rows)?;
        let book = match scope {
            Scope::Shared => &mut self.model.codebooks.shared[level],
            Scope::Specific(s) => {
                let lc = self.model.config.shared_levels;
                &mut self
                    .model
                    .codebooks
                    .specific
                    .get_mut(&s)
                    .ok_or(Error::UnknownSource(s))?[level - lc]
            }
        };
        kmeans_init(book, &samples, self.model.config.kmeans_iters, &mut self.rng)?;
        let book = &*book;
        for &i in idx {
            let (code, _) = crate::codebook::nearest_code(book, &residuals[i])?;
            for (r, &v) in residuals[i].iter_mut().zip(book.entry(code)) {
                *r -= v;
            }
        }
        Ok(())
    }

    /// One AdamW update from one minibatch. Tensors the batch did not reach
    /// (other sources' decoders and specific codebooks) are left untouched,
    /// moments included.
    pub fn train_step(&mut self, batch: &[&Sample<T>]) -> Result<StepMetrics> {
        Ok(self.step_with_paths(batch)?.0)
    }

    fn step_with_paths(
        &mut self,
        batch: &[&Sample<T>],
    ) -> Result<(StepMetrics, Vec<QuantizeResult<T>>)> {
        if !self.model.codebooks_initialized {
            let owned: Vec<Sample<T>> = batch.iter().map(|s| (*s).clone()).collect();
            self.initialize_codebooks(&owned)?;
        }
        let (metrics, grads, quants) = compute_gradients(&self.model, batch)?;
        let mut params = self.model.params_mut();
        for (i, p) in params.iter_mut().enumerate() {
            if grads.touched[i] {
                crate::ndmath::adamw_step(p, &grads.params[i], &mut self.optimizer.states[i])?;
            }
        }
        Ok((metrics, quants))
    }

    /// One pass over `samples` in a seeded random order, followed by dead-code re-seeding.
    pub fn run_epoch(&mut self, samples: &[Sample<T>]) -> Result<EpochMetrics> {
        if samples.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        if !self.model.codebooks_initialized {
            self.initialize_codebooks(samples)?;
        }
        let cfg = self.model.config.clone();
        let n_books = self.model.codebooks.all().count();
        let k = cfg.codebook_size;
        let mut usage = vec![vec![0u64; k]; n_books];
        let mut candidates: Vec<Candidates<T>> = (0..n_books)
            .map(|_| Candidates {
                keep: k,
                items: Vec::new(),
            })
            .collect();

        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut self.rng);
        let mut acc = Accum::new(cfg.total_levels());
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
            let (m, quants) = self.step_with_paths(&batch)?;
            let n = batch.len() as f64;
            let part = Accum {
                n: batch.len(),
                recon: m.recon * n,
                rq: m.rq * n,
                norms: m.residual_norms.iter().map(|v| v * n).collect(),
                distortion: m.distortion.iter().map(|v| v * n).collect(),
            };
            acc.merge(&part);
            for q in &quants {
                for l in 0..q.levels() {
                    let bi = book_index(&cfg, q.source, l);
                    usage[bi][q.codes[l]] += 1;
                    let d = sq_dist(q.residual(l), q.codewords.row(l)).as_f64();
                    candidates[bi].push(d, q.residual(l));
                }
            }
        }

        let reseeded = if cfg.reseed_dead_codes {
            self.reseed(&usage, &mut candidates)
        } else {
            0
        };
        self.epoch += 1;
        let m = acc.finish();
        Ok(EpochMetrics {
            epoch: self.epoch,
            recon: m.recon,
            rq: m.rq,
            total: m.recon + m.rq,
            residual_norms: m.residual_norms,
            distortion: m.distortion,
            utilization: usage
                .iter()
                .map(|u| u.iter().filter(|&&c| c > 0).count() as f64 / k as f64)
                .collect(),
            reseeded,
        })
    }

    fn reseed(&mut self, usage: &[Vec<u64>], candidates: &mut [Candidates<T>]) -> usize {
        let n_books = usage.len();
        let first_book = self.optimizer.states.len() - n_books;
        let mut total = 0;
        let books: Vec<_> = self.model.codebooks.all_mut().collect();
        for (bi, book) in books.into_iter().enumerate() {
            let dead: Vec<usize> = (0..usage[bi].len()).filter(|&c| usage[bi][c] == 0).collect();
            if dead.is_empty() {
                continue;
            }
            candidates[bi].prune();
            for (&c, (_, r)) in dead.iter().zip(&candidates[bi].items) {
                book.entries.row_mut(c).copy_from_slice(r);
                self.optimizer.states[first_book + bi].reset_row(c);
                total += 1;
            }
        }
        if total > 0 {
            log::debug!("epoch {}: re-seeded {total} dead codes", self.epoch + 1);
        }
        total
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train<T: Real>(samples: &[Sample<T>], config: &MrqConfig) -> Result<(MrqModel<T>, TrainingCurve)> {
    check_coverage(samples, config)?;
    continue_training(MrqModel::new(config.clone())?, samples, config.epochs)
}

/// Runs `epochs` more epochs on an existing model. Optimizer moments start
/// fresh and the shuffle stream restarts from the model's seed.
pub fn continue_training<T: Real>(
    model: MrqModel<T>,
    samples: &[Sample<T>],
    epochs: usize,
) -> Result<(MrqModel<T>, TrainingCurve)> {
    check_coverage(samples, &model.config)?;
    let mut trainer = Trainer::new(model);
    let mut curve = TrainingCurve::default();
    for _ in 0..epochs {
        let m = trainer.run_epoch(samples)?;
        log::info!(
            "epoch {}: recon {:.5} rq {:.5} reseeded {}",
            m.epoch,
            m.recon,
            m.rq,
            m.reseeded
        );
        curve.epochs.push(m);
    }
    Ok((trainer.into_model(), curve))
}

/// Every sample's source must be configured and every configured source must have data.
pub fn check_coverage<T>(samples: &[Sample<T>], config: &MrqConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    for s in samples {
        if !config.sources.contains(&s.source) {
            return Err(Error::UnknownSource(s.source));
        }
    }
    for &src in &config.sources {
        if !samples.iter().any(|s| s.source == src) {
            return Err(Error::invalid(format!(
                "source {src} is configured but absent from the data"
            )));
        }
    }
    Ok(())
}

//! Contrastive alignment of fused user-token representations with text
//! embeddings of the user's later behavior.
//!
//! Behavior records are rendered to sentences, embedded by a frozen
//! [`EmbeddingProvider`], and paired with `e^f`, the output of a trainable
//! [`FusionHead`] over the user's token sequence. Only the head is trained.

mod head;
mod synth;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{EmbeddingProvider, SourceTag, DEFAULT_QUERY};
use crate::error::{Error, Result};
use crate::ndmath::{AdamW, AdamWConfig, Matrix, Real};
use crate::tokenizer::UserTokenSequence;

pub use head::{load_head, save_head, FusionCache, FusionHead, HEAD_MAGIC, HEAD_VERSION};
pub use synth::{synth_behavior, synth_text_provider, BehaviorSynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    pub user_id: u64,
    pub source: SourceTag,
    #[serde(default)]
    pub items: Vec<String>,
    #[serde(default)]
    pub num: Option<f64>,
    #[serde(default)]
    pub status: Option<String>,
}

/// Sentence template per source; `{items}` is the comma-separated item list.
pub fn template(source: SourceTag) -> &'static str {
    match source {
        SourceTag::Bill => {
            "The user purchased {items} amounting more than {num} dollars with {status} payment."
        }
        SourceTag::Spm => {
            "The user clicked the promoted {items} worth more than {num} dollars with {status} conversion."
        }
        SourceTag::MiniProgram => {
            "The user opened the mini programs {items} spending more than {num} dollars with {status} payment."
        }
        SourceTag::App => {
            "The user used the apps {items} spending more than {num} dollars with {status} payment."
        }
        SourceTag::Search => {
            "The user searched for {items} and spent more than {num} dollars with {status} payment."
        }
        SourceTag::Tabular => {
            "The user profile lists {items} with assets of more than {num} dollars and {status} account status."
        }
    }
}

/// Fills the record's source template. Items are joined with `", "`.
pub fn render_template(record: &BehaviorRecord) -> Result<String> {
    if record.items.is_empty() {
        return Err(Error::MissingPlaceholder("items"));
    }
    let num = record.num.ok_or(Error::MissingPlaceholder("num"))?;
    if !(num >= 0.0 && num.is_finite()) {
        return Err(Error::invalid(format!("amount must be a finite value ≥ 0, got {num}")));
    }
    let status = record
        .status
        .as_deref()
        .filter(|s| !s.is_empty())
        .ok_or(Error::MissingPlaceholder("status"))?;
    Ok(template(record.source)
        .replace("{items}", &record.items.join(", "))
        .replace("{num}", &num.to_string())
        .replace("{status}", status))
}

pub fn read_behavior_jsonl<R: BufRead>(r: R) -> Result<Vec<BehaviorRecord>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::format(offset, format!("bad behavior record: {e}")))?,
            );
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

pub fn write_behavior_jsonl<W: Write>(records: &[BehaviorRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_behavior(path: &Path) -> Result<Vec<BehaviorRecord>> {
    let f = std::fs::File::open(path).map_err(Error::file(path))?;
    read_behavior_jsonl(std::io::BufReader::new(f))
}

/// One text per user: the rendered records in input order, space-separated.
pub fn user_texts(records: &[BehaviorRecord]) -> Result<BTreeMap<u64, String>> {
    let mut out: BTreeMap<u64, String> = BTreeMap::new();
    for r in records {
        let t = render_template(r)?;
        out.entry(r.user_id)
            .and_modify(|s| {
                s.push(' ');
                s.push_str(&t);
            })
            .or_insert(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenominatorMode {
    /// Positive pair excluded from the denominator.
    #[default]
    PaperLiteral,
    /// Positive pair included (the usual softmax cross-entropy form).
    Standard,
}

#[derive(Debug, Clone)]
pub struct InfoNceOutput<T> {
    pub loss: f64,
    pub grad_fused: Matrix<T>,
    pub grad_text: Matrix<T>,
}

fn row_norms<T: Real>(m: &Matrix<T>) -> Result<Vec<f64>> {
    m.row_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::ZeroNorm(i))
            }
        })
        .collect()
}

/// Cosine similarity matrix `S[i][j] = cos(a_i, b_j)`.
pub fn cosine_matrix<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Vec<Vec<f64>>> {
    if a.cols() != b.cols() {
        return Err(Error::Dimension {
            op: "cosine_matrix",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (na, nb) = (row_norms(a)?, row_norms(b)?);
    Ok((0..a.rows())
        .map(|i| {
            (0..b.rows())
                .map(|j| {
                    let d: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
                    d / (na[i] * nb[j])
                })
                .collect()
        })
        .collect())
}

/// InfoNCE over cosine similarities scaled by `1/τ`:
/// `loss = −(1/B) Σ_i log(exp(s_ii) / Σ_{j∈D_i} exp(s_ij))`, where `D_i` is
/// every `j ≠ i` in paper-literal mode and every `j` in standard mode.
/// Computed in `f64`; returns gradients for both batches.
pub fn info_nce<T: Real>(
    fused: &Matrix<T>,
    text: &Matrix<T>,
    tau: f64,
    mode: DenominatorMode,
) -> Result<InfoNceOutput<T>> {
    fused.ensure_same_shape("info_nce", text)?;
    let b = fused.rows();
    if b < 2 {
        return Err(Error::invalid("InfoNCE needs a batch of at least 2"));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid("temperature τ must be > 0"));
    }
    let (na, nb) = (row_norms(fused)?, row_norms(text)?);
    let cos = cosine_matrix(fused, text)?;
    let bf = b as f64;

    // g[i][j] = ∂loss/∂s_ij
    let mut g = vec![vec![0.0; b]; b];
    let mut loss = 0.0;
    for i in 0..b {
        let s: Vec<f64> = cos[i].iter().map(|c| c / tau).collect();
        let in_denominator = |j: usize| mode == DenominatorMode::Standard || j != i;
        let max = (0..b).filter(|&j| in_denominator(j)).map(|j| s[j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..b).filter(|&j| in_denominator(j)).map(|j| (s[j] - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - s[i];
        g[i][i] -= 1.0 / bf;
        for j in (0..b).filter(|&j| in_denominator(j)) {
            g[i][j] += (s[j] - lse).exp() / bf;
        }
    }
    loss /= bf;

    let d = fused.cols();
    let mut grad_fused = Matrix::zeros(b, d);
    let mut grad_text = Matrix::zeros(b, d);
    for i in 0..b {
        for j in 0..b {
            let w = g[i][j] / tau;
            if w == 0.0 {
                continue;
            }
            let c = cos[i][j];
            let (ai, bj) = (fused.row(i), text.row(j));
            for k in 0..d {
                let ah = ai[k].as_f64() / na[i];
                let bh = bj[k].as_f64() / nb[j];
                let ga = grad_fused.get(i, k) + T::lit(w * (bh - c * ah) / na[i]);
                grad_fused.set(i, k, ga);
                let gb = grad_text.get(j, k) + T::lit(w * (ah - c * bh) / nb[j]);
                grad_text.set(j, k, gb);
            }
        }
    }
    Ok(InfoNceOutput {
        loss,
        grad_fused,
        grad_text,
    })
}

/// Fraction of rows `i` whose most similar text (by cosine) is `text[i]`.
/// Ties go to the lowest index.
pub fn top1_retrieval<T: Real>(fused: &Matrix<T>, text: &Matrix<T>) -> Result<f64> {
    let cos = cosine_matrix(fused, text)?;
    let hits = cos
        .iter()
        .enumerate()
        .filter(|(i, row)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            best.0 == *i
        })
        .count();
    Ok(hits as f64 / cos.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    /// Token embedding width `d_cb`.
    pub token_dim: usize,
    pub hidden: Vec<usize>,
    pub tau: f64,
    pub mode: DenominatorMode,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            token_dim: 128,
            hidden: vec![256],
            tau: 1.0,
            mode: DenominatorMode::PaperLiteral,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 10,
            seed: 42,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("alignment batch_size must be ≥ 2"));
        }
        if !(self.tau > 0.0) || !(self.lr >= 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid("need τ > 0, lr ≥ 0, weight_decay ≥ 0"));
        }
        if self.token_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("token_dim and hidden sizes must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AlignCurve {
    /// Mean batch loss per epoch.
    pub epochs: Vec<f64>,
}

/// Pairs each user's token sequence with the provider embedding of their
/// rendered behavior text. Both sides must cover exactly the same users.
/// Returns `(sequences, text embeddings)` sorted by user id.
pub fn build_pairs<T: Real>(
    sequences: &[UserTokenSequence],
    records: &[BehaviorRecord],
    provider: &dyn EmbeddingProvider,
) -> Result<(Vec<UserTokenSequence>, Matrix<T>)> {
    let texts = user_texts(records)?;
    let mut seqs: Vec<UserTokenSequence> = sequences.to_vec();
    seqs.sort_by_key(|s| s.user_id);
    let missing_text: Vec<u64> = seqs.iter().filter(|s| !texts.contains_key(&s.user_id)).map(|s| s.user_id).collect();
    let have: std::collections::BTreeSet<u64> = seqs.iter().map(|s| s.user_id).collect();
    let missing_seq: Vec<u64> = texts.keys().filter(|u| !have.contains(u)).copied().collect();
    if !missing_text.is_empty() || !missing_seq.is_empty() {
        return Err(Error::invalid(format!(
            "user coverage mismatch: {} users without behavior records (first {:?}), {} without token sequences (first {:?})",
            missing_text.len(),
            missing_text.first(),
            missing_seq.len(),
            missing_seq.first()
        )));
    }
    let ordered: Vec<String> = seqs.iter().map(|s| texts[&s.user_id].clone()).collect();
    let vecs = provider.embed(DEFAULT_QUERY, &ordered)?;
    let dim = provider.dim();
    let mut m = Matrix::zeros(vecs.len(), dim);
    for (i, v) in vecs.iter().enumerate() {
        if v.len() != dim {
            return Err(Error::Provider(format!("vector {i} has dim {}, expected {dim}", v.len())));
        }
        for (dst, &x) in m.row_mut(i).iter_mut().zip(v) {
            *dst = T::lit(x as f64);
        }
    }
    Ok((seqs, m))
}

/// Minibatch AdamW on the fusion head only; text embeddings are fixed.
/// A trailing batch smaller than 2 is dropped.
pub fn train_alignment<T: Real>(
    sequences: &[UserTokenSequence],
    text: &Matrix<T>,
    mut head: FusionHead<T>,
    config: &AlignConfig,
) -> Result<(FusionHead<T>, AlignCurve)> {
    config.validate()?;
    if sequences.len() != text.rows() {
        return Err(Error::invalid(format!(
            "{} sequences but {} text embeddings",
            sequences.len(),
            text.rows()
        )));
    }
    if text.cols() != head.output_dim() {
        return Err(Error::Dimension {
            op: "train_alignment",
            left: text.shape(),
            right: (text.rows(), head.output_dim()),
        });
    }
    let base = AdamWConfig::default().with_lr(config.lr);
    let mut opt = AdamW::new(&head.params(), |i| {
        // Decay the MLP weights only.
        if i % 2 == 1 {
            base.with_weight_decay(config.weight_decay)
        } else {
            base
        }
    });
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut curve = AlignCurve::default();
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&UserTokenSequence> = chunk.iter().map(|&i| &sequences[i]).collect();
            let t = text.gather_rows(chunk);
            let (ef, cache) = head.forward_batch(&batch)?;
            let out = info_nce(&ef, &t, config.tau, config.mode)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite("alignment loss".into()));
            }
            let grads = head.backward(&cache, &out.grad_fused)?;
            opt.step(&mut head.params_mut(), &grads)?;
            sum += out.loss;
            n += 1;
        }
        curve.epochs.push(if n > 0 { sum / n as f64 } else { f64::NAN });
    }
    Ok((head, curve))
}

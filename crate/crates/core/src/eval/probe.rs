use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{auc, ks};
use crate::error::{Error, Result};
use crate::ndmath::{adamw_step, AdamWConfig, AdamWState, Matrix};
use crate::tokenizer::{TokenVocabulary, UserTokenSequence};

pub const PROBE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 42,
        }
    }
}

/// Per-user features and binary labels with a fixed train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub user_ids: Vec<u64>,
    pub features: Matrix<f64>,
    pub labels: Vec<u8>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeDataset {
    pub fn new(user_ids: Vec<u64>, features: Matrix<f64>, labels: Vec<u8>, split: &SplitConfig) -> Result<Self> {
        let n = user_ids.len();
        if features.rows() != n || labels.len() != n {
            return Err(Error::invalid(format!(
                "{n} users, {} feature rows, {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::invalid(format!("label {l} is not 0 or 1")));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite("probe features".into()));
        }
        if !(split.test_fraction > 0.0 && split.test_fraction < 1.0) {
            return Err(Error::invalid("test_fraction must be in (0, 1)"));
        }
        if n < 4 {
            return Err(Error::invalid(format!("degenerate split: only {n} users")));
        }
        let n_test = ((n as f64 * split.test_fraction).round() as usize).clamp(1, n - 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
        let mut test = order[..n_test].to_vec();
        let mut train = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        for (name, part) in [("train", &train), ("test", &test)] {
            let pos = part.iter().filter(|&&i| labels[i] == 1).count();
            if pos == 0 || pos == part.len() {
                return Err(Error::invalid(format!("degenerate split: {name} part has a single class")));
            }
        }
        Ok(Self {
            user_ids,
            features,
            labels,
            train,
            test,
        })
    }

    /// Concatenated one-hot blocks, one per sequence position, each as wide
    /// as the vocabulary block that position draws from.
    pub fn one_hot(
        sequences: &[UserTokenSequence],
        vocab: &TokenVocabulary,
        labels: &BTreeMap<u64, u8>,
        split: &SplitConfig,
    ) -> Result<Self> {
        let ranges: Vec<(u32, u32)> = (0..vocab.sequence_len())
            .map(|p| vocab.position_range(p))
            .collect::<Result<_>>()?;
        let mut col = Vec::with_capacity(ranges.len());
        let mut width = 0usize;
        for &(_, size) in &ranges {
            col.push(width);
            width += size as usize;
        }
        let mut features = Matrix::zeros(sequences.len(), width);
        let mut ids = Vec::with_capacity(sequences.len());
        let mut ys = Vec::with_capacity(sequences.len());
        for (i, s) in sequences.iter().enumerate() {
            vocab.check_sequence(&s.tokens, true)?;
            for (p, &t) in s.tokens.iter().enumerate() {
                features.set(i, col[p] + (t - ranges[p].0) as usize, 1.0);
            }
            let y = labels
                .get(&s.user_id)
                .ok_or_else(|| Error::invalid(format!("no label for user {}", s.user_id)))?;
            ids.push(s.user_id);
            ys.push(*y);
        }
        Self::new(ids, features, ys, split)
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn len(&self) -> usize {
        self.user_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 300,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeMetrics {
    pub schema_version: u32,
    pub auc: f64,
    pub ks: f64,
    pub train_auc: f64,
    pub n_train: usize,
    pub n_test: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn standardized(x: &Matrix<f64>, rows: &[usize], mean: &[f64], inv_std: &[f64]) -> Matrix<f64> {
    let mut out = x.gather_rows(rows);
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(mean).zip(inv_std) {
            *v = (*v - m) * s;
        }
    }
    out
}

fn scores(x: &Matrix<f64>, w: &[f64], b: f64) -> Vec<f64> {
    x.row_iter()
        .map(|row| row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b)
        .collect()
}

/// Logistic regression on standardized features, trained full-batch with
/// Adam on the train split; AUC and KS are measured on the test split.
pub fn linear_probe(data: &ProbeDataset, config: &ProbeConfig) -> Result<ProbeMetrics> {
    if !(config.lr > 0.0) || config.l2 < 0.0 || config.epochs == 0 {
        return Err(Error::invalid("probe needs lr > 0, l2 ≥ 0, epochs ≥ 1"));
    }
    let p = data.dim();
    let n = data.train.len() as f64;
    let mut mean = vec![0.0; p];
    for &i in &data.train {
        for (m, v) in mean.iter_mut().zip(data.features.row(i)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; p];
    for &i in &data.train {
        for ((s, v), m) in var.iter_mut().zip(data.features.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let xtr = standardized(&data.features, &data.train, &mean, &inv_std);
    let xte = standardized(&data.features, &data.test, &mean, &inv_std);
    let ytr: Vec<u8> = data.train.iter().map(|&i| data.labels[i]).collect();
    let yte: Vec<u8> = data.test.iter().map(|&i| data.labels[i]).collect();

    let mut w = Matrix::<f64>::zeros(1, p);
    let mut b = Matrix::<f64>::zeros(1, 1);
    let adam = AdamWConfig::default().with_lr(config.lr);
    let (mut sw, mut sb) = (AdamWState::for_param(&w, adam), AdamWState::for_param(&b, adam));
    for _ in 0..config.epochs {
        let s = scores(&xtr, w.data(), b.get(0, 0));
        let mut gw = w.scaled(config.l2);
        let mut gb = 0.0;
        for (r, (&z, &y)) in s.iter().zip(&ytr).enumerate() {
            let e = (sigmoid(z) - y as f64) / n;
            gb += e;
            for (g, x) in gw.data_mut().iter_mut().zip(xtr.row(r)) {
                *g += e * x;
            }
        }
        adamw_step(&mut w, &gw, &mut sw)?;
        adamw_step(&mut b, &Matrix::filled(1, 1, gb), &mut sb)?;
    }
    if !w.is_finite() {
        return Err(Error::NonFinite("probe weights".into()));
    }
    let test_scores = scores(&xte, w.data(), b.get(0, 0));
    Ok(ProbeMetrics {
        schema_version: PROBE_SCHEMA_VERSION,
        auc: auc(&test_scores, &yte)?,
        ks: ks(&test_scores, &yte)?,
        train_auc: auc(&scores(&xtr, w.data(), b.get(0, 0)), &ytr)?,
        n_train: data.train.len(),
        n_test: data.test.len(),
    })
}

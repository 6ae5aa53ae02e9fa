//! Classification and ranking metrics, linear probes and report export.

mod probe;
mod report;

pub use probe::{linear_probe, ProbeConfig, ProbeDataset, ProbeMetrics, SplitConfig, PROBE_SCHEMA_VERSION};
pub use report::{
    export_report, utilization_from_tokens, validate_report, write_zhat_csv, ReportPaths, UtilizationReport,
    REPORT_SCHEMA_VERSION,
};

use crate::error::{Error, Result};

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i}")));
    }
    let mut pos = 0;
    for &l in labels {
        match l {
            0 => {}
            1 => pos += 1,
            other => return Err(Error::invalid(format!("label {other} is not 0 or 1"))),
        }
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

/// Indices sorted by ascending score, split into groups of equal score.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve: the chance a random positive scores above a
/// random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    // Twice the Mann-Whitney U, kept integral.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|&&i| labels[i] == 1).count() as u128;
        let q = g.len() as u128 - p;
        twice_u += 2 * p * neg_below + p * q;
        neg_below += q;
    }
    Ok(twice_u as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Kolmogorov-Smirnov statistic: max |TPR − FPR| over the thresholds
/// `score ≥ t` induced by the distinct scores.
pub fn ks(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = 0.0f64;
    for g in tie_groups(scores).iter().rev() {
        for &i in g {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        best = best.max((tp as f64 / pos as f64 - fp as f64 / neg as f64).abs());
    }
    Ok(best)
}

/// Fraction of ranked lists whose single positive is within the top `k`.
pub fn hit_rate(lists: &[Vec<bool>], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("hit rate needs k ≥ 1"));
    }
    let mut ranks = Vec::with_capacity(lists.len());
    for (i, l) in lists.iter().enumerate() {
        let mut hits = l.iter().enumerate().filter(|(_, &p)| p);
        match (hits.next(), hits.next()) {
            (Some((r, _)), None) => ranks.push(r + 1),
            _ => return Err(Error::invalid(format!("list {i} must contain exactly one positive"))),
        }
    }
    hit_rate_from_ranks(&ranks, k)
}

/// Same as [`hit_rate`] given the 1-based rank of each positive.
pub fn hit_rate_from_ranks(ranks: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::invalid("hit rate needs k ≥ 1"));
    }
    if ranks.is_empty() {
        return Err(Error::invalid("hit rate over zero lists"));
    }
    if ranks.contains(&0) {
        return Err(Error::invalid("ranks are 1-based"));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{user_texts, BehaviorRecord};
use crate::embed::{MapProvider, SourceTag, SyntheticData};
use crate::error::{Error, Result};

const CATALOG: [&str; 12] = [
    "coffee", "groceries", "train tickets", "movie tickets", "phone credit", "books",
    "electronics", "clothing", "insurance", "takeout", "utilities", "flowers",
];

/// Behavior text for the synthetic users and a text "encoder" that maps
/// each user's text to a fixed linear image of their shared latent plus
/// drift, standing in for a later observation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorSynthConfig {
    pub text_dim: usize,
    /// Std of the Gaussian drift added to the shared latent before projection.
    pub drift: f64,
    pub seed: u64,
}

impl Default for BehaviorSynthConfig {
    fn default() -> Self {
        Self {
            text_dim: 32,
            drift: 0.1,
            seed: 7,
        }
    }
}

/// One Bill record per user. Items depend on the user's shared latent; an
/// order number keeps every text distinct.
pub fn synth_behavior(data: &SyntheticData, config: &BehaviorSynthConfig) -> Vec<BehaviorRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let amount = LogNormal::new(3.0, 1.0).expect("valid lognormal");
    let shared = &data.latents.shared;
    data.labels
        .user_ids
        .iter()
        .enumerate()
        .map(|(i, &user_id)| {
            let u = shared.row(i);
            let mut items: Vec<String> = u
                .iter()
                .enumerate()
                .take(3)
                .map(|(k, &x)| CATALOG[(2 * k + usize::from(x > 0.0)) % CATALOG.len()].to_string())
                .collect();
            items.push(format!("order #{user_id}"));
            BehaviorRecord {
                user_id,
                source: SourceTag::Bill,
                items,
                num: Some(Distribution::<f64>::sample(&amount, &mut rng).floor()),
                status: Some(if u[0] + rng.random::<f64>() * 0.5 > 0.0 { "successful" } else { "failed" }.into()),
            }
        })
        .collect()
}

/// Provider answering each user's rendered text with `W·(u + drift·ξ)`.
pub fn synth_text_provider(
    data: &SyntheticData,
    records: &[BehaviorRecord],
    config: &BehaviorSynthConfig,
) -> Result<MapProvider> {
    let shared = &data.latents.shared;
    let ds = shared.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let w: Vec<Vec<f64>> = (0..config.text_dim)
        .map(|_| (0..ds).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let index: std::collections::HashMap<u64, usize> =
        data.labels.user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let mut provider = MapProvider::new(config.text_dim);
    for (user, text) in user_texts(records)? {
        let i = *index
            .get(&user)
            .ok_or_else(|| Error::invalid(format!("user {user} is not in the synthetic data")))?;
        let drifted: Vec<f64> = shared
            .row(i)
            .iter()
            .map(|&x| x + config.drift * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let v = w
            .iter()
            .map(|row| row.iter().zip(&drifted).map(|(a, b)| a * b).sum::<f64>() as f32)
            .collect();
        provider.insert(text, v)?;
    }
    Ok(provider)
}

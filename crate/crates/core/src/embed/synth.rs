//! Deterministic synthetic multi-source users.
//!
//! Each user has a shared latent `u ~ N(0, I)` and, per source `x`, a
//! specific latent `w_x ~ N(0, I)`. The emitted embedding for source `x` is
//! `A_x·u + B_x·w_x + ε` with fixed seed-derived projections. Labels are
//! half-space indicators of the latents, so a representation that keeps
//! source-specific structure can be told apart from one that only keeps the
//! shared part.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{EmbeddingRecord, EngagementTable, SourceTag};
use crate::error::{Error, Result};
use crate::ndmath::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub sources: Vec<SourceTag>,
    pub d: usize,
    pub d_shared: usize,
    pub d_specific: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            sources: SourceTag::ALL.to_vec(),
            d: 64,
            d_shared: 8,
            d_specific: 4,
            noise_sigma: 0.05,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 {
            return Err(Error::invalid("num_users must be ≥ 1"));
        }
        if self.sources.is_empty() {
            return Err(Error::invalid("at least one source is required"));
        }
        if super::canonical_sources(&self.sources).len() != self.sources.len() {
            return Err(Error::invalid("duplicate source in synthetic config"));
        }
        if self.d_shared == 0 || self.d_specific == 0 {
            return Err(Error::invalid("d_shared and d_specific must be ≥ 1"));
        }
        if self.d < self.d_shared + self.d_specific {
            return Err(Error::invalid(format!(
                "d = {} must be ≥ d_shared + d_specific = {}",
                self.d,
                self.d_shared + self.d_specific
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be finite and ≥ 0"));
        }
        Ok(())
    }

    pub fn shared_task() -> &'static str {
        "shared"
    }

    pub fn specific_task(source: SourceTag) -> String {
        format!("specific:{source}")
    }
}

/// The latent variables behind a synthetic dataset, rows in user order.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub shared: Matrix<f64>,
    pub specific: BTreeMap<SourceTag, Matrix<f64>>,
    pub shared_direction: Vec<f64>,
    pub specific_directions: BTreeMap<SourceTag, Vec<f64>>,
}

/// Binary labels per task, aligned with `user_ids`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelTable {
    pub user_ids: Vec<u64>,
    pub tasks: BTreeMap<String, Vec<u8>>,
}

impl LabelTable {
    pub fn task(&self, name: &str) -> Result<&[u8]> {
        self.tasks
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::invalid(format!("no label task `{name}`")))
    }

    /// Looks up a task's labels keyed by user id.
    pub fn task_map(&self, name: &str) -> Result<BTreeMap<u64, u8>> {
        let labels = self.task(name)?;
        Ok(self.user_ids.iter().copied().zip(labels.iter().copied()).collect())
    }

    /// CSV with header `user_id,<task>,…`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let names: Vec<&String> = self.tasks.keys().collect();
        write!(w, "user_id")?;
        for n in &names {
            write!(w, ",{n}")?;
        }
        writeln!(w)?;
        for (i, u) in self.user_ids.iter().enumerate() {
            write!(w, "{u}")?;
            for n in &names {
                write!(w, ",{}", self.tasks[*n][i])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(0, "empty label file"))??;
        let mut cols = header.split(',');
        if cols.next().map(str::trim) != Some("user_id") {
            return Err(Error::format(0, "label header must start with user_id"));
        }
        let names: Vec<String> = cols.map(|s| s.trim().to_string()).collect();
        let mut table = LabelTable {
            user_ids: Vec::new(),
            tasks: names.iter().map(|n| (n.clone(), Vec::new())).collect(),
        };
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::format(i as u64 + 1, format!("line {}: {msg}", i + 2));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != names.len() + 1 {
                return Err(bad(format!("expected {} fields", names.len() + 1)));
            }
            table
                .user_ids
                .push(fields[0].parse().map_err(|e| bad(format!("{e}")))?);
            for (n, f) in names.iter().zip(&fields[1..]) {
                let v: u8 = f.parse().map_err(|e| bad(format!("{e}")))?;
                if v > 1 {
                    return Err(bad(format!("label {v} is not 0/1")));
                }
                table.tasks.get_mut(n).unwrap().push(v);
            }
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

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    /// User-major, sources in config order.
    pub records: Vec<EmbeddingRecord>,
    pub labels: LabelTable,
    pub engagement: EngagementTable,
    pub latents: Latents,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).expect("sized")
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generates the dataset; a pure function of `config`.
pub fn synth_generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let SyntheticConfig {
        num_users: n,
        d,
        d_shared: ds,
        d_specific: dp,
        noise_sigma,
        seed,
        ..
    } = *config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Projections scaled so each output coordinate has unit variance before noise.
    let proj_std = 1.0 / ((ds + dp) as f64).sqrt();
    let mut proj = Vec::with_capacity(config.sources.len());
    for _ in &config.sources {
        let a = gaussian_matrix(ds, d, proj_std, &mut rng);
        let b = gaussian_matrix(dp, d, proj_std, &mut rng);
        proj.push((a, b));
    }
    let shared_direction = gaussian_vec(ds, &mut rng);
    let specific_directions: BTreeMap<SourceTag, Vec<f64>> = config
        .sources
        .iter()
        .map(|&s| (s, gaussian_vec(dp, &mut rng)))
        .collect();

    let mut shared = Matrix::<f64>::zeros(n, ds);
    let mut specific: BTreeMap<SourceTag, Matrix<f64>> = config
        .sources
        .iter()
        .map(|&s| (s, Matrix::zeros(n, dp)))
        .collect();
    let mut records = Vec::with_capacity(n * config.sources.len());
    for user in 0..n {
        let u = Matrix::row_vector(gaussian_vec(ds, &mut rng));
        shared.row_mut(user).copy_from_slice(u.data());
        for (si, &source) in config.sources.iter().enumerate() {
            let w = Matrix::row_vector(gaussian_vec(dp, &mut rng));
            specific.get_mut(&source).unwrap().row_mut(user).copy_from_slice(w.data());
            let (a, b) = &proj[si];
            let mut v = u.matmul(a)?;
            v.add_assign(&w.matmul(b)?)?;
            if noise_sigma > 0.0 {
                for x in v.data_mut() {
                    *x += noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            records.push(EmbeddingRecord {
                user_id: user as u64,
                source,
                vector: v.cast(),
            });
        }
    }

    let heavy_tail = LogNormal::new(1.0, 1.5).expect("valid lognormal");
    let engagement = (0..n)
        .map(|user| (user as u64, Distribution::<f64>::sample(&heavy_tail, &mut rng).floor() as u64))
        .collect();

    let mut tasks = BTreeMap::new();
    tasks.insert(
        SyntheticConfig::shared_task().to_string(),
        (0..n)
            .map(|i| u8::from(dot(shared.row(i), &shared_direction) > 0.0))
            .collect(),
    );
    for (&source, dir) in &specific_directions {
        let w = &specific[&source];
        tasks.insert(
            SyntheticConfig::specific_task(source),
            (0..n).map(|i| u8::from(dot(w.row(i), dir) > 0.0)).collect(),
        );
    }

    Ok(SyntheticData {
        records,
        labels: LabelTable {
            user_ids: (0..n as u64).collect(),
            tasks,
        },
        engagement,
        latents: Latents {
            shared,
            specific,
            shared_direction,
            specific_directions,
        },
    })
}

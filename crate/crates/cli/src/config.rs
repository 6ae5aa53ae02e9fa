//! Run configuration: defaults, then a JSON or TOML file, then `--set`
//! overrides, then the dedicated flags. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uqt_core::align::{AlignConfig, BehaviorSynthConfig};
use uqt_core::embed::SyntheticConfig;
use uqt_core::eval::{ProbeConfig, SplitConfig};
use uqt_core::mrqvae::MrqConfig;
use uqt_core::tokenizer::{TokenFormat, DEFAULT_SPECIAL_CAPACITY};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Copied into every section's seed during resolution.
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub precision: Precision,
    pub out: PathBuf,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub tokenize: TokenizeSection,
    pub align: AlignSection,
    pub probe: ProbeSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 0,
            precision: Precision::F32,
            out: PathBuf::from("uqt-out"),
            synth: SynthSection::default(),
            train: TrainSection::default(),
            tokenize: TokenizeSection::default(),
            align: AlignSection::default(),
            probe: ProbeSection::default(),
            report: ReportSection::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub data: SyntheticConfig,
    pub behavior: BehaviorSynthConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub embeddings: Option<PathBuf>,
    /// Checkpoint to continue from; its config must match `model` except `epochs`.
    pub resume: Option<PathBuf>,
    pub model: MrqConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizeSection {
    pub checkpoint: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub engagement: Option<PathBuf>,
    pub format: TokenFormat,
    pub special_capacity: u32,
}

impl Default for TokenizeSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            embeddings: None,
            engagement: None,
            format: TokenFormat::Binary,
            special_capacity: DEFAULT_SPECIAL_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
pub enum ProviderSpec {
    /// Text → vector table written by `synth` (or by hand).
    Map { path: Option<PathBuf> },
    Hashing { dim: usize },
    Http { endpoint: String, dim: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignSection {
    pub tokens: Option<PathBuf>,
    pub behavior: Option<PathBuf>,
    /// Model checkpoint whose codewords seed the token table.
    pub checkpoint: Option<PathBuf>,
    pub provider: ProviderSpec,
    pub head: AlignConfig,
}

impl Default for AlignSection {
    fn default() -> Self {
        Self {
            tokens: None,
            behavior: None,
            checkpoint: None,
            provider: ProviderSpec::Map { path: None },
            head: AlignConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFeatures {
    OneHot,
    Fused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub tokens: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Column of the label file.
    pub task: String,
    pub features: ProbeFeatures,
    /// Fusion head used for `fused` features.
    pub head: Option<PathBuf>,
    pub split: SplitConfig,
    pub model: ProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            tokens: None,
            labels: None,
            task: SyntheticConfig::shared_task().to_string(),
            features: ProbeFeatures::OneHot,
            head: None,
            split: SplitConfig::default(),
            model: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub checkpoint: Option<PathBuf>,
    pub tokens: Option<PathBuf>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub precision: Option<Precision>,
    pub out: Option<PathBuf>,
    pub set: Vec<String>,
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    if is_toml {
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    } else {
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// `a.b.c=value`; the value is parsed as JSON, falling back to a plain string.
fn apply_set(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{assignment}`")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("--set {key}: `{}` is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    pub fn resolve(o: &Overrides) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("default config serializes");
        if let Some(path) = &o.config {
            merge(&mut value, read_file(path)?);
        }
        for s in &o.set {
            apply_set(&mut value, s)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        if let Some(v) = o.seed {
            cfg.seed = v;
        }
        if let Some(v) = o.threads {
            cfg.threads = v;
        }
        if let Some(v) = o.precision {
            cfg.precision = v;
        }
        if let Some(v) = &o.out {
            cfg.out = v.clone();
        }
        cfg.propagate_seed();
        Ok(cfg)
    }

    fn propagate_seed(&mut self) {
        let s = self.seed;
        self.synth.data.seed = s;
        // Offset so the behavior stream does not replay the data stream.
        self.synth.behavior.seed = s.wrapping_add(1);
        self.train.model.seed = s;
        self.align.head.seed = s;
        self.probe.split.seed = s;
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn or_out(&self, path: &Option<PathBuf>, name: &str) -> PathBuf {
        path.clone().unwrap_or_else(|| self.out_path(name))
    }
}

pub const EMBEDDINGS_FILE: &str = "embeddings.uqte";
pub const LABELS_FILE: &str = "labels.csv";
pub const ENGAGEMENT_FILE: &str = "engagement.csv";
pub const BEHAVIOR_FILE: &str = "behavior.jsonl";
pub const TEXT_TABLE_FILE: &str = "text_embeddings.jsonl";
pub const CHECKPOINT_FILE: &str = "model.uqtm";
pub const CURVE_FILE: &str = "curve.csv";
pub const HEAD_FILE: &str = "head.uqtf";
pub const ALIGN_CURVE_FILE: &str = "align_curve.csv";
pub const PROBE_FILE: &str = "probe.json";

pub fn tokens_file(format: TokenFormat) -> &'static str {
    match format {
        TokenFormat::Binary => "tokens.uqtt",
        TokenFormat::Jsonl => "tokens.jsonl",
    }
}

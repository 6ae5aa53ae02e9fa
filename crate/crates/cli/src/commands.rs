//! One function per subcommand. Inputs default to files in the output
//! directory, so `synth → train → tokenize → align → probe → report` chains
//! without extra configuration.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use uqt_core::align::{
    build_pairs, load_behavior, save_head, load_head, synth_behavior, synth_text_provider, train_alignment,
    write_behavior_jsonl, FusionHead,
};
use uqt_core::embed::{
    load_embeddings, save_embeddings, synth_generate, EmbeddingProvider, EngagementTable, HashingProvider,
    HttpProvider, LabelTable, MapProvider,
};
use uqt_core::eval::{export_report, linear_probe, ProbeDataset, ProbeMetrics};
use uqt_core::mrqvae::{
    continue_training, load_checkpoint, samples_from_records, save_checkpoint, train, MrqConfig, MrqModel, Sample,
};
use uqt_core::ndmath::{Matrix, Real};
use uqt_core::tokenizer::{
    deserialize_tokens, serialize_tokens, tokenize, TokenVocabulary, UserTokenSequence,
};

use crate::config::*;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).map_err(|e| uqt_core::Error::File {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(uqt_core::Error::from)?;
    w.flush().map_err(uqt_core::Error::from)?;
    Ok(())
}

fn load_samples<T: Real>(path: &Path, model: &MrqConfig) -> Result<Vec<Sample<T>>> {
    let records = load_embeddings(path)?;
    Ok(samples_from_records(&records, &model.sources, model.input_dim)?)
}

/// Token file plus its vocabulary; JSONL files take it from the checkpoint.
fn load_tokens(cfg: &RunConfig, path: &Path) -> Result<(TokenVocabulary, Vec<UserTokenSequence>)> {
    let file = deserialize_tokens(path)?;
    let vocab = match file.vocabulary {
        Some(v) => v,
        None => {
            let ckpt = cfg.or_out(&cfg.tokenize.checkpoint, CHECKPOINT_FILE);
            let model = load_checkpoint::<f32>(&ckpt)?;
            TokenVocabulary::for_stack(&model.codebooks, cfg.tokenize.special_capacity)?
        }
    };
    for s in &file.sequences {
        vocab.check_sequence(&s.tokens, true)?;
    }
    Ok((vocab, file.sequences))
}

fn default_tokens(cfg: &RunConfig, path: &Option<PathBuf>) -> PathBuf {
    cfg.or_out(path, tokens_file(cfg.tokenize.format))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub records: usize,
    pub users: usize,
    pub sources: usize,
}

pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let data = synth_generate(&cfg.synth.data)?;
    save_embeddings(&data.records, &cfg.out_path(EMBEDDINGS_FILE))?;
    data.labels.save(&cfg.out_path(LABELS_FILE))?;
    data.engagement.save(&cfg.out_path(ENGAGEMENT_FILE))?;
    let behavior = synth_behavior(&data, &cfg.synth.behavior);
    let mut w = create(&cfg.out_path(BEHAVIOR_FILE))?;
    write_behavior_jsonl(&behavior, &mut w)?;
    w.flush().map_err(uqt_core::Error::from)?;
    synth_text_provider(&data, &behavior, &cfg.synth.behavior)?.save(&cfg.out_path(TEXT_TABLE_FILE))?;
    Ok(SynthSummary {
        records: data.records.len(),
        users: cfg.synth.data.num_users,
        sources: cfg.synth.data.sources.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub first_recon: f64,
    pub final_recon: f64,
    pub checkpoint: PathBuf,
}

fn check_resume(saved: &MrqConfig, wanted: &MrqConfig) -> Result<()> {
    let mut a = saved.clone();
    a.epochs = wanted.epochs;
    if &a == wanted {
        return Ok(());
    }
    let (sa, sw) = (serde_json::to_value(&a).unwrap(), serde_json::to_value(wanted).unwrap());
    let diff: Vec<&String> = sw
        .as_object()
        .unwrap()
        .iter()
        .filter(|(k, v)| sa.get(k.as_str()) != Some(v))
        .map(|(k, _)| k)
        .collect();
    Err(CliError::Usage(format!(
        "cannot resume: checkpoint config differs in {diff:?}"
    )))
}

pub fn cmd_train<T: Real>(cfg: &RunConfig) -> Result<TrainSummary> {
    let model_cfg = &cfg.train.model;
    model_cfg.validate()?;
    let samples = load_samples::<T>(&cfg.or_out(&cfg.train.embeddings, EMBEDDINGS_FILE), model_cfg)?;
    info!("training on {} (user, source) samples", samples.len());
    let (model, curve) = match &cfg.train.resume {
        Some(path) => {
            let mut model = load_checkpoint::<T>(path)?;
            check_resume(&model.config, model_cfg)?;
            model.config.epochs = model_cfg.epochs;
            info!("resuming from {}", path.display());
            continue_training(model, &samples, model_cfg.epochs)?
        }
        None => train(&samples, model_cfg)?,
    };
    let checkpoint = cfg.out_path(CHECKPOINT_FILE);
    save_checkpoint(&model, &checkpoint)?;
    write_text(&cfg.out_path(CURVE_FILE), &curve.to_csv())?;
    let recon = |i: usize| curve.epochs.get(i).map_or(f64::NAN, |e| e.recon);
    Ok(TrainSummary {
        epochs: curve.epochs.len(),
        first_recon: recon(0),
        final_recon: recon(curve.epochs.len().wrapping_sub(1)),
        checkpoint,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenizeSummary {
    pub users: usize,
    pub tokens_per_user: usize,
    pub vocab_size: u32,
    pub collided_users: usize,
    pub path: PathBuf,
}

pub fn cmd_tokenize<T: Real>(cfg: &RunConfig) -> Result<TokenizeSummary> {
    let t = &cfg.tokenize;
    let model: MrqModel<T> = load_checkpoint(&cfg.or_out(&t.checkpoint, CHECKPOINT_FILE))?;
    let samples = load_samples::<T>(&cfg.or_out(&t.embeddings, EMBEDDINGS_FILE), &model.config)?;
    let engagement = EngagementTable::load(&cfg.or_out(&t.engagement, ENGAGEMENT_FILE))?;
    let (vocab, seqs) = tokenize(&model, &samples, &engagement, t.special_capacity)?;
    let mut seen = HashSet::with_capacity(seqs.len());
    for s in &seqs {
        if !seen.insert(&s.tokens) {
            return Err(CliError::Usage(format!("duplicate token sequence for user {}", s.user_id)));
        }
    }
    let special = vocab.special_offset;
    let collided_users = seqs.iter().filter(|s| *s.tokens.last().unwrap() != special).count();
    let path = cfg.out_path(tokens_file(t.format));
    serialize_tokens(&seqs, &vocab, &path, t.format)?;
    Ok(TokenizeSummary {
        users: seqs.len(),
        tokens_per_user: vocab.sequence_len(),
        vocab_size: vocab.vocab_size(),
        collided_users,
        path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignSummary {
    pub pairs: usize,
    pub curve: Vec<f64>,
    pub head: PathBuf,
}

fn provider(cfg: &RunConfig) -> Result<Box<dyn EmbeddingProvider>> {
    Ok(match &cfg.align.provider {
        ProviderSpec::Map { path } => Box::new(MapProvider::load(&cfg.or_out(path, TEXT_TABLE_FILE))?),
        ProviderSpec::Hashing { dim } => Box::new(HashingProvider::new(*dim, cfg.seed)),
        ProviderSpec::Http { endpoint, dim } => Box::new(HttpProvider {
            endpoint: endpoint.clone(),
            dim: *dim,
        }),
    })
}

pub fn cmd_align<T: Real>(cfg: &RunConfig) -> Result<AlignSummary> {
    let a = &cfg.align;
    a.head.validate()?;
    let (vocab, seqs) = load_tokens(cfg, &default_tokens(cfg, &a.tokens))?;
    let records = load_behavior(&cfg.or_out(&a.behavior, BEHAVIOR_FILE))?;
    let provider = provider(cfg)?;
    let (seqs, text) = build_pairs::<T>(&seqs, &records, provider.as_ref())?;
    let ckpt = cfg.or_out(&a.checkpoint, CHECKPOINT_FILE);
    let head = if a.checkpoint.is_some() || ckpt.exists() {
        let model = load_checkpoint::<T>(&ckpt)?;
        info!("token table seeded from {}", ckpt.display());
        FusionHead::for_vocabulary(&vocab, &model.codebooks, a.head.token_dim, &a.head.hidden, text.cols(), a.head.seed)?
    } else {
        warn!("no checkpoint at {}; token table randomly initialized", ckpt.display());
        FusionHead::new(vocab.vocab_size() as usize, a.head.token_dim, &a.head.hidden, text.cols(), a.head.seed)?
    };
    let (head, curve) = train_alignment(&seqs, &text, head, &a.head)?;
    let path = cfg.out_path(HEAD_FILE);
    save_head(&head, &path)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in curve.epochs.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write_text(&cfg.out_path(ALIGN_CURVE_FILE), &csv)?;
    Ok(AlignSummary {
        pairs: seqs.len(),
        curve: curve.epochs,
        head: path,
    })
}

pub fn cmd_probe<T: Real>(cfg: &RunConfig) -> Result<ProbeMetrics> {
    let p = &cfg.probe;
    let (vocab, seqs) = load_tokens(cfg, &default_tokens(cfg, &p.tokens))?;
    let labels = LabelTable::load(&cfg.or_out(&p.labels, LABELS_FILE))?.task_map(&p.task)?;
    let data = match p.features {
        ProbeFeatures::OneHot => ProbeDataset::one_hot(&seqs, &vocab, &labels, &p.split)?,
        ProbeFeatures::Fused => {
            let head: FusionHead<T> = load_head(&cfg.or_out(&p.head, HEAD_FILE))?;
            let mut x = Matrix::<f64>::zeros(seqs.len(), head.output_dim());
            let mut ys = Vec::with_capacity(seqs.len());
            for (i, s) in seqs.iter().enumerate() {
                for (dst, v) in x.row_mut(i).iter_mut().zip(head.fuse(s)?.data()) {
                    *dst = v.as_f64();
                }
                ys.push(*labels.get(&s.user_id).ok_or_else(|| {
                    CliError::Usage(format!("no `{}` label for user {}", p.task, s.user_id))
                })?);
            }
            ProbeDataset::new(seqs.iter().map(|s| s.user_id).collect(), x, ys, &p.split)?
        }
    };
    let metrics = linear_probe(&data, &p.model)?;
    write_text(&cfg.out_path(PROBE_FILE), &serde_json::to_string_pretty(&metrics).unwrap())?;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub utilization: PathBuf,
    pub zhat: PathBuf,
}

pub fn cmd_report<T: Real>(cfg: &RunConfig) -> Result<ReportSummary> {
    let r = &cfg.report;
    let model: MrqModel<T> = load_checkpoint(&cfg.or_out(&r.checkpoint, CHECKPOINT_FILE))?;
    let (vocab, seqs) = load_tokens(cfg, &default_tokens(cfg, &r.tokens))?;
    let paths = export_report(&model.codebooks, &vocab, &seqs, &cfg.out)?;
    Ok(ReportSummary {
        utilization: paths.utilization,
        zhat: paths.zhat,
    })
}

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{prepare_out_dir, write_config, write_text, ExperimentConfig, TextEncoderConfig, TextEncoderKind};
use crate::corpus::{
    generate_synthetic_corpus, load_corpus, load_vocabulary, split_corpus, synthetic_vocabulary, write_corpus,
    write_vocabulary, CorpusSplit, SyntheticWorld, TagVocabulary, Track,
};
use crate::encoders::{read_embeddings, write_embeddings, EmbeddingRecord, FileTextEncoder, TextEncoder, ToyTextEncoder};
use crate::eval::{evaluate_dataset, EvalConfig, MetricReport};
use crate::model::{read_checkpoint, write_checkpoint, Model, ModelConfig};
use crate::par::ExecMode;
use crate::tensor::{check_primitives, PrimitiveCheck};
use crate::textaug::{augment_corpus, AugmentConfig, Grammar};
use crate::train::{composite_grad_check, train_with, EpochLog, TrainData};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRequest {
    pub out_dir: PathBuf,
    pub n: usize,
    pub per_category: usize,
    pub dim: usize,
    pub layers: usize,
    pub frames: usize,
    pub sigma: f64,
    pub tags_min: usize,
    pub tags_max: usize,
    pub seed: u64,
}

impl Default for SynthRequest {
    fn default() -> Self {
        SynthRequest {
            out_dir: PathBuf::from("synth"),
            n: 450,
            per_category: 8,
            dim: 32,
            layers: 1,
            frames: 4,
            sigma: 0.1,
            tags_min: 1,
            tags_max: 2,
            seed: 0,
        }
    }
}

/// Write `corpus.jsonl`, `vocab.json`, `audio.mmeb` and a ready-to-train
/// `experiment.json` whose model matches the generated embeddings.
pub fn run_synth(req: &SynthRequest) -> Result<ExperimentConfig> {
    let vocab = synthetic_vocabulary(req.per_category)?;
    let world = SyntheticWorld::new(&vocab, req.dim, req.sigma, req.seed)?.with_shape(req.layers, req.frames);
    let (tracks, audio) = generate_synthetic_corpus(req.n, &vocab, &world, req.tags_min..=req.tags_max)?;
    let dir = &req.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let corpus = dir.join("corpus.jsonl");
    let vocab_path = dir.join("vocab.json");
    let audio_path = dir.join("audio.mmeb");
    write_corpus(&corpus, &tracks)?;
    write_vocabulary(&vocab_path, &vocab)?;
    write_embeddings(&audio, &audio_path)?;
    let cfg = ExperimentConfig {
        corpus: Some(corpus),
        vocab: Some(vocab_path),
        audio_emb: Some(audio_path),
        out_dir: Some(dir.join("run")),
        seed: req.seed,
        model: ModelConfig {
            audio_dim: req.dim,
            audio_layers: req.layers,
            d_model: 64,
            d_joint: 64,
            ..Default::default()
        },
        ..Default::default()
    }
    .resolved();
    write_text(&dir.join("experiment.json"), &(cfg.to_json() + "\n"))?;
    Ok(cfg)
}

/// Attach caption views to every track of a corpus and write it back out.
pub fn run_augment(corpus: &Path, vocab: &Path, out: &Path, cfg: &AugmentConfig, mode: ExecMode) -> Result<usize> {
    cfg.validate()
        .map_err(|(field, msg)| Error::config(format!("augment.{field}"), msg))?;
    let vocab = load_vocabulary(vocab)?;
    let tracks = load_corpus(corpus, &vocab)?;
    let grammar = Grammar::load(&cfg.grammar)?;
    let augmented = augment_corpus(&tracks, cfg, &grammar, mode)?;
    write_corpus(out, &augmented)?;
    Ok(augmented.len())
}

/// Sidecar of `best.ckpt`, enough to rebuild the model and its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub epoch: usize,
    pub val_loss: f64,
    pub parameter_count: usize,
    pub config: ExperimentConfig,
    pub split: CorpusSplit,
}

impl CheckpointMeta {
    pub fn path_for(ckpt: &Path) -> PathBuf {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn load(ckpt: &Path) -> Result<CheckpointMeta> {
        let path = CheckpointMeta::path_for(ckpt);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub train_tracks: usize,
    pub val_tracks: usize,
    pub test_tracks: usize,
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    entry: &'a EpochLog,
    config_hash: &'a str,
}

fn build_text_encoder(cfg: &TextEncoderConfig) -> Result<Box<dyn TextEncoder>> {
    Ok(match cfg.kind {
        TextEncoderKind::Toy => Box::new(ToyTextEncoder::new(cfg.dim, cfg.seed)),
        TextEncoderKind::File => {
            let path = ExperimentConfig::required("text_encoder.path", &cfg.path)?;
            Box::new(FileTextEncoder::new(read_embeddings(path)?)?)
        }
    })
}

fn check_audio_shape(model: &ModelConfig, audio: &IndexMap<String, EmbeddingRecord>) -> Result<()> {
    for r in audio.values() {
        if r.dim != model.audio_dim {
            return Err(Error::config(
                "model.audio_dim",
                format!("is {} but embedding '{}' has dim {}", model.audio_dim, r.id, r.dim),
            ));
        }
        if r.layers != model.audio_layers {
            return Err(Error::config(
                "model.audio_layers",
                format!("is {} but embedding '{}' has {} layers", model.audio_layers, r.id, r.layers),
            ));
        }
    }
    Ok(())
}

fn select(tracks: &[Track], ids: &[String]) -> Vec<Track> {
    let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
    tracks.iter().filter(|t| wanted.contains(t.id.as_str())).cloned().collect()
}

struct Inputs {
    vocab: TagVocabulary,
    tracks: Vec<Track>,
    audio: IndexMap<String, EmbeddingRecord>,
}

fn load_inputs(cfg: &ExperimentConfig) -> Result<Inputs> {
    let corpus = ExperimentConfig::required("corpus", &cfg.corpus)?;
    let vocab = ExperimentConfig::required("vocab", &cfg.vocab)?;
    let audio = ExperimentConfig::required("audio_emb", &cfg.audio_emb)?;
    let vocab = load_vocabulary(vocab)?;
    let tracks = load_corpus(corpus, &vocab)?;
    let audio = read_embeddings(audio)?;
    Ok(Inputs { vocab, tracks, audio })
}

/// Split, augment and train; writes `config.json`, `config.sha256`,
/// `log.jsonl`, `best.ckpt` with its `.json` sidecar, `split.json` and
/// `train_summary.json` into the configured output directory.
pub fn run_train(cfg: &ExperimentConfig, mode: ExecMode, force: bool) -> Result<TrainSummary> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let inputs = load_inputs(&cfg)?;
    let out = ExperimentConfig::required("out_dir", &cfg.out_dir)?.to_path_buf();
    check_audio_shape(&cfg.model, &inputs.audio)?;
    let encoder = build_text_encoder(&cfg.text_encoder)?;
    if encoder.dim() != cfg.model.text_dim {
        return Err(Error::config(
            "model.text_dim",
            format!("is {} but the text encoder produces {}", cfg.model.text_dim, encoder.dim()),
        ));
    }
    let grammar = Grammar::load(&cfg.augment.grammar)?;

    let hash = cfg.hash();
    prepare_out_dir(&out, &hash, force)?;
    write_config(&out, &cfg)?;

    let split = split_corpus(&inputs.tracks, cfg.split.fractions, cfg.seed)?;
    let train_tracks = augment_corpus(&select(&inputs.tracks, &split.train), &cfg.augment, &grammar, mode)?;
    let val_tracks = augment_corpus(&select(&inputs.tracks, &split.validation), &cfg.augment, &grammar, mode)?;
    write_text(
        &out.join("split.json"),
        &(serde_json::to_string_pretty(&split).expect("split serializes") + "\n"),
    )?;

    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let data = TrainData {
        train: &train_tracks,
        val: &val_tracks,
        audio: &inputs.audio,
        vocab: &inputs.vocab,
        text_encoder: encoder.as_ref(),
    };
    let log_path = out.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let ckpt = out.join("best.ckpt");
    let mut meta_config = cfg.clone();
    meta_config.out_dir = None;
    let mut on_epoch = |entry: &EpochLog, improved: Option<&Model>| -> Result<()> {
        let line = serde_json::to_string(&LogLine {
            entry,
            config_hash: &hash,
        })
        .expect("log line serializes");
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))?;
        if let Some(model) = improved {
            write_checkpoint(&ckpt, &model.params)?;
            let meta = CheckpointMeta {
                config_hash: hash.clone(),
                epoch: entry.epoch,
                val_loss: entry.val_loss,
                parameter_count: model.parameter_count(),
                config: meta_config.clone(),
                split: split.clone(),
            };
            write_text(
                &CheckpointMeta::path_for(&ckpt),
                &(serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n"),
            )?;
        }
        Ok(())
    };
    let outcome = train_with(model, &data, &cfg.train, &cfg.augment, mode, &|_, l| l, &mut on_epoch)?;

    let summary = TrainSummary {
        config_hash: hash,
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        epochs_run: outcome.log.len(),
        stopped_early: outcome.stopped_early,
        train_tracks: split.train.len(),
        val_tracks: split.validation.len(),
        test_tracks: split.test.len(),
    };
    write_text(
        &out.join("train_summary.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    Ok(summary)
}

/// Which tracks of each evaluation corpus are queried.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSelection {
    All,
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub corpus: PathBuf,
    pub audio_emb: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRequest {
    pub ckpt: PathBuf,
    /// Empty means the corpus the checkpoint was trained on.
    pub datasets: Vec<DatasetSpec>,
    pub vocab: Option<PathBuf>,
    pub split: SplitSelection,
    pub eval: EvalConfig,
    /// Report JSON path; a CSV mirror is written next to it.
    pub out: PathBuf,
}

/// Evaluate a checkpoint on one or more datasets and write `report.json`
/// plus `report.csv`.
pub fn run_eval(req: &EvalRequest, mode: ExecMode) -> Result<MetricReport> {
    req.eval.subsets().validate()?;
    let meta = CheckpointMeta::load(&req.ckpt)?;
    let model = Model::init(meta.config.model.clone(), 0)?.with_params(read_checkpoint(&req.ckpt)?)?;
    let vocab_path = req.vocab.as_ref().or(meta.config.vocab.as_ref());
    let vocab = load_vocabulary(ExperimentConfig::required("vocab", &vocab_path.cloned())?)?;
    let encoder = build_text_encoder(&meta.config.text_encoder)?;
    let grammar = Grammar::load(&meta.config.augment.grammar)?;

    let datasets = if req.datasets.is_empty() {
        vec![DatasetSpec {
            name: "default".into(),
            corpus: ExperimentConfig::required("corpus", &meta.config.corpus)?.to_path_buf(),
            audio_emb: ExperimentConfig::required("audio_emb", &meta.config.audio_emb)?.to_path_buf(),
        }]
    } else {
        req.datasets.clone()
    };
    let mut names = HashSet::new();
    for d in &datasets {
        if !names.insert(d.name.as_str()) {
            return Err(Error::InvalidArgument(format!("dataset name '{}' given twice", d.name)));
        }
    }

    let mut metrics = Vec::with_capacity(datasets.len());
    for d in &datasets {
        let tracks = load_corpus(&d.corpus, &vocab)?;
        let tracks = match req.split {
            SplitSelection::All => tracks,
            SplitSelection::Train => select(&tracks, &meta.split.train),
            SplitSelection::Val => select(&tracks, &meta.split.validation),
            SplitSelection::Test => select(&tracks, &meta.split.test),
        };
        if tracks.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "dataset '{}' has {} tracks in the {:?} split; use --split all for other corpora",
                d.name,
                tracks.len(),
                req.split
            )));
        }
        let audio = read_embeddings(&d.audio_emb)?;
        check_audio_shape(&model.config, &audio)?;
        let (m, _) = evaluate_dataset(&d.name, &model, &tracks, &audio, encoder.as_ref(), &grammar, &req.eval, mode)?;
        log::info!("{}: R@10 {:?} MR {}", d.name, m.recall_at(10), m.median_rank);
        metrics.push(m);
    }
    let mut report = MetricReport::new(metrics);
    report.config_hash = Some(meta.config_hash);
    if let Some(dir) = req.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_text(
        &req.out,
        &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"),
    )?;
    write_text(&req.out.with_extension("csv"), &report.to_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub checks: Vec<PrimitiveCheck>,
    pub passed: bool,
}

/// Every primitive plus the composite training objective.
pub fn run_gradcheck(seed: u64, mode: ExecMode) -> Result<GradcheckReport> {
    let mut checks = check_primitives(seed, mode)?;
    checks.push(composite_grad_check(seed, 0.03, mode)?);
    let passed = checks.iter().all(PrimitiveCheck::passed);
    Ok(GradcheckReport { seed, checks, passed })
}

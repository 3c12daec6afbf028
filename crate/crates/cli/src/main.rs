use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ads_core::eval::{EvalConfig, QueryKind};
use ads_core::experiment::{
    grid_cells, parse_grid_arg, run_ablate, run_augment, run_eval, run_gradcheck, run_synth, run_train, table4_cells,
    AblateRequest, DatasetSpec, EvalRequest, ExperimentConfig, GradcheckReport, SplitSelection, SynthRequest,
    TextEncoderKind,
};
use ads_core::par::{self, ExecMode};
use ads_core::textaug::AugmentConfig;
use ads_core::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ads", version, about = "Music-text contrastive training with augment, drop and swap")]
struct Cli {
    /// Run data-parallel loops on the thread pool or on one thread.
    #[arg(long, value_enum, default_value_t = Exec::Parallel, global = true)]
    exec: Exec,

    #[command(subcommand)]
    command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Exec {
    Parallel,
    Sequential,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tagged corpus with audio embeddings.
    Synth(SynthArgs),
    /// Attach caption views to every track of a corpus.
    Augment(AugmentArgs),
    /// Train a projection model.
    Train(TrainArgs),
    /// Evaluate a checkpoint with subset-normalized retrieval.
    Eval(EvalArgs),
    /// Train and evaluate a grid of configurations.
    Ablate(AblateArgs),
    /// Finite-difference check of every autodiff primitive.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 450)]
    n: usize,
    /// Descriptors per category.
    #[arg(long, default_value_t = 8)]
    per_category: usize,
    /// Audio embedding size.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    tags_min: usize,
    #[arg(long, default_value_t = 2)]
    tags_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AugmentArgs {
    /// Experiment config whose `augment` section is used as the base.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k_views: Option<usize>,
    /// Render one full caption per track instead of random subsets.
    #[arg(long)]
    no_view_dropout: bool,
    /// "default" or a grammar JSON file.
    #[arg(long)]
    grammar: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    audio_emb: Option<PathBuf>,
    /// Precomputed text embeddings (MMEB, keyed by exact text) in place of
    /// the toy encoder.
    #[arg(long)]
    text_emb: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overwrite an output directory that already holds a run.
    #[arg(long)]
    force: bool,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        override_opt(&mut cfg.corpus, &self.corpus);
        override_opt(&mut cfg.vocab, &self.vocab);
        override_opt(&mut cfg.audio_emb, &self.audio_emb);
        override_opt(&mut cfg.out_dir, &self.out_dir);
        if self.text_emb.is_some() {
            cfg.text_encoder.kind = TextEncoderKind::File;
            cfg.text_encoder.path.clone_from(&self.text_emb);
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        Ok(cfg)
    }
}

fn override_opt(slot: &mut Option<PathBuf>, value: &Option<PathBuf>) {
    if value.is_some() {
        slot.clone_from(value);
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

impl From<SplitArg> for SplitSelection {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::All => SplitSelection::All,
            SplitArg::Train => SplitSelection::Train,
            SplitArg::Val => SplitSelection::Val,
            SplitArg::Test => SplitSelection::Test,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum QueryArg {
    Caption,
    Tags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Corpus to evaluate; repeat together with --audio-emb for several
    /// datasets. Defaults to the training corpus.
    #[arg(long)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    audio_emb: Vec<PathBuf>,
    /// Dataset names, in --corpus order. Defaults to the file stems.
    #[arg(long)]
    name: Vec<String>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Tracks to query, by the split recorded in the checkpoint.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    recall_k: Vec<usize>,
    #[arg(long, default_value_t = 500)]
    subset_size: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = QueryArg::Caption)]
    query: QueryArg,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Preset {
    /// Tags only, then tag-to-caption, view dropout and TextSwap added in turn.
    Table4,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Axis `key=v1,v2,...`; repeat for a Cartesian product.
    #[arg(long)]
    grid: Vec<String>,
    #[arg(long, value_enum, conflicts_with = "grid")]
    preset: Option<Preset>,
    /// Label of the reference run; defaults to the first cell.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the per-primitive errors as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn configure_threads() {
    if let Ok(v) = std::env::var("ADS_NUM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if !par::init_threads(n) {
                    log::warn!("ADS_NUM_THREADS={n} ignored");
                }
            }
            _ => log::warn!("ADS_NUM_THREADS must be a positive integer, got '{v}'"),
        }
    }
}

fn write_json(path: &Path, value: &GradcheckReport) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn required<'a>(field: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::config(field, "required (pass the flag or set it in the config)"))
}

fn synth(args: SynthArgs) -> Result<ExitCode> {
    let cfg = run_synth(&SynthRequest {
        out_dir: args.out_dir.clone(),
        n: args.n,
        per_category: args.per_category,
        dim: args.dim,
        layers: args.layers,
        frames: args.frames,
        sigma: args.sigma,
        tags_min: args.tags_min,
        tags_max: args.tags_max,
        seed: args.seed,
    })?;
    println!("wrote {} tracks to {}", args.n, args.out_dir.display());
    println!("experiment config: {}", args.out_dir.join("experiment.json").display());
    log::debug!("config hash {}", cfg.hash());
    Ok(ExitCode::SUCCESS)
}

fn augment(args: AugmentArgs, mode: ExecMode) -> Result<ExitCode> {
    let (mut aug, cfg) = match &args.config {
        Some(p) => {
            let cfg = ExperimentConfig::load(p)?.resolved();
            (cfg.augment.clone(), Some(cfg))
        }
        None => (AugmentConfig::default(), None),
    };
    if let Some(k) = args.k_views {
        aug.k_views = k;
    }
    if args.no_view_dropout {
        aug.view_dropout = false;
    }
    if let Some(g) = args.grammar {
        aug.grammar = g;
    }
    if let Some(s) = args.seed {
        aug.seed = s;
    }
    let corpus = args.corpus.or_else(|| cfg.as_ref().and_then(|c| c.corpus.clone()));
    let vocab = args.vocab.or_else(|| cfg.as_ref().and_then(|c| c.vocab.clone()));
    let corpus = required("corpus", &corpus)?;
    let vocab = required("vocab", &vocab)?;
    let out = required("out", &args.out)?;
    let n = run_augment(corpus, vocab, out, &aug, mode)?;
    println!("augmented {n} tracks -> {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn train(args: TrainArgs, mode: ExecMode) -> Result<ExitCode> {
    let cfg = args.experiment.load()?;
    let summary = run_train(&cfg, mode, args.experiment.force)?;
    println!(
        "best epoch {} (val loss {:.4}) after {} epochs; config hash {}",
        summary.best_epoch, summary.best_val_loss, summary.epochs_run, summary.config_hash
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs, mode: ExecMode) -> Result<ExitCode> {
    if args.corpus.len() != args.audio_emb.len() {
        return Err(Error::config(
            "audio_emb",
            format!("{} --corpus but {} --audio-emb given", args.corpus.len(), args.audio_emb.len()),
        ));
    }
    if !args.name.is_empty() && args.name.len() != args.corpus.len() {
        return Err(Error::config("name", "give one --name per --corpus or none"));
    }
    let datasets = args
        .corpus
        .iter()
        .zip(&args.audio_emb)
        .enumerate()
        .map(|(i, (c, a))| DatasetSpec {
            name: args.name.get(i).cloned().unwrap_or_else(|| {
                c.file_stem()
                    .map_or_else(|| format!("dataset{i}"), |s| s.to_string_lossy().into_owned())
            }),
            corpus: c.clone(),
            audio_emb: a.clone(),
        })
        .collect();
    let report = run_eval(
        &EvalRequest {
            ckpt: args.ckpt,
            datasets,
            vocab: args.vocab,
            split: args.split.into(),
            eval: EvalConfig {
                recall_k: args.recall_k,
                subset_size: args.subset_size,
                repeats: args.repeats,
                seed: args.seed,
                query: match args.query {
                    QueryArg::Caption => QueryKind::Caption,
                    QueryArg::Tags => QueryKind::Tags,
                },
            },
            out: args.out.clone(),
        },
        mode,
    )?;
    print!("{}", report.to_csv());
    println!("report: {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn ablate(args: AblateArgs, mode: ExecMode) -> Result<ExitCode> {
    let base = args.experiment.load()?;
    required("corpus", &base.corpus)?;
    let out_dir = required("out_dir", &base.out_dir)?.to_path_buf();
    let cells = match args.preset {
        Some(Preset::Table4) => table4_cells(&base)?,
        None => {
            let axes = args.grid.iter().map(|g| parse_grid_arg(g)).collect::<Result<Vec<_>>>()?;
            grid_cells(&base, &axes)?
        }
    };
    let outcome = run_ablate(
        &AblateRequest {
            cells,
            out_dir: out_dir.clone(),
            force: args.experiment.force,
            split: args.split.into(),
            baseline: args.baseline,
        },
        mode,
    )?;
    for (label, report) in &outcome.reports {
        let r10 = report.avg_r10.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        println!("{label}: avg R@10 {r10}");
    }
    println!("ablation report: {}", out_dir.join("ablation.csv").display());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(args: GradcheckArgs, mode: ExecMode) -> Result<ExitCode> {
    let report = run_gradcheck(args.seed, mode)?;
    for c in &report.checks {
        println!(
            "{:<28} max rel error {:.3e} (tol {:.0e}) {}",
            c.name,
            c.max_rel_error,
            c.tolerance,
            if c.passed() { "ok" } else { "FAIL" }
        );
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(3) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads();
    let mode = match cli.exec {
        Exec::Parallel => ExecMode::Parallel,
        Exec::Sequential => ExecMode::Sequential,
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Augment(a) => augment(a, mode),
        Command::Train(a) => train(a, mode),
        Command::Eval(a) => eval(a, mode),
        Command::Ablate(a) => ablate(a, mode),
        Command::Gradcheck(a) => gradcheck(a, mode),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 1 })
        }
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Tolerances are pinned below.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use ads_core::corpus::{
    generate_synthetic_corpus, synthetic_vocabulary, Category, SyntheticWorld, TagSet, TagVocabulary, Track,
};
use ads_core::encoders::{write_mmeb, EmbeddingRecord, MmebReader, ToyTextEncoder};
use ads_core::eval::{
    evaluate_dataset, median_rank, rank_target, recall_at_k, subset_normalized_eval, EvalConfig, QueryKind,
    SubsetConfig,
};
use ads_core::experiment::{run_eval, run_gradcheck, run_synth, run_train, EvalRequest, SplitSelection, SynthRequest};
use ads_core::model::{read_checkpoint_from, write_checkpoint_to, JointEmbedding, Model, ModelConfig, ParamStore};
use ads_core::par::ExecMode;
use ads_core::rng::rng_from_seed;
use ads_core::tensor::Tensor;
use ads_core::textaug::{augment_corpus, generate_views, swap_probability, text_swap, AugmentConfig, Grammar};
use ads_core::train::{info_nce, train, TrainConfig, TrainData};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestRng, TestRunner};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: [u64; 4] = [0, 1, 2, 3];
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const LOSS_TOL: f64 = 1e-9;
const METRIC_INSTANCES: usize = 1000;
const CHANCE_R10: f64 = 0.02;
const CHANCE_TOL: f64 = 0.005;
const PROPTEST_CASES: u32 = 10_000;
const LEARN_R10: f64 = 0.25;
const LEARN_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ROUND_TRIPS: usize = 200;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Outcome {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Outcome {
        Outcome::new(false, format!("error: {e}"))
    }
}

fn gradient_oracle() -> Outcome {
    let mut checks = Vec::new();
    let mut slowest = Duration::ZERO;
    for seed in GRAD_SEEDS {
        let t0 = Instant::now();
        match run_gradcheck(seed, ExecMode::Parallel) {
            Ok(r) => checks.extend(r.checks),
            Err(e) => return Outcome::error(e),
        }
        slowest = slowest.max(t0.elapsed());
    }
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("checks are non-empty");
    let mut failing: Vec<&str> = checks
        .iter()
        .filter(|c| c.max_rel_error.is_nan() || c.max_rel_error >= GRAD_TOL)
        .map(|c| c.name)
        .collect();
    failing.dedup();
    Outcome::new(
        failing.is_empty() && slowest < GRAD_BUDGET,
        format!(
            "{} checks per seed, seeds {:?}, worst {} rel err {:.2e} (tol {GRAD_TOL:e}), failing {:?}, slowest {:.1}s (budget {}s)",
            checks.len() / GRAD_SEEDS.len(),
            GRAD_SEEDS,
            worst.name,
            worst.max_rel_error,
            failing,
            slowest.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn loss_analytics() -> Outcome {
    let mut worst_ln: f64 = 0.0;
    for n in [2usize, 4, 16] {
        match info_nce(&Tensor::zeros([n, n]), 0.03) {
            Ok(l) => worst_ln = worst_ln.max((l - (n as f64).ln()).abs()),
            Err(e) => return Outcome::error(e),
        }
    }
    let single = info_nce(&Tensor::zeros([1, 1]), 0.03);
    let single_ok = matches!(single, Ok(l) if l == 0.0);

    let mut rng = rng_from_seed(2);
    let mut worst_shift: f64 = 0.0;
    for n in [2usize, 5, 16] {
        let s = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let base = info_nce(&s, 0.03).unwrap();
        for c in [-3.0, -0.25, 0.7, 10.0] {
            let shifted = info_nce(&s.map(|x| x + c), 0.03).unwrap();
            worst_shift = worst_shift.max((shifted - base).abs());
        }
    }
    Outcome::new(
        worst_ln <= LOSS_TOL && single_ok && worst_shift <= LOSS_TOL,
        format!(
            "max |L - ln N| {worst_ln:.1e}, N=1 loss {single:?}, max shift change {worst_shift:.1e} (tol {LOSS_TOL:e})"
        ),
    )
}

/// Sort the pool by decreasing score and average the 1-based positions of
/// every item tied with the target.
fn oracle_rank(scores: &[f64], target: usize) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let positions: Vec<f64> = order
        .iter()
        .enumerate()
        .filter(|(_, &i)| scores[i] == scores[target])
        .map(|(p, _)| (p + 1) as f64)
        .collect();
    positions.iter().sum::<f64>() / positions.len() as f64
}

fn random_unit(rng: &mut impl rand::Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// A signed permutation of (1, 2, 2). All such points have norm exactly 3,
/// so cosine scores are exact and ties are frequent.
fn lattice_point(rng: &mut impl rand::Rng) -> JointEmbedding {
    let mut v = [1.0, 2.0, 2.0];
    v.swap(0, rng.random_range(0..3));
    for x in &mut v {
        if rng.random_bool(0.5) {
            *x = -*x;
        }
    }
    JointEmbedding(v.to_vec())
}

fn metric_oracle() -> Outcome {
    let mut rng = rng_from_seed(3);
    let mut mismatches = 0usize;
    for _ in 0..METRIC_INSTANCES {
        let pool_size = rng.random_range(2..=64);
        let queries = rng.random_range(1..=8);
        let pool: Vec<JointEmbedding> = (0..pool_size).map(|_| lattice_point(&mut rng)).collect();
        let mut ranks = Vec::new();
        let mut oracle = Vec::new();
        for _ in 0..queries {
            let q = lattice_point(&mut rng);
            let target = rng.random_range(0..pool_size);
            let scores: Vec<f64> = pool
                .iter()
                .map(|p| (0..3).map(|i| q.0[i] * p.0[i]).sum::<f64>())
                .collect();
            ranks.push(rank_target(&q, &pool, target));
            oracle.push(oracle_rank(&scores, target));
        }
        let mut sorted = oracle.clone();
        sorted.sort_by(f64::total_cmp);
        let m = sorted.len();
        let oracle_mr = if m % 2 == 1 {
            sorted[m / 2]
        } else {
            (sorted[m / 2 - 1] + sorted[m / 2]) / 2.0
        };
        let recall_ok = [1usize, 5, 10, 50].iter().all(|&k| {
            let hits = oracle.iter().filter(|&&r| r <= k as f64).count();
            recall_at_k(&ranks, k) == hits as f64 / m as f64
        });
        if ranks != oracle || median_rank(&ranks) != oracle_mr || !recall_ok {
            mismatches += 1;
        }
    }

    // Independent random queries against 1000 random items, ranked inside
    // 20 subsets of 500: 10^4 query rankings at chance.
    let n = 1000;
    let pool: Vec<JointEmbedding> = (0..n).map(|_| JointEmbedding(random_unit(&mut rng, 32))).collect();
    let queries: Vec<JointEmbedding> = (0..n).map(|_| JointEmbedding(random_unit(&mut rng, 32))).collect();
    let cfg = SubsetConfig {
        recall_k: vec![10],
        subset_size: 500,
        repeats: 20,
        seed: 4,
    };
    let (metrics, results) = match subset_normalized_eval("random", &queries, &pool, &cfg, ExecMode::Parallel) {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let r10 = metrics.recall_at(10).unwrap_or(f64::NAN);
    Outcome::new(
        mismatches == 0 && (r10 - CHANCE_R10).abs() <= CHANCE_TOL && results.len() == 10_000,
        format!(
            "{mismatches}/{METRIC_INSTANCES} oracle mismatches; chance R@10 {r10:.4} over {} rankings (target {CHANCE_R10} +/- {CHANCE_TOL})",
            results.len()
        ),
    )
}

fn invariants_vocab() -> TagVocabulary {
    let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<Vec<_>>();
    let mut raw = BTreeMap::new();
    raw.insert(Category::Genre, words(&["rock", "hip-hop", "drum and bass", "jazz", "folk", "synth pop"]));
    raw.insert(Category::Mood, words(&["happy", "melancholic", "dark", "calm", "upbeat"]));
    raw.insert(Category::Instrument, words(&["guitar", "piano", "drums", "string section", "saxophone"]));
    TagVocabulary::new(raw).unwrap()
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-' || c == '_'
}

/// Byte offset of the first whole-word, case-insensitive occurrence.
fn find_word(text: &str, word: &str) -> Option<usize> {
    let lower = text.to_lowercase();
    let word = word.to_lowercase();
    let mut from = 0;
    while let Some(i) = lower[from..].find(&word).map(|i| i + from) {
        let end = i + word.len();
        let before = lower[..i].chars().next_back().is_none_or(|c| !is_word_char(c));
        let after = lower[end..].chars().next().is_none_or(|c| !is_word_char(c));
        if before && after {
            return Some(i);
        }
        from = i + 1;
    }
    None
}

fn tagset_strategy(vocab: &TagVocabulary) -> impl Strategy<Value = TagSet> {
    let pick = |cat| proptest::sample::subsequence(vocab.descriptors(cat).to_vec(), 0..=3);
    (pick(Category::Genre), pick(Category::Mood), pick(Category::Instrument))
        .prop_map(|(g, m, i)| {
            [(Category::Genre, g), (Category::Mood, m), (Category::Instrument, i)]
                .into_iter()
                .filter(|(_, ds)| !ds.is_empty())
                .collect::<TagSet>()
        })
        .prop_filter("at least one tag", |t| !t.is_empty())
}

fn check_invariants(tags: TagSet, seed: u64, vocab: &TagVocabulary, grammar: &Grammar) -> Result<(), TestCaseError> {
    let track = Track::new("t", tags).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let mut rng = rng_from_seed(seed);
    let views = generate_views(&track, 4, grammar, &mut rng).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(!views.is_empty());
    for view in &views {
        // containment: every category kept, only the track's own tags, all rendered
        prop_assert_eq!(
            view.source_tags.keys().collect::<Vec<_>>(),
            track.tags.keys().collect::<Vec<_>>()
        );
        for (cat, ds) in &view.source_tags {
            prop_assert!(!ds.is_empty());
            for d in ds {
                prop_assert!(track.tags[cat].contains(d), "{} not a tag of the track", d);
                prop_assert!(find_word(&view.text, d).is_some(), "{:?} missing from {:?}", d, view.text);
            }
            for d in &track.tags[cat] {
                if !ds.contains(d) {
                    prop_assert!(find_word(&view.text, d).is_none(), "dropped {:?} in {:?}", d, view.text);
                }
            }
        }

        let swapped = text_swap(view, vocab, &mut rng);
        let mut cats: Vec<Category> = swapped.swaps.iter().map(|s| s.category).collect();
        cats.extend(&swapped.skipped);
        cats.sort();
        prop_assert_eq!(cats, view.source_tags.keys().copied().collect::<Vec<_>>());

        let mut edits = Vec::new();
        for s in &swapped.swaps {
            prop_assert_ne!(&s.replacement, &s.original);
            prop_assert!(vocab.contains(s.category, &s.replacement));
            prop_assert!(view.source_tags[&s.category].contains(&s.original));
            let at = find_word(&view.text, &s.original);
            prop_assert!(at.is_some());
            edits.push((at.unwrap(), s.original.len(), s.replacement.as_str()));
        }
        // locality: the expected text is the view with only the swapped spans replaced
        edits.sort_by_key(|e| std::cmp::Reverse(e.0));
        let mut expected = view.text.clone();
        for (at, len, rep) in edits {
            expected.replace_range(at..at + len, rep);
        }
        prop_assert_eq!(&swapped.text, &expected);
    }
    Ok(())
}

fn augmentation_invariants() -> Outcome {
    let vocab = invariants_vocab();
    let grammar = Grammar::default();
    let config = PropConfig {
        cases: PROPTEST_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strategy = (tagset_strategy(&vocab), any::<u64>());
    let props = runner.run(&strategy, |(tags, seed)| check_invariants(tags, seed, &vocab, &grammar));

    let defaults = AugmentConfig::default();
    let p5 = swap_probability(5, &defaults);
    let p25 = swap_probability(25, &defaults);
    let schedule_ok = p5 == 0.0 && (p25 - 0.15).abs() < 1e-12;
    let props_ok = props.is_ok();
    let detail = match props {
        Ok(()) => format!("{PROPTEST_CASES} cases held"),
        Err(e) => format!("property failed: {e}"),
    };
    Outcome::new(
        props_ok && schedule_ok,
        format!("{detail}; swap_probability(5) = {p5}, swap_probability(25) = {p25}"),
    )
}

struct RunResult {
    r10: f64,
    elapsed: Duration,
}

/// Train on a 200/50/200 synthetic corpus and report caption-query test R@10.
fn learnability_run(seed: u64, aug: &AugmentConfig) -> ads_core::Result<RunResult> {
    let vocab = synthetic_vocabulary(8)?;
    let world = SyntheticWorld::new(&vocab, 32, 0.1, seed)?.with_shape(1, 4);
    let (tracks, audio) = generate_synthetic_corpus(450, &vocab, &world, 1..=2)?;
    let grammar = Grammar::default();
    let aug = AugmentConfig { seed, ..aug.clone() };
    let t0 = Instant::now();
    let tracks = augment_corpus(&tracks, &aug, &grammar, ExecMode::Sequential)?;
    let (train_set, rest) = tracks.split_at(200);
    let (val_set, test_set) = rest.split_at(50);
    let encoder = ToyTextEncoder::new(64, seed);
    let model = Model::init(
        ModelConfig {
            audio_dim: 32,
            d_model: 64,
            d_joint: 64,
            ..Default::default()
        },
        seed,
    )?;
    let cfg = TrainConfig {
        batch_size: 32,
        max_epochs: 40,
        seed,
        ..Default::default()
    };
    let data = TrainData {
        train: train_set,
        val: val_set,
        audio: &audio,
        vocab: &vocab,
        text_encoder: &encoder,
    };
    let out = train(model, &data, &cfg, &aug, ExecMode::Sequential)?;
    let eval = EvalConfig {
        query: QueryKind::Caption,
        ..Default::default()
    };
    let (m, _) = evaluate_dataset("test", &out.best, test_set, &audio, &encoder, &grammar, &eval, ExecMode::Sequential)?;
    Ok(RunResult {
        r10: m.recall_at(10).unwrap_or(f64::NAN),
        elapsed: t0.elapsed(),
    })
}

struct AblationRuns {
    captions: Vec<RunResult>,
    tags_only: Vec<RunResult>,
}

fn ablation_runs() -> ads_core::Result<AblationRuns> {
    let captions_cfg = AugmentConfig::default();
    let tags_cfg = AugmentConfig {
        p_cap: 0.0,
        view_dropout: false,
        ..Default::default()
    };
    let mut runs = AblationRuns {
        captions: Vec::new(),
        tags_only: Vec::new(),
    };
    for seed in ABLATION_SEEDS {
        runs.captions.push(learnability_run(seed, &captions_cfg)?);
        runs.tags_only.push(learnability_run(seed, &tags_cfg)?);
    }
    Ok(runs)
}

fn learnability(runs: &AblationRuns) -> Outcome {
    let run = &runs.captions[0];
    Outcome::new(
        run.r10 >= LEARN_R10 && run.elapsed < LEARN_BUDGET,
        format!(
            "test R@10 {:.3} (target >= {LEARN_R10}, chance 0.05), {:.1}s (budget {}s)",
            run.r10,
            run.elapsed.as_secs_f64(),
            LEARN_BUDGET.as_secs()
        ),
    )
}

fn ablation_direction(runs: &AblationRuns) -> Outcome {
    let mean = |rs: &[RunResult]| rs.iter().map(|r| r.r10).sum::<f64>() / rs.len() as f64;
    let fmt = |rs: &[RunResult]| rs.iter().map(|r| format!("{:.3}", r.r10)).collect::<Vec<_>>().join("/");
    let (with, without) = (mean(&runs.captions), mean(&runs.tags_only));
    Outcome::new(
        with >= without,
        format!(
            "mean test R@10 p_cap=0.5+dropout {with:.3} ({}) vs p_cap=0 {without:.3} ({}) over seeds {:?}",
            fmt(&runs.captions),
            fmt(&runs.tags_only),
            ABLATION_SEEDS
        ),
    )
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_default()
}

fn train_and_eval(root: &Path, name: &str, mode: ExecMode) -> ads_core::Result<[Vec<u8>; 3]> {
    let synth = run_synth(&SynthRequest {
        out_dir: root.join("data"),
        n: 120,
        ..Default::default()
    })?;
    let mut cfg = synth;
    cfg.out_dir = Some(root.join(name));
    cfg.train.max_epochs = 4;
    cfg.train.batch_size = 16;
    cfg.augment.swap_warmup_epochs = 1;
    cfg.augment.swap_ramp_epochs = 2;
    run_train(&cfg, mode, false)?;
    let out = root.join(name);
    let report = out.join("report.json");
    run_eval(
        &EvalRequest {
            ckpt: out.join("best.ckpt"),
            datasets: Vec::new(),
            vocab: None,
            split: SplitSelection::All,
            eval: EvalConfig {
                subset_size: 50,
                repeats: 5,
                ..Default::default()
            },
            out: report.clone(),
        },
        mode,
    )?;
    Ok([read(&out.join("log.jsonl")), read(&out.join("best.ckpt")), read(&report)])
}

fn determinism() -> Outcome {
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return Outcome::error(e),
    };
    let runs = ["seq-a", "seq-b", "par"].map(|name| {
        let mode = if name == "par" {
            ExecMode::Parallel
        } else {
            ExecMode::Sequential
        };
        train_and_eval(dir.path(), name, mode)
    });
    let [Ok(a), Ok(b), Ok(p)] = runs else {
        let e = runs.into_iter().find_map(Result::err).expect("one run failed");
        return Outcome::error(e);
    };
    let non_empty = a.iter().all(|f| !f.is_empty());
    let seq_same = a == b;
    let par_report_same = a[2] == p[2];
    let par_all_same = a == p;
    Outcome::new(
        non_empty && seq_same && par_report_same,
        format!(
            "sequential log/ckpt/report identical: {seq_same}; parallel report identical: {par_report_same} \
             (log and ckpt also identical: {par_all_same})"
        ),
    )
}

fn random_record(rng: &mut impl rand::Rng, i: usize) -> EmbeddingRecord {
    let (layers, frames, dim) = (rng.random_range(1..=3), rng.random_range(1..=5), rng.random_range(1..=8));
    let mut id = format!("track-{i}-");
    for _ in 0..rng.random_range(0..12) {
        id.push(rng.random_range('a'..='z'));
    }
    if rng.random_bool(0.2) {
        id.push_str("/é♪");
    }
    let values = (0..layers * frames * dim)
        .map(|_| f32::from_bits(rng.random::<u32>() & 0xbfff_ffff))
        .map(|v| if v.is_nan() { 0.5 } else { v })
        .collect();
    EmbeddingRecord::new(id, layers, frames, dim, values).expect("consistent shape")
}

fn random_params(rng: &mut impl rand::Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for i in 0..rng.random_range(1..=6) {
        let shape: Vec<usize> = (0..rng.random_range(0..=3)).map(|_| rng.random_range(1..=5)).collect();
        let n = shape.iter().product();
        let data = (0..n).map(|_| f64::from_bits(rng.random::<u64>() & 0xbfff_ffff_ffff_ffff)).collect();
        let mut name = format!("p{i}.");
        for _ in 0..rng.random_range(1..8) {
            name.push(rng.random_range('a'..='z'));
        }
        store.push(name, Tensor::new(shape, data).expect("shape matches")).unwrap();
    }
    store
}

fn round_trips() -> Outcome {
    let mut rng = rng_from_seed(8);
    let mut failures = String::new();
    for case in 0..ROUND_TRIPS {
        let records: Vec<EmbeddingRecord> = (0..rng.random_range(0..6)).map(|i| random_record(&mut rng, i)).collect();
        let mut first = Vec::new();
        write_mmeb(&mut first, records.iter()).unwrap();
        let back: ads_core::Result<Vec<EmbeddingRecord>> = match MmebReader::new(first.as_slice()) {
            Ok(r) => r.collect(),
            Err(e) => Err(e),
        };
        let mut second = Vec::new();
        if let Ok(back) = &back {
            write_mmeb(&mut second, back.iter()).unwrap();
        }
        if first != second {
            let _ = write!(failures, " mmeb#{case}");
        }

        let params = random_params(&mut rng);
        let mut first = Vec::new();
        write_checkpoint_to(&mut first, &params).unwrap();
        let mut second = Vec::new();
        if let Ok(back) = read_checkpoint_from(first.as_slice()) {
            write_checkpoint_to(&mut second, &back).unwrap();
        }
        if first != second {
            let _ = write!(failures, " ckpt#{case}");
        }
    }
    Outcome::new(
        failures.is_empty(),
        format!("{ROUND_TRIPS} random MMEB files and {ROUND_TRIPS} random checkpoints; byte mismatches:{}",
            if failures.is_empty() { " none" } else { &failures }),
    )
}

fn main() {
    let mut outcomes: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n} {:<24} {} {}", name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
        outcomes.push((n, name, o));
    };
    report(1, "gradient oracle", gradient_oracle());
    report(2, "loss analytics", loss_analytics());
    report(3, "metric oracle", metric_oracle());
    report(4, "augmentation invariants", augmentation_invariants());
    match ablation_runs() {
        Ok(runs) => {
            report(5, "learnability", learnability(&runs));
            report(6, "ablation direction", ablation_direction(&runs));
        }
        Err(e) => {
            report(5, "learnability", Outcome::error(&e));
            report(6, "ablation direction", Outcome::error(&e));
        }
    }
    report(7, "determinism", determinism());
    report(8, "format round-trips", round_trips());

    let failed: Vec<usize> = outcomes.iter().filter(|(_, _, o)| !o.passed).map(|(n, _, _)| *n).collect();
    println!("acceptance: {}/{} passed", outcomes.len() - failed.len(), outcomes.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

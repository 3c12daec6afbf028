use std::collections::HashMap;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{adamw_step, apply_hard_negatives, info_nce, info_nce_split, lr_at, EarlyStopping, OptimizerState, TrainConfig};
use crate::corpus::{TagVocabulary, Track};
use crate::encoders::{EmbeddingRecord, TextEncoder};
use crate::model::{similarity_matrix, JointEmbedding, Model};
use crate::par::{self, ExecMode};
use crate::rng::SeedPath;
use crate::tensor::{Graph, Tensor, Var};
use crate::textaug::{build_batch_hard_negatives, sample_text_input, swap_probability, AugmentConfig};
use crate::{Error, Result};

/// Everything the loop reads but never modifies.
pub struct TrainData<'a> {
    pub train: &'a [Track],
    pub val: &'a [Track],
    pub audio: &'a IndexMap<String, EmbeddingRecord>,
    pub vocab: &'a TagVocabulary,
    pub text_encoder: &'a dyn TextEncoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub swap_prob: f64,
    pub hard_negatives: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub best: Model,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
}

pub fn train(model: Model, data: &TrainData<'_>, cfg: &TrainConfig, aug: &AugmentConfig, mode: ExecMode) -> Result<TrainOutcome> {
    train_with(model, data, cfg, aug, mode, &|_, l| l, &mut |_, _| Ok(()))
}

/// [`train`] with two hooks: `val_override` may replace each epoch's
/// validation loss before early stopping sees it, and `on_epoch` receives
/// every log line plus the model whenever it becomes the new best.
pub fn train_with(
    mut model: Model,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    mode: ExecMode,
    val_override: &dyn Fn(usize, f64) -> f64,
    on_epoch: &mut dyn FnMut(&EpochLog, Option<&Model>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    aug.validate()
        .map_err(|(field, msg)| Error::config(format!("augment.{field}"), msg))?;
    check_inputs(data, aug)?;
    if data.val.len() < 2 {
        return Err(Error::InvalidArgument("validation set needs at least 2 tracks".into()));
    }
    let steps_per_epoch = batch_bounds(data.train.len(), cfg.batch_size).len();
    if steps_per_epoch == 0 {
        return Err(Error::InvalidArgument("training set needs at least 2 tracks".into()));
    }
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let warmup_steps = steps_per_epoch * cfg.warmup_epochs;

    let mut state = OptimizerState::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best: Option<(Model, usize, f64)> = None;
    let mut log = Vec::new();
    let mut stopped_early = false;
    let seeds = SeedPath::new(cfg.seed);

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut seeds.label("shuffle").index(epoch as u64).rng());
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        let mut hard_negatives = 0;
        let bounds = batch_bounds(order.len(), cfg.batch_size);
        for (b, range) in bounds.iter().enumerate() {
            let batch: Vec<&Track> = order[range.clone()].iter().map(|&i| &data.train[i]).collect();
            let step_seed = seeds.label("step").index(epoch as u64).index(b as u64);
            let (loss, grads, n_hard) = batch_step(&model, &batch, data, cfg, aug, epoch, &step_seed, mode)?;
            lr = lr_at(state.step as usize + 1, total_steps, warmup_steps, cfg.peak_lr);
            adamw_step(&mut model.params, &grads, &mut state, lr, cfg.weight_decay, cfg.adam())?;
            loss_sum += loss;
            hard_negatives += n_hard;
        }
        let train_loss = loss_sum / bounds.len() as f64;
        let val_loss = val_override(epoch, validation_loss(&model, data, cfg, aug, mode)?);
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss is {val_loss} at epoch {epoch}")));
        }
        let entry = EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr,
            swap_prob: swap_probability(epoch, aug),
            hard_negatives,
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4} val {val_loss:.4} lr {lr:.2e} swap {:.3}",
            entry.swap_prob
        );
        let decision = stopper.observe(epoch, val_loss);
        if decision.improved {
            best = Some((model.clone(), epoch, val_loss));
        }
        on_epoch(&entry, decision.improved.then_some(&model))?;
        log.push(entry);
        if decision.stop {
            log::info!("early stop at epoch {epoch}");
            stopped_early = true;
            break;
        }
    }
    let (best, best_epoch, best_val_loss) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_loss,
        log,
        stopped_early,
    })
}

/// Contiguous batches of `size`; a trailing batch of one is dropped since
/// it carries no negatives.
fn batch_bounds(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    (0..n)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(n))
        .filter(|r| r.len() >= 2)
        .collect()
}

fn check_inputs(data: &TrainData<'_>, aug: &AugmentConfig) -> Result<()> {
    for t in data.train.iter().chain(data.val) {
        if !data.audio.contains_key(&t.id) {
            return Err(Error::MissingEmbedding(format!("no audio embedding for track '{}'", t.id)));
        }
        if aug.p_cap > 0.0 && t.caption_views.as_ref().is_none_or(Vec::is_empty) {
            return Err(Error::InvalidTrack {
                id: t.id.clone(),
                message: "p_cap > 0 but the track has no caption views".into(),
            });
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn batch_step(
    model: &Model,
    batch: &[&Track],
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    epoch: usize,
    seeds: &SeedPath,
    mode: ExecMode,
) -> Result<(f64, Vec<Tensor>, usize)> {
    let mut text_rng = seeds.label("text").rng();
    let samples = batch
        .iter()
        .map(|t| sample_text_input(t, aug.p_cap, &mut text_rng))
        .collect::<Result<Vec<_>>>()?;
    let plan = if swap_probability(epoch, aug) > 0.0 {
        let views: Vec<_> = samples.iter().zip(batch).map(|(s, t)| s.to_view(t)).collect();
        build_batch_hard_negatives(&views, epoch, aug, data.vocab, &mut seeds.label("swap").rng())
    } else {
        vec![Vec::new(); batch.len()]
    };

    let mut texts: Vec<&str> = samples.iter().map(|s| s.text()).collect();
    for row in &plan {
        texts.extend(row.iter().map(|h| h.swap.text.as_str()));
    }
    let encoded = encode_unique(data.text_encoder, &texts, mode)?;

    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let mut audio_rows = Vec::with_capacity(batch.len());
    let mut text_rows = Vec::with_capacity(batch.len());
    for (t, s) in batch.iter().zip(&samples) {
        audio_rows.push(bound.project_audio(&mut g, &data.audio[&t.id])?);
        text_rows.push(bound.project_text(&mut g, &encoded[s.text()])?);
    }
    let audio = g.concat(&audio_rows, 0)?;
    let text = g.concat(&text_rows, 0)?;

    let mut projected: HashMap<&str, Var> = HashMap::new();
    let mut var_plan: Vec<Vec<(usize, Var)>> = Vec::with_capacity(plan.len());
    let mut n_hard = 0;
    for row in &plan {
        let mut vrow = Vec::with_capacity(row.len());
        for h in row {
            let key = h.swap.text.as_str();
            let v = match projected.get(key) {
                Some(&v) => v,
                None => {
                    let v = bound.project_text(&mut g, &encoded[key])?;
                    projected.insert(key, v);
                    v
                }
            };
            vrow.push((h.slot, v));
            n_hard += 1;
        }
        var_plan.push(vrow);
    }
    let rows = apply_hard_negatives(&mut g, audio, text, &var_plan)?;
    let cols = if cfg.hard_negatives_both_directions {
        rows
    } else {
        let tt = g.transpose(text)?;
        g.matmul(audio, tt)?
    };
    let loss = info_nce_split(&mut g, rows, cols, cfg.temperature)?;
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Numerical(format!("training loss is {loss_value} at epoch {epoch}")));
    }
    let grads = g.backward(loss)?;
    let grads = bound
        .vars()
        .iter()
        .zip(model.params.tensors())
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((loss_value, grads, n_hard))
}

fn encode_unique<'t>(encoder: &dyn TextEncoder, texts: &[&'t str], mode: ExecMode) -> Result<HashMap<&'t str, Tensor>> {
    let mut unique: Vec<&str> = texts.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let encoded = par::try_map(mode, &unique, |t| encoder.encode(t))?;
    Ok(unique.into_iter().zip(encoded).collect())
}

/// Inference embeddings for a list of texts.
pub fn embed_texts(model: &Model, encoder: &dyn TextEncoder, texts: &[String], mode: ExecMode) -> Result<Vec<JointEmbedding>> {
    par::try_map(mode, texts, |t| model.embed_text(&encoder.encode(t)?))
}

/// Mean symmetric InfoNCE over fixed, unshuffled validation batches with no
/// hard negatives. Text inputs are sampled once per track from a seed that
/// does not depend on the epoch.
pub fn validation_loss(model: &Model, data: &TrainData<'_>, cfg: &TrainConfig, aug: &AugmentConfig, mode: ExecMode) -> Result<f64> {
    let seeds = SeedPath::new(cfg.seed).label("val");
    let texts = data
        .val
        .iter()
        .map(|t| Ok(sample_text_input(t, aug.p_cap, &mut seeds.label(&t.id).rng())?.text().to_string()))
        .collect::<Result<Vec<_>>>()?;
    let audio = par::try_map(mode, data.val, |t| {
        let rec = data
            .audio
            .get(&t.id)
            .ok_or_else(|| Error::MissingEmbedding(format!("no audio embedding for track '{}'", t.id)))?;
        model.embed_audio(rec)
    })?;
    let text = embed_texts(model, data.text_encoder, &texts, mode)?;
    let bounds = batch_bounds(data.val.len(), cfg.batch_size);
    let mut total = 0.0;
    for r in &bounds {
        let s = similarity_matrix(&audio[r.clone()], &text[r.clone()])?;
        total += info_nce(&s.to_tensor(), cfg.temperature)?;
    }
    Ok(total / bounds.len() as f64)
}

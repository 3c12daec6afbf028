use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{locate_spans, AugmentConfig, CaptionView, HardNegativeSource};
use crate::corpus::{Category, TagVocabulary};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Swap {
    pub category: Category,
    pub original: String,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapResult {
    pub text: String,
    pub swaps: Vec<Swap>,
    /// Categories present in the view where no swap was possible.
    pub skipped: Vec<Category>,
}

/// Replace one rendered descriptor per category with a different
/// descriptor from the vocabulary. Only the replaced spans change.
pub fn text_swap(view: &CaptionView, vocab: &TagVocabulary, rng: &mut Rng) -> SwapResult {
    let flat: Vec<&str> = view.source_tags.values().flatten().map(String::as_str).collect();
    let spans = locate_spans(&view.text, &flat);

    let mut edits = Vec::new();
    let mut swaps = Vec::new();
    let mut skipped = Vec::new();
    let mut offset = 0;
    for (cat, descs) in &view.source_tags {
        let cat_spans = &spans[offset..offset + descs.len()];
        offset += descs.len();
        let dict = vocab.descriptors(*cat);
        if descs.is_empty() || dict.len() < 2 {
            log::warn!("text swap: category '{cat}' skipped (vocabulary has {} descriptors)", dict.len());
            skipped.push(*cat);
            continue;
        }
        let pick = rng.random_range(0..descs.len());
        let original = &descs[pick];
        let Some(span) = cat_spans[pick].clone() else {
            log::warn!("text swap: descriptor '{original}' not found in caption");
            skipped.push(*cat);
            continue;
        };
        let candidates: Vec<&String> = dict.iter().filter(|d| *d != original).collect();
        if candidates.is_empty() {
            skipped.push(*cat);
            continue;
        }
        let replacement = candidates[rng.random_range(0..candidates.len())].clone();
        edits.push((span, replacement.clone()));
        swaps.push(Swap {
            category: *cat,
            original: original.clone(),
            replacement,
        });
    }

    edits.sort_by_key(|(span, _)| std::cmp::Reverse(span.start));
    let mut text = view.text.clone();
    for (span, replacement) in edits {
        text.replace_range(span, &replacement);
    }
    SwapResult { text, swaps, skipped }
}

/// Probability of turning a negative slot into a hard negative after
/// `epoch` completed epochs: zero during warmup, then a linear ramp to
/// `swap_max_prob`.
pub fn swap_probability(epoch: usize, cfg: &AugmentConfig) -> f64 {
    if epoch < cfg.swap_warmup_epochs {
        return 0.0;
    }
    if cfg.swap_ramp_epochs == 0 {
        return cfg.swap_max_prob;
    }
    let progress = (epoch - cfg.swap_warmup_epochs) as f64 / cfg.swap_ramp_epochs as f64;
    cfg.swap_max_prob * progress.min(1.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HardNegative {
    /// Column of the anchor's similarity row that this negative replaces.
    pub slot: usize,
    pub swap: SwapResult,
}

/// Per-anchor hard-negative plan for one batch. Each off-diagonal slot is
/// selected independently with `swap_probability(epoch)`; a selected slot
/// gets an independent swap of the anchor's view (or of the slot's own view,
/// depending on `cfg.hard_negative_source`). Swaps that changed nothing are
/// dropped.
pub fn build_batch_hard_negatives(
    views: &[CaptionView],
    epoch: usize,
    cfg: &AugmentConfig,
    vocab: &TagVocabulary,
    rng: &mut Rng,
) -> Vec<Vec<HardNegative>> {
    let n = views.len();
    let p = swap_probability(epoch, cfg);
    let mut plan = vec![Vec::new(); n];
    if p <= 0.0 || n < 2 {
        return plan;
    }
    for (i, row) in plan.iter_mut().enumerate() {
        for j in (0..n).filter(|&j| j != i) {
            if !rng.random_bool(p.min(1.0)) {
                continue;
            }
            let source = match cfg.hard_negative_source {
                HardNegativeSource::Anchor => &views[i],
                HardNegativeSource::Negative => &views[j],
            };
            let swap = text_swap(source, vocab, rng);
            if !swap.swaps.is_empty() {
                row.push(HardNegative { slot: j, swap });
            }
        }
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TagSet;
    use crate::rng::rng_from_seed;
    use std::collections::BTreeMap;

    fn vocab() -> TagVocabulary {
        let mut raw = BTreeMap::new();
        raw.insert(Category::Genre, vec!["pop".into(), "hip-hop".into(), "rock".into(), "jazz".into()]);
        raw.insert(Category::Mood, vec!["mellow".into(), "dark".into(), "happy".into()]);
        raw.insert(Category::Instrument, vec!["guitar".into(), "piano".into()]);
        TagVocabulary::new(raw).unwrap()
    }

    fn view(text: &str, entries: &[(Category, &[&str])]) -> CaptionView {
        let source_tags: TagSet = entries
            .iter()
            .map(|(c, ds)| (*c, ds.iter().map(|s| s.to_string()).collect()))
            .collect();
        CaptionView {
            text: text.into(),
            source_tags,
            view_index: 0,
        }
    }

    #[test]
    fn genre_only_swap_to_hip_hop() {
        let mut only_hiphop = BTreeMap::new();
        only_hiphop.insert(Category::Genre, vec!["pop".into(), "hip-hop".into()]);
        let v = TagVocabulary::new(only_hiphop).unwrap();
        let r = text_swap(&view("A mellow pop track.", &[(Category::Genre, &["pop"])]), &v, &mut rng_from_seed(0));
        assert_eq!(r.text, "A mellow hip-hop track.");
        assert_eq!(
            r.swaps,
            vec![Swap {
                category: Category::Genre,
                original: "pop".into(),
                replacement: "hip-hop".into()
            }]
        );
    }

    #[test]
    fn one_swap_per_category() {
        let v = view(
            "An energetic rock track featuring guitar.",
            &[(Category::Genre, &["rock"]), (Category::Mood, &["mellow"]), (Category::Instrument, &["guitar"])],
        );
        // "mellow" is not in the text, so mood is skipped
        let r = text_swap(&v, &vocab(), &mut rng_from_seed(1));
        assert_eq!(r.swaps.len(), 2);
        assert_eq!(r.skipped, vec![Category::Mood]);

        let v = view(
            "A mellow rock track featuring guitar.",
            &[(Category::Genre, &["rock"]), (Category::Mood, &["mellow"]), (Category::Instrument, &["guitar"])],
        );
        for seed in 0..50 {
            let r = text_swap(&v, &vocab(), &mut rng_from_seed(seed));
            assert_eq!(r.swaps.len(), 3);
            let cats: Vec<_> = r.swaps.iter().map(|s| s.category).collect();
            assert_eq!(cats, Category::ALL);
            for s in &r.swaps {
                assert_ne!(s.original, s.replacement);
                assert!(vocab().contains(s.category, &s.replacement));
            }
        }
    }

    #[test]
    fn small_vocabulary_category_is_skipped() {
        let mut raw = BTreeMap::new();
        raw.insert(Category::Genre, vec!["pop".into()]);
        raw.insert(Category::Mood, vec!["mellow".into(), "dark".into()]);
        let v = TagVocabulary::new(raw).unwrap();
        let r = text_swap(
            &view("A mellow pop track.", &[(Category::Genre, &["pop"]), (Category::Mood, &["mellow"])]),
            &v,
            &mut rng_from_seed(0),
        );
        assert_eq!(r.text, "A dark pop track.");
        assert_eq!(r.skipped, vec![Category::Genre]);
    }

    #[test]
    fn schedule_points() {
        let cfg = AugmentConfig::default();
        assert_eq!(swap_probability(0, &cfg), 0.0);
        assert_eq!(swap_probability(4, &cfg), 0.0);
        assert_eq!(swap_probability(5, &cfg), 0.0);
        assert!((swap_probability(15, &cfg) - 0.075).abs() < 1e-15);
        assert!((swap_probability(25, &cfg) - 0.15).abs() < 1e-15);
        assert!((swap_probability(100, &cfg) - 0.15).abs() < 1e-15);
        let mut prev = 0.0;
        for e in 0..200 {
            let p = swap_probability(e, &cfg);
            assert!(p >= prev);
            prev = p;
        }
    }

    fn batch(n: usize) -> Vec<CaptionView> {
        (0..n)
            .map(|_| view("A mellow pop track.", &[(Category::Genre, &["pop"]), (Category::Mood, &["mellow"])]))
            .collect()
    }

    #[test]
    fn plan_boundaries() {
        let zero = AugmentConfig {
            swap_max_prob: 0.0,
            ..Default::default()
        };
        let plan = build_batch_hard_negatives(&batch(4), 50, &zero, &vocab(), &mut rng_from_seed(0));
        assert!(plan.iter().all(Vec::is_empty));
        let plan = build_batch_hard_negatives(&batch(4), 2, &AugmentConfig::default(), &vocab(), &mut rng_from_seed(0));
        assert!(plan.iter().all(Vec::is_empty));

        let one = AugmentConfig {
            swap_max_prob: 1.0,
            ..Default::default()
        };
        let plan = build_batch_hard_negatives(&batch(4), 50, &one, &vocab(), &mut rng_from_seed(0));
        for (i, row) in plan.iter().enumerate() {
            assert_eq!(row.len(), 3);
            assert!(row.iter().all(|h| h.slot != i));
            assert!(row.iter().all(|h| h.swap.text != "A mellow pop track."));
        }
    }

    #[test]
    fn plan_rate_matches_binomial() {
        let cfg = AugmentConfig::default();
        let n = 128;
        let views = batch(n);
        let mut rng = rng_from_seed(11);
        let batches = 20;
        let mut total = 0usize;
        for _ in 0..batches {
            let plan = build_batch_hard_negatives(&views, 30, &cfg, &vocab(), &mut rng);
            total += plan.iter().map(Vec::len).sum::<usize>();
        }
        let rows = (batches * n) as f64;
        let mean = total as f64 / rows;
        let p: f64 = 0.15;
        let expected = p * 127.0;
        // standard error of the per-row mean
        let se = (127.0 * p * (1.0 - p) / rows).sqrt();
        assert!((mean - expected).abs() <= 3.0 * se, "mean {mean} expected {expected} se {se}");
    }
}

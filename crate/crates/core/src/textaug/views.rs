use rand::seq::IndexedRandom;
use rand::Rng as _;

use super::{tag_to_caption, AugmentConfig, CaptionView, Grammar};
use crate::corpus::{TagSet, Track};
use crate::par::{self, ExecMode};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::{Error, Result};

/// Uniformly random non-empty subset of `items`, order preserved.
fn nonempty_subset(items: &[String], rng: &mut Rng) -> Vec<String> {
    let n = items.len();
    if n < 64 {
        // uniform over the 2^n - 1 non-empty masks
        let mask: u64 = rng.random_range(1..(1u64 << n));
        return items
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, s)| s.clone())
            .collect();
    }
    loop {
        let pick: Vec<String> = items.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
        if !pick.is_empty() {
            return pick;
        }
    }
}

/// Up to `k` category-balanced partial captions for a track.
///
/// Each draw keeps a uniformly random non-empty subset of every non-empty
/// category, so every view mentions every category the track has. Identical
/// caption texts are kept once.
pub fn generate_views(track: &Track, k: usize, grammar: &Grammar, rng: &mut Rng) -> Result<Vec<CaptionView>> {
    if track.tag_count() == 0 {
        return Err(Error::InvalidTrack {
            id: track.id.clone(),
            message: "track has no tags".into(),
        });
    }
    let mut views: Vec<CaptionView> = Vec::with_capacity(k);
    for _ in 0..k {
        let subset: TagSet = track
            .tags
            .iter()
            .map(|(c, ds)| (*c, nonempty_subset(ds, rng)))
            .collect();
        let text = tag_to_caption(&subset, grammar, rng)?;
        if views.iter().any(|v| v.text == text) {
            continue;
        }
        let view_index = views.len();
        views.push(CaptionView {
            text,
            source_tags: subset,
            view_index,
        });
    }
    Ok(views)
}

/// A single caption rendered from every tag of the track.
pub fn full_caption_view(track: &Track, grammar: &Grammar, rng: &mut Rng) -> Result<CaptionView> {
    Ok(CaptionView {
        text: tag_to_caption(&track.tags, grammar, rng)?,
        source_tags: track.tags.clone(),
        view_index: 0,
    })
}

/// The text fed to the model for one training pair.
#[derive(Debug, Clone, PartialEq)]
pub enum TextSample<'a> {
    Tags(String),
    Caption(&'a CaptionView),
}

impl TextSample<'_> {
    pub fn text(&self) -> &str {
        match self {
            TextSample::Tags(s) => s,
            TextSample::Caption(v) => &v.text,
        }
    }

    pub fn is_caption(&self) -> bool {
        matches!(self, TextSample::Caption(_))
    }

    /// The sample as a caption view; the tag string is treated as a view
    /// covering every tag, so it can be swapped like any caption.
    pub fn to_view(&self, track: &Track) -> CaptionView {
        match self {
            TextSample::Tags(s) => CaptionView {
                text: s.clone(),
                source_tags: track.tags.clone(),
                view_index: 0,
            },
            TextSample::Caption(v) => (*v).clone(),
        }
    }
}

/// With probability `p_cap` a uniformly chosen caption view, otherwise the
/// comma-joined tag string.
pub fn sample_text_input<'a>(track: &'a Track, p_cap: f64, rng: &mut Rng) -> Result<TextSample<'a>> {
    let views = track.caption_views.as_deref().unwrap_or(&[]);
    if p_cap > 0.0 && views.is_empty() {
        return Err(Error::InvalidTrack {
            id: track.id.clone(),
            message: "p_cap > 0 but the track has no caption views".into(),
        });
    }
    if p_cap > 0.0 && rng.random_bool(p_cap.min(1.0)) {
        let v = views.choose(rng).expect("views checked non-empty");
        return Ok(TextSample::Caption(v));
    }
    Ok(TextSample::Tags(track.tag_string()))
}

/// Attach caption views to every track. Each track's rng is derived from
/// `(cfg.seed, track.id)`, so the result does not depend on `mode`.
pub fn augment_corpus(tracks: &[Track], cfg: &AugmentConfig, grammar: &Grammar, mode: ExecMode) -> Result<Vec<Track>> {
    par::try_map(mode, tracks, |t| {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "views", &t.id));
        let views = if cfg.view_dropout {
            generate_views(t, cfg.k_views, grammar, &mut rng)?
        } else {
            vec![full_caption_view(t, grammar, &mut rng)?]
        };
        Ok(Track {
            caption_views: Some(views),
            ..t.clone()
        })
    })
}

//! Augment, drop and swap: tag-to-caption rendering, augmented view
//! dropout, tag/caption mixing, and swap-based hard negatives with a linear
//! curriculum.

mod grammar;
mod swap;
mod views;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{Category, TagSet};

pub use grammar::{tag_to_caption, Grammar, Template, DEFAULT_TEMPLATE};
pub use swap::{
    build_batch_hard_negatives, swap_probability, text_swap, HardNegative, Swap, SwapResult,
};
pub use views::{
    augment_corpus, full_caption_view, generate_views, sample_text_input, TextSample,
};

/// One synthesized caption plus the tags it was rendered from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionView {
    pub text: String,
    pub source_tags: TagSet,
    pub view_index: usize,
}

impl CaptionView {
    /// Rebuild provenance for an existing caption by locating the track's
    /// descriptors in it.
    pub fn recover(text: String, track_tags: &TagSet, view_index: usize) -> CaptionView {
        let flat: Vec<(Category, &str)> = track_tags
            .iter()
            .flat_map(|(c, ds)| ds.iter().map(move |d| (*c, d.as_str())))
            .collect();
        let needles: Vec<&str> = flat.iter().map(|(_, d)| *d).collect();
        let spans = locate_spans(&text, &needles);
        let mut source_tags = TagSet::new();
        for ((cat, d), span) in flat.iter().zip(spans) {
            if span.is_some() {
                source_tags.entry(*cat).or_default().push(d.to_string());
            }
        }
        CaptionView {
            text,
            source_tags,
            view_index,
        }
    }
}

/// Where the hard negatives for an anchor come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardNegativeSource {
    /// Perturb the anchor's own caption; the result replaces a negative slot
    /// in that anchor's row only.
    #[default]
    Anchor,
    /// Perturb the caption already sitting in the negative slot.
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub k_views: usize,
    pub p_cap: f64,
    /// When false, a track has one caption rendered from all of its tags.
    pub view_dropout: bool,
    pub swap_max_prob: f64,
    pub swap_warmup_epochs: usize,
    pub swap_ramp_epochs: usize,
    pub hard_negative_source: HardNegativeSource,
    /// `"default"` or a path to a grammar JSON file.
    pub grammar: String,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            k_views: 10,
            p_cap: 0.5,
            view_dropout: true,
            swap_max_prob: 0.15,
            swap_warmup_epochs: 5,
            swap_ramp_epochs: 20,
            hard_negative_source: HardNegativeSource::Anchor,
            grammar: "default".into(),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err((name.to_string(), format!("must be in [0, 1], got {p}")))
            }
        };
        prob("p_cap", self.p_cap)?;
        prob("swap_max_prob", self.swap_max_prob)?;
        if self.k_views == 0 && self.p_cap > 0.0 {
            return Err(("k_views".into(), "must be >= 1 when p_cap > 0".into()));
        }
        Ok(())
    }
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b >= 0x80
}

/// Byte spans of token-bounded, case-insensitive (ASCII) occurrences of each
/// needle. Longer needles claim spans first so that "rock" never matches
/// inside an already-claimed "rock and roll". Returns the first free
/// occurrence per needle.
pub fn locate_spans(text: &str, needles: &[&str]) -> Vec<Option<Range<usize>>> {
    let hay = text.to_ascii_lowercase();
    let bytes = hay.as_bytes();
    let mut order: Vec<usize> = (0..needles.len()).collect();
    order.sort_by(|&a, &b| needles[b].len().cmp(&needles[a].len()).then(a.cmp(&b)));
    let mut claimed: Vec<Range<usize>> = Vec::new();
    let mut out = vec![None; needles.len()];
    for i in order {
        let needle = needles[i].to_ascii_lowercase();
        if needle.is_empty() {
            continue;
        }
        let mut from = 0;
        while let Some(pos) = hay[from..].find(&needle) {
            let start = from + pos;
            let end = start + needle.len();
            let left_ok = start == 0 || !is_word_byte(bytes[start - 1]);
            let right_ok = end == bytes.len() || !is_word_byte(bytes[end]);
            let free = claimed.iter().all(|r| end <= r.start || start >= r.end);
            if left_ok && right_ok && free {
                claimed.push(start..end);
                out[i] = Some(start..end);
                break;
            }
            from = start + 1;
            while !hay.is_char_boundary(from) {
                from += 1;
            }
        }
    }
    out
}

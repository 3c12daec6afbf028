//! Tagged music corpus: tracks, the swap vocabulary, splits, and a
//! synthetic corpus generator.

mod io;
mod split;
mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::textaug::CaptionView;
use crate::{Error, Result};

pub use io::{load_corpus, load_vocabulary, parse_corpus, write_corpus, write_vocabulary};
pub use split::{split_corpus, CorpusSplit};
pub use synth::{generate_synthetic_corpus, synthetic_vocabulary, SyntheticWorld};

/// Tag category. The derived ordering (genre, mood, instrument) is the
/// canonical rendering order everywhere in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Genre,
    Mood,
    Instrument,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Genre, Category::Mood, Category::Instrument];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Genre => "genre",
            Category::Mood => "mood",
            Category::Instrument => "instrument",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        match s {
            "genre" => Some(Category::Genre),
            "mood" => Some(Category::Mood),
            "instrument" => Some(Category::Instrument),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Descriptors per category, in file order. Absent categories are absent
/// keys, never empty lists.
pub type TagSet = BTreeMap<Category, Vec<String>>;

/// Lowercase, trim, and collapse internal whitespace to single spaces.
pub fn normalize_descriptor(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: String,
    pub tags: TagSet,
    pub caption_views: Option<Vec<CaptionView>>,
}

impl Track {
    pub fn new(id: impl Into<String>, tags: TagSet) -> Result<Track> {
        let track = Track {
            id: id.into(),
            tags,
            caption_views: None,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| Error::InvalidTrack {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        for (cat, descs) in &self.tags {
            if descs.is_empty() {
                return Err(bad(&format!("category '{cat}' maps to an empty list")));
            }
            for d in descs {
                if d.is_empty() || *d != normalize_descriptor(d) {
                    return Err(bad(&format!("descriptor '{d}' is not normalized")));
                }
            }
        }
        Ok(())
    }

    pub fn tag_count(&self) -> usize {
        self.tags.values().map(Vec::len).sum()
    }

    /// Descriptors comma-joined in category order (genre, mood, instrument).
    pub fn tag_string(&self) -> String {
        self.tags
            .values()
            .flatten()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// The swap dictionary: a sorted descriptor set per category.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TagVocabulary {
    categories: BTreeMap<Category, Vec<String>>,
}

impl TagVocabulary {
    /// Build from raw descriptor lists. Descriptors are normalized and sorted;
    /// a descriptor may appear in only one category.
    pub fn new(raw: BTreeMap<Category, Vec<String>>) -> Result<TagVocabulary> {
        let mut seen: HashSet<String> = HashSet::new();
        let mut categories = BTreeMap::new();
        for (cat, descs) in raw {
            let mut list: Vec<String> = Vec::with_capacity(descs.len());
            for d in descs {
                let n = normalize_descriptor(&d);
                if n.is_empty() {
                    return Err(Error::Vocabulary(format!("empty descriptor in '{cat}'")));
                }
                if !seen.insert(n.clone()) {
                    return Err(Error::Vocabulary(format!(
                        "descriptor '{n}' appears more than once"
                    )));
                }
                list.push(n);
            }
            list.sort();
            if list.len() < 2 {
                log::warn!("vocabulary category '{cat}' has fewer than 2 descriptors; swaps in it are impossible");
            }
            categories.insert(cat, list);
        }
        Ok(TagVocabulary { categories })
    }

    pub fn descriptors(&self, cat: Category) -> &[String] {
        self.categories.get(&cat).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn contains(&self, cat: Category, descriptor: &str) -> bool {
        self.descriptors(cat)
            .binary_search_by(|d| d.as_str().cmp(descriptor))
            .is_ok()
    }

    pub fn category_of(&self, descriptor: &str) -> Option<Category> {
        Category::ALL
            .into_iter()
            .find(|&c| self.contains(c, descriptor))
    }

    pub fn categories(&self) -> impl Iterator<Item = (Category, &[String])> {
        self.categories.iter().map(|(c, v)| (*c, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.categories.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize_descriptor, Category, TagSet, TagVocabulary, Track};
use crate::textaug::CaptionView;
use crate::{Error, Result};

#[derive(Debug, Deserialize)]
struct TrackRecordIn {
    id: String,
    #[serde(default)]
    tags: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    captions: Option<Vec<String>>,
}

#[derive(Debug, Serialize)]
struct TrackRecordOut<'a> {
    id: &'a str,
    tags: &'a TagSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    captions: Option<Vec<&'a str>>,
}

/// Parse Track JSONL from a reader. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_corpus<R: BufRead>(reader: R, vocab: &TagVocabulary) -> Result<Vec<Track>> {
    let mut tracks = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrackRecordIn = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let track = record_to_track(rec, vocab, line_no)?;
        if !ids.insert(track.id.clone()) {
            return Err(Error::Parse {
                line: line_no,
                message: Error::DuplicateId(track.id).to_string(),
            });
        }
        tracks.push(track);
    }
    Ok(tracks)
}

fn record_to_track(rec: TrackRecordIn, vocab: &TagVocabulary, line: usize) -> Result<Track> {
    let parse_err = |message: String| Error::Parse { line, message };
    if rec.id.is_empty() {
        return Err(parse_err("empty id".into()));
    }
    let mut tags = TagSet::new();
    for (key, descs) in rec.tags {
        let cat = Category::parse(&key)
            .ok_or_else(|| parse_err(format!("unknown tag category '{key}'")))?;
        if descs.is_empty() {
            return Err(parse_err(format!("category '{key}' has an empty tag list")));
        }
        let mut list = Vec::with_capacity(descs.len());
        for d in descs {
            let n = normalize_descriptor(&d);
            if n.is_empty() {
                return Err(parse_err(format!("empty descriptor in category '{key}'")));
            }
            if !vocab.contains(cat, &n) {
                return Err(Error::UnknownDescriptor {
                    descriptor: n,
                    category: cat.to_string(),
                    line,
                });
            }
            list.push(n);
        }
        tags.insert(cat, list);
    }
    let caption_views = rec.captions.map(|caps| {
        caps.into_iter()
            .enumerate()
            .map(|(i, text)| CaptionView::recover(text, &tags, i))
            .collect()
    });
    Ok(Track {
        id: rec.id,
        tags,
        caption_views,
    })
}

pub fn load_corpus(path: impl AsRef<Path>, vocab: &TagVocabulary) -> Result<Vec<Track>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(BufReader::new(file), vocab)
}

pub fn write_corpus(path: impl AsRef<Path>, tracks: &[Track]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for t in tracks {
        let rec = TrackRecordOut {
            id: &t.id,
            tags: &t.tags,
            captions: t
                .caption_views
                .as_ref()
                .map(|vs| vs.iter().map(|v| v.text.as_str()).collect()),
        };
        let line = serde_json::to_string(&rec).expect("track record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_vocabulary(path: impl AsRef<Path>) -> Result<TagVocabulary> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
        .map_err(|e| Error::Vocabulary(format!("{}: {e}", path.display())))?;
    let mut cats = BTreeMap::new();
    for (k, v) in raw {
        let cat = Category::parse(&k)
            .ok_or_else(|| Error::Vocabulary(format!("unknown category '{k}'")))?;
        cats.insert(cat, v);
    }
    TagVocabulary::new(cats)
}

pub fn write_vocabulary(path: impl AsRef<Path>, vocab: &TagVocabulary) -> Result<()> {
    let path = path.as_ref();
    let map: BTreeMap<&str, &[String]> = vocab.categories().map(|(c, d)| (c.as_str(), d)).collect();
    let text = serde_json::to_string_pretty(&map).expect("vocabulary serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

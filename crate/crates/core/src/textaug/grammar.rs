use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Category, TagSet};
use crate::rng::Rng;
use crate::{Error, Result};

/// Default surface template. `{n}` becomes "n" before a vowel letter, and a
/// brace group that does not start with a slot name is optional: it is
/// dropped when any slot inside it is empty.
pub const DEFAULT_TEMPLATE: &str = "A{n} {mood} {genre} track{ featuring {instruments}}.";

const ARTICLE_MARK: char = '\u{1}';

#[derive(Debug, Clone, PartialEq, Eq)]
enum Slot {
    Article,
    Genre,
    Mood,
    Instruments,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(Slot),
    Optional(Vec<Piece>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct GrammarFile {
    version: u32,
    templates: Vec<TemplateSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(id: impl Into<String>, text: &str) -> Result<Template> {
        let id = id.into();
        let chars: Vec<char> = text.chars().collect();
        let mut pos = 0;
        let pieces = parse_pieces(&chars, &mut pos, false)
            .map_err(|m| Error::InvalidArgument(format!("template '{id}': {m}")))?;
        Ok(Template { id, pieces })
    }

    /// Render a tag subset; descriptors appear verbatim in the output.
    pub fn render(&self, tags: &TagSet) -> String {
        let raw = render_pieces(&self.pieces, tags).unwrap_or_default();
        finish(&raw)
    }
}

fn slot_named(name: &str) -> Option<Slot> {
    match name {
        "n" => Some(Slot::Article),
        "genre" | "genres" => Some(Slot::Genre),
        "mood" | "moods" => Some(Slot::Mood),
        "instrument" | "instruments" => Some(Slot::Instruments),
        _ => None,
    }
}

fn parse_pieces(chars: &[char], pos: &mut usize, nested: bool) -> Result<Vec<Piece>, String> {
    let mut out = Vec::new();
    let mut text = String::new();
    while *pos < chars.len() {
        let c = chars[*pos];
        match c {
            '{' => {
                if !text.is_empty() {
                    out.push(Piece::Text(std::mem::take(&mut text)));
                }
                // a slot is `{ident}`; anything else opens an optional group
                let rest: String = chars[*pos + 1..].iter().collect();
                let ident_len = rest
                    .chars()
                    .take_while(|ch| ch.is_ascii_alphabetic() || *ch == '_')
                    .count();
                if ident_len > 0 && rest.chars().nth(ident_len) == Some('}') {
                    let name: String = rest.chars().take(ident_len).collect();
                    let slot = slot_named(&name).ok_or_else(|| format!("unknown slot '{name}'"))?;
                    out.push(Piece::Slot(slot));
                    *pos += ident_len + 2;
                } else {
                    *pos += 1;
                    let inner = parse_pieces(chars, pos, true)?;
                    out.push(Piece::Optional(inner));
                }
            }
            '}' => {
                if !nested {
                    return Err("unbalanced '}'".into());
                }
                *pos += 1;
                if !text.is_empty() {
                    out.push(Piece::Text(text));
                }
                return Ok(out);
            }
            _ => {
                text.push(c);
                *pos += 1;
            }
        }
    }
    if nested {
        return Err("unclosed '{'".into());
    }
    if !text.is_empty() {
        out.push(Piece::Text(text));
    }
    Ok(out)
}

fn join_and(items: &[String]) -> String {
    items.join(" and ")
}

fn join_list(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn slot_value(slot: &Slot, tags: &TagSet) -> String {
    let get = |c: Category| tags.get(&c).map(Vec::as_slice).unwrap_or(&[]);
    match slot {
        Slot::Article => ARTICLE_MARK.to_string(),
        Slot::Genre => join_and(get(Category::Genre)),
        Slot::Mood => join_and(get(Category::Mood)),
        Slot::Instruments => join_list(get(Category::Instrument)),
    }
}

/// `None` when an optional group has an empty slot.
fn render_pieces(pieces: &[Piece], tags: &TagSet) -> Option<String> {
    let mut out = String::new();
    for p in pieces {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(s) => out.push_str(&slot_value(s, tags)),
            Piece::Optional(inner) => {
                if let Some(s) = render_group(inner, tags) {
                    out.push_str(&s);
                }
            }
        }
    }
    Some(out)
}

fn render_group(pieces: &[Piece], tags: &TagSet) -> Option<String> {
    let mut out = String::new();
    for p in pieces {
        match p {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(s) => {
                let v = slot_value(s, tags);
                if v.is_empty() {
                    return None;
                }
                out.push_str(&v);
            }
            Piece::Optional(inner) => {
                if let Some(s) = render_group(inner, tags) {
                    out.push_str(&s);
                }
            }
        }
    }
    Some(out)
}

/// Collapse whitespace, drop spaces before punctuation, resolve articles.
fn finish(raw: &str) -> String {
    let collapsed = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut s = String::with_capacity(collapsed.len());
    let chars: Vec<char> = collapsed.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c == ' ' && matches!(chars.get(i + 1), Some('.' | ',' | ';' | '!' | '?')) {
            continue;
        }
        s.push(c);
    }
    let mut out = String::with_capacity(s.len());
    let chars: Vec<char> = s.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c == ARTICLE_MARK {
            let next = chars[i + 1..]
                .iter()
                .find(|ch| !ch.is_whitespace() && **ch != ARTICLE_MARK);
            if next.is_some_and(|ch| matches!(ch.to_ascii_lowercase(), 'a' | 'e' | 'i' | 'o' | 'u')) {
                out.push('n');
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// A versioned set of surface templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grammar {
    pub version: u32,
    pub templates: Vec<Template>,
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar {
            version: 1,
            templates: vec![Template::parse("T1", DEFAULT_TEMPLATE).expect("default template parses")],
        }
    }
}

impl Grammar {
    pub fn from_json(text: &str) -> Result<Grammar> {
        let file: GrammarFile = serde_json::from_str(text)
            .map_err(|e| Error::InvalidArgument(format!("grammar file: {e}")))?;
        if file.templates.is_empty() {
            return Err(Error::InvalidArgument("grammar has no templates".into()));
        }
        let templates = file
            .templates
            .iter()
            .map(|t| Template::parse(t.id.clone(), &t.text))
            .collect::<Result<Vec<_>>>()?;
        Ok(Grammar {
            version: file.version,
            templates,
        })
    }

    /// `"default"` selects the built-in grammar; anything else is a path.
    pub fn load(spec: &str) -> Result<Grammar> {
        if spec == "default" || spec.is_empty() {
            return Ok(Grammar::default());
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Grammar::from_json(&text)
    }

    pub fn template(&self, id: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.id == id)
    }
}

/// Render a tag subset with a uniformly chosen template from `grammar`.
pub fn tag_to_caption(tags: &TagSet, grammar: &Grammar, rng: &mut Rng) -> Result<String> {
    if tags.values().all(Vec::is_empty) {
        return Err(Error::InvalidArgument("cannot caption an empty tag subset".into()));
    }
    let t = if grammar.templates.len() == 1 {
        &grammar.templates[0]
    } else {
        &grammar.templates[rng.random_range(0..grammar.templates.len())]
    };
    Ok(t.render(tags))
}

//! Whitespace word-level tokenizer over a closed vocabulary.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{Color, Shape, REGION_NAMES};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const IMG: &str = "<img>";
pub const INST: &str = "<inst>";
pub const RESP: &str = "<resp>";

const SPECIALS: [&str; 7] = [PAD, UNK, BOS, EOS, IMG, INST, RESP];

const WORDS: &[&str] = &[
    // templates
    "the", "a", "an", "was", "removed", "added", "in", "and", "swapped", "places", "turned",
    "became", "scene", "with", "empty",
    // instructions
    "describe", "difference", "between", "images", "image", "what", "changed", "caption",
    "this", "briefly", "picture", "pictures", "look", "at", "compare", "two", "which", "of",
    "following", "options", "option", "answer", "is", "are", "there", "how", "many", "objects",
    "object", "color", "shape", "first", "second", "third", "fourth", "one", "same",
    "different", "not", "yes", "no", "to", "on", "after", "before", "next", "then", "story",
    "kind", "edit", "choose", "from", "select", "best", "it", "contains", "does", "do", "by",
    "where", "appeared", "disappeared", "moved", "replaced", "missing", "new", "left",
    "right", "upper", "lower", "middle", "center", "top", "bottom", "zero", "three", "four",
    "five", "six", "seven", "eight", "nine", "ten", "(a)", "(b)", "(c)", "(d)", "(1)", "(2)",
    "(3)", "(4)", "i", "think", "you", "see", "shown", "here", "below", "above", "for",
    "each", "every", "all", "some", "that", "these", "those", "than", "more", "less",
    "larger", "smaller", "big", "small", "tiny", "large", "background", "gray", "black",
    "brown", "navy", "dialogue", "question", "q", "user", "assistant", "or", "as", "be",
    "has", "have", "its", "their", "into", "out", "up", "down", "only", "also", "both",
    "neither", "none", "count", "number", "name", "tell", "me", "please", "give", "write",
    "sentence", "short", "detail", "details", "region", "side", "corner", "place", "again",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for s in SPECIALS {
            if !index.contains_key(s) {
                return Err(Error::Config(format!("vocabulary lacks {s}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials, palette and shape names, region words and template /
    /// instruction words, deduplicated in that order.
    pub fn default_vocab() -> Self {
        let mut tokens: Vec<String> = Vec::new();
        let mut push = |t: &str| {
            if !tokens.iter().any(|x| x == t) {
                tokens.push(t.to_string());
            }
        };
        SPECIALS.iter().for_each(|t| push(t));
        Color::ALL.iter().for_each(|c| push(c.name()));
        Shape::ALL.iter().for_each(|s| push(s.name()));
        for row in REGION_NAMES {
            for phrase in row {
                phrase.split_whitespace().for_each(&mut push);
            }
        }
        WORDS.iter().for_each(|t| push(t));
        Self::from_tokens(tokens).expect("default vocabulary is well-formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn special(&self, token: &str) -> usize {
        self.id(token).expect("specials are always present")
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    /// Lowercased whitespace split; unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let unk = self.special(UNK);
        text.split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(unk))
            .collect()
    }

    /// Whether every word of `text` is in-vocabulary.
    pub fn covers(&self, text: &str) -> bool {
        text.split_whitespace()
            .all(|w| self.index.contains_key(&w.to_lowercase()))
    }

    /// Joins ids, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .filter(|t| !SPECIALS.contains(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// JSON object `token → id`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.tokens
                .iter()
                .enumerate()
                .map(|(i, t)| (t.clone(), serde_json::Value::from(i)))
                .collect(),
        )
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Config("vocabulary must be a JSON object".into()))?;
        let mut pairs: Vec<(usize, String)> = obj
            .iter()
            .map(|(k, v)| {
                v.as_u64()
                    .map(|i| (i as usize, k.clone()))
                    .ok_or_else(|| Error::Config(format!("bad id for {k:?}")))
            })
            .collect::<Result<_>>()?;
        pairs.sort();
        if pairs.iter().enumerate().any(|(i, (id, _))| i != *id) {
            return Err(Error::Config("vocabulary ids must be 0..n".into()));
        }
        Self::from_tokens(pairs.into_iter().map(|(_, t)| t).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

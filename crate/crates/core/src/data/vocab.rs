use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::corpus::{Catalog, Dialogue};
use super::text::{item_marker, item_token, tokenize};
use crate::error::{invalid, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const REC: usize = 4;
pub const GEN: usize = 5;
pub const USER: usize = 6;
pub const AGENT: usize = 7;

pub const SPECIALS: [&str; 8] = ["<pad>", "<bos>", "<eos>", "<unk>", "[REC]", "[GEN]", "[USER]", "[AGENT]"];

/// Unified token space: specials, then words, then one token per catalog item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabParts", into = "VocabParts")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    n_words: usize,
    n_items: usize,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabParts {
    words: Vec<String>,
    items: Vec<String>,
}

impl TryFrom<VocabParts> for Vocabulary {
    type Error = crate::error::Error;
    fn try_from(p: VocabParts) -> Result<Self> {
        Vocabulary::from_parts(p.words, p.items)
    }
}

impl From<Vocabulary> for VocabParts {
    fn from(v: Vocabulary) -> Self {
        VocabParts {
            words: v.tokens[v.word_range()].to_vec(),
            items: v.tokens[v.item_range()]
                .iter()
                .map(|t| item_marker(t).unwrap_or(t).to_string())
                .collect(),
        }
    }
}

impl Vocabulary {
    /// Words in order of first occurrence across the corpus; items in
    /// catalog order.
    pub fn build(corpus: &[Dialogue], catalog: &Catalog) -> Result<Self> {
        if corpus.is_empty() {
            return invalid("cannot build a vocabulary from an empty corpus");
        }
        let mut seen = std::collections::HashSet::new();
        let mut words = Vec::new();
        for d in corpus {
            for t in &d.turns {
                for tok in tokenize(&t.text) {
                    if item_marker(&tok).is_some() {
                        continue;
                    }
                    if seen.insert(tok.clone()) {
                        words.push(tok);
                    }
                }
            }
        }
        let items = catalog.entries().iter().map(|e| e.id.clone()).collect();
        Vocabulary::from_parts(words, items)
    }

    pub fn from_parts(words: Vec<String>, items: Vec<String>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let n_words = words.len();
        let n_items = items.len();
        tokens.extend(words);
        tokens.extend(items.iter().map(|i| item_token(i)));
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return invalid(format!("duplicate token {t:?}"));
            }
        }
        Ok(Vocabulary {
            tokens,
            index,
            n_words,
            n_items,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn word_range(&self) -> Range<usize> {
        SPECIALS.len()..SPECIALS.len() + self.n_words
    }

    pub fn item_range(&self) -> Range<usize> {
        let s = SPECIALS.len() + self.n_words;
        s..s + self.n_items
    }

    pub fn is_item(&self, id: usize) -> bool {
        self.item_range().contains(&id)
    }

    pub fn is_word(&self, id: usize) -> bool {
        self.word_range().contains(&id)
    }

    /// Item index (0-based position in the catalog) of a token id.
    pub fn item_index(&self, id: usize) -> Option<usize> {
        self.is_item(id).then(|| id - self.item_range().start)
    }

    pub fn item_token_id(&self, item: usize) -> usize {
        self.item_range().start + item
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes and maps to ids; unknown words and unknown items become `<unk>`.
    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Space-joined surface text; padding, sequence markers and turn tags are dropped.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS | REC | GEN | USER | AGENT))
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

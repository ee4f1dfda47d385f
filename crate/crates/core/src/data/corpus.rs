use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::{item_marker, tokenize};
use super::vocab::{Vocabulary, GEN, REC};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    #[serde(alias = "seeker")]
    User,
    #[serde(alias = "recommender")]
    Agent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    /// Catalog ids mentioned in turn `i`, in order.
    pub fn mentions(&self, i: usize) -> Vec<String> {
        tokenize(&self.turns[i].text)
            .iter()
            .filter_map(|t| item_marker(t).map(str::to_string))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub id: String,
    pub title: String,
}

/// Ordered item catalog. Position in the catalog is the item index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if e.id.is_empty() {
                return Err(Error::InvalidArgument("empty item id in catalog".into()));
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate item id {}", e.id)));
            }
        }
        Ok(Catalog { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, i: usize) -> &CatalogEntry {
        &self.entries[i]
    }

    pub fn load(path: &Path) -> Result<Self> {
        Catalog::new(read_jsonl(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.entries)
    }
}

/// A turn mapped into vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedTurn {
    pub speaker: Speaker,
    pub ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedDialogue {
    pub id: String,
    pub turns: Vec<EncodedTurn>,
}

impl EncodedTurn {
    /// Item indices (not token ids) in order of appearance.
    pub fn items(&self, vocab: &Vocabulary) -> Vec<usize> {
        self.ids.iter().filter_map(|&t| vocab.item_index(t)).collect()
    }

    pub fn has_prefix(&self) -> bool {
        matches!(self.ids.first(), Some(&REC) | Some(&GEN))
    }
}

pub fn encode(d: &Dialogue, vocab: &Vocabulary) -> EncodedDialogue {
    EncodedDialogue {
        id: d.id.clone(),
        turns: d
            .turns
            .iter()
            .map(|t| EncodedTurn {
                speaker: t.speaker,
                ids: vocab.encode_text(&t.text),
            })
            .collect(),
    }
}

/// Prefixes every agent turn with `[REC]` when it contains an item token and
/// `[GEN]` otherwise. Turns that already carry a prefix are left alone.
pub fn inject_special_tokens(d: &EncodedDialogue, vocab: &Vocabulary) -> EncodedDialogue {
    let mut out = d.clone();
    for t in out.turns.iter_mut() {
        if t.speaker != Speaker::Agent || t.has_prefix() {
            continue;
        }
        let tag = if t.ids.iter().any(|&i| vocab.is_item(i)) { REC } else { GEN };
        t.ids.insert(0, tag);
    }
    out
}

pub fn load_dialogues(path: &Path) -> Result<Vec<Dialogue>> {
    read_jsonl(path)
}

pub fn save_dialogues(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    write_jsonl(path, dialogues)
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    parse_jsonl(std::io::BufReader::new(f))
}

pub(crate) fn parse_jsonl<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{read_jsonl, write_jsonl, Catalog, EncodedTurn};
use super::vocab::Vocabulary;
use crate::error::{invalid, Result};

/// One line of a knowledge-graph file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl RawTriple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        RawTriple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

pub fn load_triples(path: &Path) -> Result<Vec<RawTriple>> {
    read_jsonl(path)
}

pub fn save_triples(path: &Path, triples: &[RawTriple]) -> Result<()> {
    write_jsonl(path, triples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Item,
    Attribute,
    Word,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub nodes: Vec<String>,
    pub kinds: Vec<NodeKind>,
    pub relations: Vec<String>,
    pub triples: Vec<Triple>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl KnowledgeGraph {
    pub fn new(nodes: Vec<String>, kinds: Vec<NodeKind>, relations: Vec<String>, triples: Vec<Triple>) -> Result<Self> {
        if nodes.len() != kinds.len() {
            return invalid("node and kind lists differ in length");
        }
        for t in &triples {
            if t.head >= nodes.len() || t.tail >= nodes.len() {
                return invalid(format!("triple {t:?} outside {} nodes", nodes.len()));
            }
            if t.rel >= relations.len() {
                return invalid(format!("relation {} outside {} relations", t.rel, relations.len()));
            }
        }
        let mut kg = KnowledgeGraph {
            nodes,
            kinds,
            relations,
            triples,
            index: HashMap::new(),
        };
        kg.reindex();
        Ok(kg)
    }

    /// Rebuilds the name lookup after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.nodes.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    /// Item graph: catalog items take node ids `0..n_items` in catalog order,
    /// attributes follow in order of first appearance. Heads or tails naming a
    /// catalog id are items; anything else is an attribute.
    pub fn item_graph(catalog: &Catalog, raw: &[RawTriple]) -> Result<Self> {
        let mut nodes: Vec<String> = catalog.entries().iter().map(|e| e.id.clone()).collect();
        let mut kinds = vec![NodeKind::Item; nodes.len()];
        let mut index: HashMap<String, usize> = nodes.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let mut relations = Vec::new();
        let mut rel_index = HashMap::new();
        let mut triples = Vec::new();
        let mut node = |name: &str, nodes: &mut Vec<String>, kinds: &mut Vec<NodeKind>| {
            *index.entry(name.to_string()).or_insert_with(|| {
                nodes.push(name.to_string());
                kinds.push(NodeKind::Attribute);
                nodes.len() - 1
            })
        };
        for t in raw {
            let head = node(&t.head, &mut nodes, &mut kinds);
            let tail = node(&t.tail, &mut nodes, &mut kinds);
            let rel = *rel_index.entry(t.relation.clone()).or_insert_with(|| {
                relations.push(t.relation.clone());
                relations.len() - 1
            });
            triples.push(Triple { head, rel, tail });
        }
        if relations.is_empty() {
            relations.push("related".to_string());
        }
        KnowledgeGraph::new(nodes, kinds, relations, triples)
    }

    /// Word graph: untyped, every relation label collapses into one.
    pub fn word_graph(raw: &[RawTriple]) -> Result<Self> {
        let mut nodes = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut triples = Vec::new();
        let mut node = |name: &str, nodes: &mut Vec<String>| {
            *index.entry(name.to_string()).or_insert_with(|| {
                nodes.push(name.to_string());
                nodes.len() - 1
            })
        };
        for t in raw {
            let head = node(&t.head, &mut nodes);
            let tail = node(&t.tail, &mut nodes);
            triples.push(Triple { head, rel: 0, tail });
        }
        let kinds = vec![NodeKind::Word; nodes.len()];
        KnowledgeGraph::new(nodes, kinds, vec!["related".to_string()], triples)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn node(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Nodes with at least one incident edge.
    pub fn connected(&self) -> Vec<bool> {
        let mut c = vec![false; self.nodes.len()];
        for t in &self.triples {
            c[t.head] = true;
            c[t.tail] = true;
        }
        c
    }

    /// Undirected adjacency lists (duplicates removed, sorted).
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for t in &self.triples {
            if t.head != t.tail {
                adj[t.head].push(t.tail);
                adj[t.tail].push(t.head);
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }
}

/// Maps vocabulary ids to knowledge-graph nodes: item tokens to item-graph
/// nodes, words to word-graph nodes by exact string match.
#[derive(Clone, Debug)]
pub struct EntityLinker {
    item_node: Vec<Option<usize>>,
    word_node: Vec<Option<usize>>,
}

impl EntityLinker {
    pub fn new(vocab: &Vocabulary, item_kg: &KnowledgeGraph, word_kg: &KnowledgeGraph) -> Self {
        let mut item_node = vec![None; vocab.len()];
        let mut word_node = vec![None; vocab.len()];
        for id in vocab.item_range() {
            // item index i is node i in the item graph
            let i = vocab.item_index(id).unwrap();
            if i < item_kg.n_nodes() && item_kg.kinds[i] == NodeKind::Item {
                item_node[id] = Some(i);
            }
        }
        for id in vocab.word_range() {
            word_node[id] = word_kg.node(vocab.token(id));
        }
        EntityLinker { item_node, word_node }
    }

    pub fn item_node(&self, id: usize) -> Option<usize> {
        self.item_node.get(id).copied().flatten()
    }

    pub fn word_node(&self, id: usize) -> Option<usize> {
        self.word_node.get(id).copied().flatten()
    }

    /// Ordered, deduplicated item-graph and word-graph nodes mentioned in `history`.
    pub fn mentioned_entities(&self, history: &[EncodedTurn]) -> (Vec<usize>, Vec<usize>) {
        let mut items = Vec::new();
        let mut words = Vec::new();
        for t in history {
            for &id in &t.ids {
                if let Some(n) = self.item_node(id) {
                    if !items.contains(&n) {
                        items.push(n);
                    }
                } else if let Some(n) = self.word_node(id) {
                    if !words.contains(&n) {
                        words.push(n);
                    }
                }
            }
        }
        (items, words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{CatalogEntry, Dialogue, Speaker, Turn};

    fn catalog(ids: &[&str]) -> Catalog {
        Catalog::new(ids.iter().map(|i| CatalogEntry { id: i.to_string(), title: i.to_string() }).collect()).unwrap()
    }

    #[test]
    fn item_graph_puts_items_first() {
        let cat = catalog(&["m1", "m2"]);
        let kg = KnowledgeGraph::item_graph(
            &cat,
            &[RawTriple::new("m2", "genre", "action"), RawTriple::new("m1", "actor", "bob")],
        )
        .unwrap();
        assert_eq!(kg.nodes, vec!["m1", "m2", "action", "bob"]);
        assert_eq!(kg.kinds[..2], [NodeKind::Item, NodeKind::Item]);
        assert_eq!(kg.relations, vec!["genre", "actor"]);
        assert_eq!(kg.triples[0], Triple { head: 1, rel: 0, tail: 2 });
    }

    #[test]
    fn word_graph_has_one_relation() {
        let kg = KnowledgeGraph::word_graph(&[RawTriple::new("scary", "a", "horror"), RawTriple::new("funny", "b", "comedy")]).unwrap();
        assert_eq!(kg.n_relations(), 1);
        assert!(kg.triples.iter().all(|t| t.rel == 0));
    }

    #[test]
    fn out_of_range_triples_are_rejected() {
        let r = KnowledgeGraph::new(vec!["a".into()], vec![NodeKind::Word], vec!["r".into()], vec![Triple { head: 0, rel: 0, tail: 1 }]);
        assert!(r.is_err());
    }

    fn fixture() -> (Vocabulary, EntityLinker, Vec<EncodedTurn>) {
        let d = Dialogue {
            id: "f".into(),
            turns: vec![
                Turn { speaker: Speaker::User, text: "i like action movies".into() },
                Turn { speaker: Speaker::Agent, text: "have you seen @M1 ?".into() },
                Turn { speaker: Speaker::User, text: "yes , and @M2 and @M1 too".into() },
            ],
        };
        let cat = catalog(&["M1", "M2", "M3"]);
        let vocab = Vocabulary::build(std::slice::from_ref(&d), &cat).unwrap();
        let item_kg = KnowledgeGraph::item_graph(&cat, &[RawTriple::new("M1", "genre", "action")]).unwrap();
        let word_kg = KnowledgeGraph::word_graph(&[RawTriple::new("action", "r", "explosions")]).unwrap();
        let linker = EntityLinker::new(&vocab, &item_kg, &word_kg);
        let enc = crate::data::corpus::encode(&d, &vocab);
        (vocab, linker, enc.turns)
    }

    #[test]
    fn three_turn_fixture_mentions() {
        let (_, linker, turns) = fixture();
        let (items, words) = linker.mentioned_entities(&turns);
        assert_eq!(items, vec![0, 1]);
        assert_eq!(words, vec![0]);
    }

    #[test]
    fn no_entities_means_empty_lists() {
        let (_, linker, turns) = fixture();
        let none = EncodedTurn { speaker: Speaker::User, ids: vec![] };
        assert_eq!(linker.mentioned_entities(&[none]), (vec![], vec![]));
        // repeated item collapses
        let (items, _) = linker.mentioned_entities(&turns[1..]);
        assert_eq!(items, vec![0, 1]);
    }
}

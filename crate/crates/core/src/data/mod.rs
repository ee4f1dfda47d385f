//! Corpus, vocabulary and knowledge-graph data model, plus the synthetic
//! generator and the JSON-lines loaders.

pub mod corpus;
pub mod examples;
pub mod kg;
pub mod synth;
pub mod text;
pub mod vocab;

pub use corpus::{encode, inject_special_tokens, Catalog, CatalogEntry, Dialogue, EncodedDialogue, EncodedTurn, Speaker, Turn};
pub use examples::{build_examples, split_dialogues, Dataset, Split, TurnExample};
pub use kg::{EntityLinker, KnowledgeGraph, NodeKind, RawTriple, Triple};
pub use synth::{generate_synthetic_corpus, SyntheticConfig, SyntheticCorpus};
pub use vocab::Vocabulary;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::corpus::{encode, inject_special_tokens, Catalog, Dialogue, EncodedDialogue, Speaker};
use super::kg::{EntityLinker, KnowledgeGraph, RawTriple};
use super::vocab::{Vocabulary, AGENT, BOS, EOS, USER};
use crate::error::{invalid, Result};

/// One agent turn in model-ready form.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnExample {
    pub dialogue: usize,
    pub turn: usize,
    /// `<bos>` then every earlier turn as speaker tag + tokens, cut from the left.
    pub context: Vec<usize>,
    /// The agent turn's tokens (with its `[REC]`/`[GEN]` tag when present).
    pub response: Vec<usize>,
    /// Item indices mentioned in the response, in order.
    pub gold_items: Vec<usize>,
    /// Item-graph nodes mentioned in the history.
    pub mentioned_items: Vec<usize>,
    /// Word-graph nodes mentioned in the history.
    pub mentioned_words: Vec<usize>,
}

impl TurnExample {
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.response.len() + 1);
        v.push(BOS);
        v.extend_from_slice(&self.response);
        v
    }

    pub fn decoder_target(&self) -> Vec<usize> {
        let mut v = self.response.clone();
        v.push(EOS);
        v
    }

    pub fn is_rec(&self) -> bool {
        !self.gold_items.is_empty()
    }
}

pub fn encode_context(history: &[super::corpus::EncodedTurn], max_len: usize) -> Vec<usize> {
    let mut body = Vec::new();
    for t in history {
        body.push(if t.speaker == Speaker::User { USER } else { AGENT });
        body.extend_from_slice(&t.ids);
    }
    let keep = max_len.saturating_sub(1);
    let start = body.len().saturating_sub(keep);
    let mut ctx = Vec::with_capacity(keep + 1);
    ctx.push(BOS);
    ctx.extend_from_slice(&body[start..]);
    ctx
}

pub fn build_examples(dialogues: &[EncodedDialogue], vocab: &Vocabulary, linker: &EntityLinker, max_len: usize) -> Vec<TurnExample> {
    let mut out = Vec::new();
    for (di, d) in dialogues.iter().enumerate() {
        for (ti, t) in d.turns.iter().enumerate() {
            if t.speaker != Speaker::Agent {
                continue;
            }
            let history = &d.turns[..ti];
            let (mentioned_items, mentioned_words) = linker.mentioned_entities(history);
            let mut response = t.ids.clone();
            response.truncate(max_len.saturating_sub(1));
            out.push(TurnExample {
                dialogue: di,
                turn: ti,
                context: encode_context(history, max_len),
                gold_items: response.iter().filter_map(|&i| vocab.item_index(i)).collect(),
                response,
                mentioned_items,
                mentioned_words,
            });
        }
    }
    out
}

/// Deterministic shuffle-and-cut of a corpus into (train, held-out).
pub fn split_dialogues(dialogues: &[Dialogue], heldout_fraction: f64, seed: u64) -> Result<(Vec<Dialogue>, Vec<Dialogue>)> {
    if !(0.0..1.0).contains(&heldout_fraction) {
        return invalid(format!("held-out fraction {heldout_fraction} outside [0, 1)"));
    }
    let mut idx: Vec<usize> = (0..dialogues.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = (dialogues.len() as f64 * heldout_fraction).round() as usize;
    let (held, train) = idx.split_at(n_held);
    let mut train: Vec<usize> = train.to_vec();
    let mut held: Vec<usize> = held.to_vec();
    train.sort_unstable();
    held.sort_unstable();
    Ok((
        train.iter().map(|&i| dialogues[i].clone()).collect(),
        held.iter().map(|&i| dialogues[i].clone()).collect(),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

/// Everything the models need: vocabulary, graphs, and both encoded splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub catalog: Catalog,
    pub item_kg: KnowledgeGraph,
    pub word_kg: KnowledgeGraph,
    pub linker: EntityLinker,
    pub train: Vec<EncodedDialogue>,
    pub heldout: Vec<EncodedDialogue>,
}

impl Dataset {
    pub fn new(train: &[Dialogue], heldout: &[Dialogue], catalog: Catalog, item_triples: &[RawTriple], word_triples: &[RawTriple]) -> Result<Self> {
        let vocab = Vocabulary::build(train, &catalog)?;
        let item_kg = KnowledgeGraph::item_graph(&catalog, item_triples)?;
        let word_kg = KnowledgeGraph::word_graph(word_triples)?;
        Ok(Dataset::from_parts(vocab, catalog, item_kg, word_kg, train, heldout))
    }

    pub fn from_parts(
        vocab: Vocabulary,
        catalog: Catalog,
        item_kg: KnowledgeGraph,
        word_kg: KnowledgeGraph,
        train: &[Dialogue],
        heldout: &[Dialogue],
    ) -> Self {
        let linker = EntityLinker::new(&vocab, &item_kg, &word_kg);
        let train = train.iter().map(|d| encode(d, &vocab)).collect();
        let heldout = heldout.iter().map(|d| encode(d, &vocab)).collect();
        Dataset {
            vocab,
            catalog,
            item_kg,
            word_kg,
            linker,
            train,
            heldout,
        }
    }

    pub fn dialogues(&self, split: Split) -> &[EncodedDialogue] {
        match split {
            Split::Train => &self.train,
            Split::Heldout => &self.heldout,
        }
    }

    pub fn examples(&self, split: Split, special_tokens: bool, max_len: usize) -> Vec<TurnExample> {
        let ds = self.dialogues(split);
        if special_tokens {
            let tagged: Vec<EncodedDialogue> = ds.iter().map(|d| inject_special_tokens(d, &self.vocab)).collect();
            build_examples(&tagged, &self.vocab, &self.linker, max_len)
        } else {
            build_examples(ds, &self.vocab, &self.linker, max_len)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{CatalogEntry, EncodedTurn, Turn};
    use crate::data::vocab::{GEN, REC};

    fn tiny() -> Dataset {
        let d = Dialogue {
            id: "a".into(),
            turns: vec![
                Turn { speaker: Speaker::User, text: "i like action".into() },
                Turn { speaker: Speaker::Agent, text: "watch @1 !".into() },
                Turn { speaker: Speaker::User, text: "ok".into() },
                Turn { speaker: Speaker::Agent, text: "bye".into() },
            ],
        };
        let cat = Catalog::new(vec![CatalogEntry { id: "1".into(), title: "One".into() }]).unwrap();
        Dataset::new(&[d], &[], cat, &[RawTriple::new("1", "genre", "action")], &[RawTriple::new("fights", "r", "action")]).unwrap()
    }

    #[test]
    fn one_example_per_agent_turn() {
        let ds = tiny();
        let ex = ds.examples(Split::Train, false, 32);
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].gold_items, vec![0]);
        assert!(ex[1].gold_items.is_empty());
        assert_eq!(ex[1].mentioned_items, vec![0]);
        assert_eq!(ex[0].mentioned_words, vec![ds.word_kg.node("action").unwrap()]);
        assert_eq!(ex[0].context[0], BOS);
        assert_eq!(ex[0].context[1], USER);
    }

    #[test]
    fn special_tokens_prefix_responses() {
        let ds = tiny();
        let ex = ds.examples(Split::Train, true, 32);
        assert_eq!(ex[0].response[0], REC);
        assert_eq!(ex[1].response[0], GEN);
        // earlier tags stay visible in later contexts
        assert!(ex[1].context.contains(&REC));
    }

    #[test]
    fn injection_is_idempotent_and_matches_item_indicator() {
        let ds = tiny();
        let once = inject_special_tokens(&ds.train[0], &ds.vocab);
        let twice = inject_special_tokens(&once, &ds.vocab);
        assert_eq!(once, twice);
        for t in once.turns.iter().filter(|t| t.speaker == Speaker::Agent) {
            let has_item = t.ids.iter().any(|&i| ds.vocab.is_item(i));
            assert_eq!(t.ids[0] == REC, has_item);
        }
    }

    #[test]
    fn context_is_cut_from_the_left() {
        let turns = vec![
            EncodedTurn { speaker: Speaker::User, ids: vec![10, 11, 12] },
            EncodedTurn { speaker: Speaker::Agent, ids: vec![13, 14] },
        ];
        assert_eq!(encode_context(&turns, 4), vec![BOS, AGENT, 13, 14]);
        assert_eq!(encode_context(&turns, 100).len(), 8);
    }

    #[test]
    fn decoder_views() {
        let ex = &tiny().examples(Split::Train, false, 32)[0];
        assert_eq!(ex.decoder_input()[0], BOS);
        assert_eq!(*ex.decoder_target().last().unwrap(), EOS);
        assert_eq!(ex.decoder_input().len(), ex.decoder_target().len());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ds: Vec<Dialogue> = (0..10).map(|i| Dialogue { id: i.to_string(), turns: vec![] }).collect();
        let (a, b) = split_dialogues(&ds, 0.3, 1).unwrap();
        let (c, d) = split_dialogues(&ds, 0.3, 1).unwrap();
        assert_eq!((a.len(), b.len()), (7, 3));
        assert_eq!((&a, &b), (&c, &d));
        assert!(a.iter().all(|x| !b.contains(x)));
    }
}

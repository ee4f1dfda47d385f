//! Binary turn classifier deciding whether the next agent turn opens with
//! `[REC]` or `[GEN]`.

use conkd_nn::functional::softmax;
use conkd_nn::layers::{Embedding, Linear};
use conkd_nn::transformer::Encoder;
use conkd_nn::{Graph, ParamStore, SeqBatch, Tensor, TransformerConfig, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::vocab::{GEN, REC};
use crate::data::{TurnExample, Vocabulary};
use crate::dialogue::LmConfig;
use crate::error::{invalid, Error, Result};
use crate::train::{self, TrainLog};

pub const KIND: &str = "turn_classifier";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    #[serde(rename = "GEN")]
    Gen,
    #[serde(rename = "REC")]
    Rec,
}

impl Decision {
    pub fn token(self) -> usize {
        match self {
            Decision::Gen => GEN,
            Decision::Rec => REC,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Gen => "GEN",
            Decision::Rec => "REC",
        }
    }
}

/// Label of an example built with special tokens.
pub fn label(e: &TurnExample) -> Option<Decision> {
    match e.response.first() {
        Some(&REC) => Some(Decision::Rec),
        Some(&GEN) => Some(Decision::Gen),
        _ => None,
    }
}

#[derive(Clone, Debug)]
pub struct TurnClassifier {
    pub config: LmConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
    tok: Embedding,
    encoder: Encoder,
    head: Linear,
}

impl TurnClassifier {
    pub fn new(vocab: Vocabulary, config: LmConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.model.hidden;
        let tok = Embedding::new(&mut params, "cls.tok", vocab.len(), d, &mut rng)?;
        let encoder = Encoder::new(&mut params, "cls.enc", &config.model, &mut rng)?;
        let head = Linear::new(&mut params, "cls.head", d, 2, true, &mut rng)?;
        Ok(TurnClassifier {
            config,
            vocab,
            params,
            tok,
            encoder,
            head,
        })
    }

    fn model_config(&self) -> &TransformerConfig {
        &self.config.model
    }

    /// Two logits per context: `[GEN, REC]`.
    pub fn logits(&self, g: &mut Graph<'_, f32>, contexts: &[&[usize]]) -> Result<Var> {
        if let Some(c) = contexts.iter().find(|c| c.len() > self.model_config().max_len || c.is_empty()) {
            return invalid(format!("context of length {} outside 1..={}", c.len(), self.model_config().max_len));
        }
        if let Some(&id) = contexts.iter().flat_map(|c| c.iter()).find(|&&id| id >= self.vocab.len()) {
            return invalid(format!("token id {id} outside vocabulary"));
        }
        let batch = SeqBatch::new(contexts);
        let h = self.encoder.forward(g, &self.tok, &batch)?;
        let segs: Vec<(usize, usize)> = batch.starts.iter().zip(&batch.lens).map(|(&s, &l)| (s, l)).collect();
        let pooled = g.segment_mean(h, &segs)?;
        Ok(self.head.forward(g, pooled)?)
    }

    /// `P(REC | context)`.
    pub fn rec_probability(&self, context: &[usize]) -> Result<f32> {
        let mut g = Graph::new(&self.params);
        let l = self.logits(&mut g, &[context])?;
        Ok(softmax(g.value(l).row(0))?[1])
    }

    pub fn classify(&self, context: &[usize]) -> Result<Decision> {
        // argmax with ties going to GEN
        Ok(if self.rec_probability(context)? > 0.5 { Decision::Rec } else { Decision::Gen })
    }

    pub fn accuracy(&self, examples: &[TurnExample]) -> Result<f64> {
        let labelled: Vec<(&TurnExample, Decision)> = examples.iter().filter_map(|e| label(e).map(|l| (e, l))).collect();
        if labelled.is_empty() {
            return invalid("no labelled examples");
        }
        let mut hits = 0;
        for (e, l) in &labelled {
            hits += (self.classify(&e.context)? == *l) as usize;
        }
        Ok(hits as f64 / labelled.len() as f64)
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: KIND.into(),
            config: serde_json::to_value(&self.config)?,
            seed,
            vocab: Some(self.vocab.clone()),
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(KIND)?;
        let vocab = c
            .vocab
            .clone()
            .ok_or_else(|| Error::Checkpoint("classifier checkpoint without a vocabulary".into()))?;
        let mut m = TurnClassifier::new(vocab, c.config_as()?, c.seed)?;
        c.restore_into(&mut m.params)?;
        Ok(m)
    }
}

/// Cross-entropy training on contexts labelled by their response's leading tag.
pub fn train_classifier(model: &mut TurnClassifier, examples: &[TurnExample], seed: u64) -> Result<TrainLog> {
    let data: Vec<(&[usize], usize)> = examples
        .iter()
        .filter_map(|e| label(e).map(|l| (e.context.as_slice(), (l == Decision::Rec) as usize)))
        .collect();
    if data.is_empty() {
        return invalid("no labelled examples; build them with special tokens");
    }
    let positives = data.iter().filter(|d| d.1 == 1).count();
    if positives == 0 || positives == data.len() {
        return invalid("classifier training data contains a single class");
    }
    let cfg = model.config.train.clone();
    let mut params = std::mem::replace(&mut model.params, ParamStore::new());
    let view: &TurnClassifier = model;
    let out = train::run(&mut params, data.len(), &cfg, seed, |g, idx| {
        let ctx: Vec<&[usize]> = idx.iter().map(|&i| data[i].0).collect();
        let l = view.logits(g, &ctx)?;
        let lp = g.log_softmax_rows(l);
        let mut t = Tensor::zeros(&[idx.len(), 2]);
        for (r, &i) in idx.iter().enumerate() {
            t.row_mut(r)[data[i].1] = 1.0;
        }
        Ok(g.soft_cross_entropy(lp, t, vec![1.0 / idx.len() as f32; idx.len()])?)
    });
    model.params = params;
    out
}

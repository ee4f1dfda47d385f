//! Encoder-decoder language model over the joint word/item vocabulary.
//! Serves as the dialogue teacher, the student, and the vanilla baseline.

use conkd_nn::functional::{softmax, top_k};
use conkd_nn::transformer::Seq2Seq;
use conkd_nn::{Graph, ParamStore, SeqBatch, Tensor, TransformerConfig, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::vocab::{BOS, EOS};
use crate::data::{TurnExample, Vocabulary};
use crate::error::{invalid, Error, Result};
use crate::train::{self, TrainConfig, TrainLog};

pub const KIND: &str = "language_model";

/// Examples per forward pass outside training.
const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub model: TransformerConfig,
    pub train: TrainConfig,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            model: TransformerConfig {
                layers: 2,
                hidden: 32,
                heads: 2,
                ffn: 64,
                max_len: 48,
                dropout: 0.1,
            },
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
    net: Seq2Seq,
}

/// Decoder rows of a packed batch: example `i` owns rows `offsets[i]..offsets[i + 1]`.
pub struct PackedBatch {
    pub src: SeqBatch,
    pub prefix: SeqBatch,
    pub targets: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl PackedBatch {
    pub fn new(examples: &[&TurnExample]) -> Self {
        let src = SeqBatch::new(&examples.iter().map(|e| e.context.clone()).collect::<Vec<_>>());
        let prefix = SeqBatch::new(&examples.iter().map(|e| e.decoder_input()).collect::<Vec<_>>());
        let mut targets = Vec::with_capacity(prefix.total());
        let mut offsets = vec![0];
        for e in examples {
            targets.extend(e.decoder_target());
            offsets.push(targets.len());
        }
        PackedBatch { src, prefix, targets, offsets }
    }

    pub fn rows(&self) -> usize {
        self.targets.len()
    }

    /// `1 / (T_i * B)` for every row: per-response mean over time, mean over the batch.
    pub fn row_weights(&self) -> Vec<f32> {
        let b = (self.offsets.len() - 1) as f32;
        let mut w = Vec::with_capacity(self.rows());
        for p in self.offsets.windows(2) {
            let t = (p[1] - p[0]) as f32;
            w.extend(std::iter::repeat_n(1.0 / (t * b), p[1] - p[0]));
        }
        w
    }

    pub fn one_hot(&self, n: usize) -> Tensor<f32> {
        let mut t = Tensor::zeros(&[self.rows(), n]);
        for (r, &y) in self.targets.iter().enumerate() {
            t.row_mut(r)[y] = 1.0;
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum Strategy {
    Greedy,
    TopK { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// Ranked item candidates kept for every emitted item slot.
    pub candidates: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Greedy,
            max_new_tokens: 24,
            seed: 0,
            candidates: 50,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Strategy::TopK { k: 0 } = self.strategy {
            return invalid("top-k sampling needs k >= 1");
        }
        if self.max_new_tokens == 0 {
            return invalid("max_new_tokens must be at least 1");
        }
        Ok(())
    }
}

/// Output of one decoding run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Emitted tokens including a forced prefix, without `<eos>`.
    pub tokens: Vec<usize>,
    /// Item mass of the next-token distribution at every sampled step.
    pub item_mass: Vec<f32>,
    /// For every emitted item token: (item index, probability), best first.
    pub slots: Vec<Vec<(usize, f32)>>,
}

impl LanguageModel {
    pub fn new(vocab: Vocabulary, config: LmConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Seq2Seq::new(&mut params, "lm", vocab.len(), &config.model, &mut rng)?;
        Ok(LanguageModel { config, vocab, params, net })
    }

    pub fn max_len(&self) -> usize {
        self.config.model.max_len
    }

    /// Next-token logits for every decoder row of the batch.
    pub fn logits(&self, g: &mut Graph<'_, f32>, batch: &PackedBatch) -> Result<Var> {
        Ok(self.net.logits(g, &batch.src, &batch.prefix)?)
    }

    /// Teacher-forced next-token distributions, one `T_i x |Y|` matrix per example,
    /// optionally at temperature `tau`.
    pub fn teacher_forced(&self, examples: &[&TurnExample], tau: f32) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(EVAL_CHUNK) {
            let b = PackedBatch::new(chunk);
            let mut g = Graph::new(&self.params);
            let l = self.logits(&mut g, &b)?;
            let mut l = g.value(l).clone();
            if tau != 1.0 {
                l.scale_assign(1.0 / tau);
            }
            let v = self.vocab.len();
            for p in b.offsets.windows(2) {
                let mut t = Tensor::zeros(&[p[1] - p[0], v]);
                for r in p[0]..p[1] {
                    t.row_mut(r - p[0]).copy_from_slice(&softmax(l.row(r))?);
                }
                out.push(t);
            }
        }
        Ok(out)
    }

    /// `exp` of the mean per-token NLL over every gold response token.
    pub fn perplexity(&self, examples: &[TurnExample]) -> Result<f64> {
        if examples.is_empty() {
            return invalid("perplexity of an empty corpus");
        }
        let (mut nll, mut n) = (0.0f64, 0usize);
        let refs: Vec<&TurnExample> = examples.iter().collect();
        for chunk in refs.chunks(EVAL_CHUNK) {
            let b = PackedBatch::new(chunk);
            let mut g = Graph::new(&self.params);
            let l = self.logits(&mut g, &b)?;
            let lp = g.log_softmax_rows(l);
            let lp = g.value(lp);
            for (r, &y) in b.targets.iter().enumerate() {
                nll -= lp.get(r, y) as f64;
            }
            n += b.rows();
        }
        Ok((nll / n as f64).exp())
    }

    /// Decodes a response for `context` (already encoded with `encode_context`).
    pub fn generate(&self, context: &[usize], cfg: &DecodeConfig, forced: Option<usize>) -> Result<Generation> {
        cfg.validate()?;
        let items = self.vocab.item_range();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let src = SeqBatch::new(&[context]);
        let mut g = Graph::new(&self.params);
        let memory = self.net.encode(&mut g, &src)?;
        let mut prefix = vec![BOS];
        let mut out = Generation {
            tokens: Vec::new(),
            item_mass: Vec::new(),
            slots: Vec::new(),
        };
        if let Some(f) = forced {
            if f >= self.vocab.len() {
                return invalid(format!("forced token {f} outside vocabulary"));
            }
            prefix.push(f);
            out.tokens.push(f);
        }
        for _ in 0..cfg.max_new_tokens {
            if prefix.len() > self.max_len() {
                break;
            }
            let pb = SeqBatch::new(&[&prefix]);
            let h = self.net.decode_hidden(&mut g, &pb, memory, &src)?;
            let last = g.slice_rows(h, prefix.len() - 1, 1)?;
            let l = self.net.out.forward(&mut g, last)?;
            let p = softmax(g.value(l).row(0))?;
            out.item_mass.push(p[items.clone()].iter().sum());
            let next = match cfg.strategy {
                Strategy::Greedy => top_k(&p, 1)[0],
                Strategy::TopK { k } => {
                    let cand = top_k(&p, k.min(p.len()));
                    let w = WeightedIndex::new(cand.iter().map(|&c| p[c].max(0.0) as f64 + 1e-12))
                        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    cand[w.sample(&mut rng)]
                }
            };
            if next == EOS {
                break;
            }
            if items.contains(&next) {
                let ip = &p[items.clone()];
                let ranked = top_k(ip, cfg.candidates.min(ip.len()));
                out.slots.push(ranked.into_iter().map(|i| (i, ip[i])).collect());
            }
            prefix.push(next);
            out.tokens.push(next);
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, role: &str, seed: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: KIND.into(),
            config: serde_json::json!({ "role": role, "model": self.config }),
            seed,
            vocab: Some(self.vocab.clone()),
            params: self.params.clone(),
        })
    }

    /// Restores a model and returns it with the role it was saved under.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<(Self, String)> {
        c.expect_kind(KIND)?;
        #[derive(Deserialize)]
        struct Echo {
            role: String,
            model: LmConfig,
        }
        let e: Echo = c.config_as()?;
        let vocab = c
            .vocab
            .clone()
            .ok_or_else(|| Error::Checkpoint("language model checkpoint without a vocabulary".into()))?;
        let mut m = LanguageModel::new(vocab, e.model, c.seed)?;
        c.restore_into(&mut m.params)?;
        Ok((m, e.role))
    }
}

fn check_examples(model: &LanguageModel, examples: &[TurnExample]) -> Result<()> {
    if examples.is_empty() {
        return invalid("no training examples");
    }
    let max = model.max_len();
    for e in examples {
        if e.context.len() > max || e.decoder_input().len() > max {
            return invalid(format!("dialogue {} turn {} exceeds max_len {max}", e.dialogue, e.turn));
        }
    }
    Ok(())
}

/// Mini-batch training; `loss` turns the batch logits into a scalar. It also
/// receives the example indices of the batch.
pub fn fit<F>(model: &mut LanguageModel, examples: &[TurnExample], seed: u64, mut loss: F) -> Result<TrainLog>
where
    F: FnMut(&mut Graph<'_, f32>, Var, &[usize], &[&TurnExample], &PackedBatch) -> Result<Var>,
{
    check_examples(model, examples)?;
    let cfg = model.config.train.clone();
    let mut params = std::mem::replace(&mut model.params, ParamStore::new());
    let view: &LanguageModel = model;
    let out = train::run(&mut params, examples.len(), &cfg, seed, |g, idx| {
        let batch: Vec<&TurnExample> = idx.iter().map(|&i| &examples[i]).collect();
        let packed = PackedBatch::new(&batch);
        let logits = view.logits(g, &packed)?;
        loss(g, logits, idx, &batch, &packed)
    });
    model.params = params;
    out
}

/// Maximum-likelihood training on the gold responses: per-response mean
/// token cross-entropy, averaged over the batch.
pub fn train_language_model(model: &mut LanguageModel, examples: &[TurnExample], seed: u64) -> Result<TrainLog> {
    let v = model.vocab.len();
    fit(model, examples, seed, |g, logits, _, _, b| {
        let logp = g.log_softmax_rows(logits);
        Ok(g.soft_cross_entropy(logp, b.one_hot(v), b.row_weights())?)
    })
}

//! Recommendation teacher: relational graph convolution over the item graph,
//! plain graph convolution over the word graph, attentive pooling of the
//! mentioned nodes, a sigmoid gate fusing the two pooled vectors, and a
//! softmax over inner products with every item.

use std::sync::Arc;

use conkd_nn::functional::{softmax, top_k};
use conkd_nn::layers::Linear;
use conkd_nn::params::{normal, uniform_fan_in};
use conkd_nn::{Csr, Float, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{KnowledgeGraph, TurnExample};
use crate::error::{invalid, Error, Result};
use crate::train::{self, TrainConfig, TrainLog};

pub const KIND: &str = "rec_teacher";

/// `A_r[tail, head] = 1` for every triple `(head, r, tail)`, so row `e` of
/// `A_r H` sums the states of the nodes sending relation `r` into `e`. With
/// `inverse`, relation `R + r` carries the reversed edges.
pub fn relation_adjacency<T: Float>(kg: &KnowledgeGraph, inverse: bool) -> Result<Vec<Csr<T>>> {
    let nr = kg.n_relations();
    let mut trip: Vec<Vec<(usize, usize, T)>> = vec![Vec::new(); if inverse { 2 * nr } else { nr }];
    for t in &kg.triples {
        trip[t.rel].push((t.tail, t.head, T::one()));
        if inverse {
            trip[nr + t.rel].push((t.head, t.tail, T::one()));
        }
    }
    let n = kg.n_nodes();
    trip.iter().map(|tr| Csr::from_triplets(n, n, tr).map_err(Error::from)).collect()
}

/// `D^-1/2 (A + I) D^-1/2` of the undirected, deduplicated graph.
pub fn normalized_adjacency<T: Float>(kg: &KnowledgeGraph) -> Result<Csr<T>> {
    let nbrs = kg.neighbors();
    let deg: Vec<f64> = nbrs.iter().map(|n| n.len() as f64 + 1.0).collect();
    let mut trip = Vec::new();
    for (i, ns) in nbrs.iter().enumerate() {
        trip.push((i, i, T::lit(1.0 / deg[i])));
        for &j in ns {
            trip.push((i, j, T::lit(1.0 / (deg[i] * deg[j]).sqrt())));
        }
    }
    Ok(Csr::from_triplets(kg.n_nodes(), kg.n_nodes(), &trip)?)
}

/// `ReLU(sum_r A_r H W_r + H W)`.
pub fn rgcn_layer<T: Float>(g: &mut Graph<'_, T>, h: Var, adj: &[Arc<Csr<T>>], w_rel: &[Var], w_self: Var) -> Result<Var> {
    if adj.len() != w_rel.len() {
        return invalid(format!("{} relations in the graph but {} relation weights", adj.len(), w_rel.len()));
    }
    let mut acc = g.matmul(h, w_self)?;
    for (a, &w) in adj.iter().zip(w_rel) {
        if a.nnz() == 0 {
            continue;
        }
        let hw = g.matmul(h, w)?;
        let msg = g.spmm(a.clone(), hw)?;
        acc = g.add(acc, msg)?;
    }
    Ok(g.relu(acc))
}

/// `ReLU(Â H W)` with a precomputed normalized adjacency `Â`.
pub fn gcn_layer<T: Float>(g: &mut Graph<'_, T>, h: Var, norm_adj: &Arc<Csr<T>>, w: Var) -> Result<Var> {
    let hw = g.matmul(h, w)?;
    let agg = g.spmm(norm_adj.clone(), hw)?;
    Ok(g.relu(agg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecConfig {
    pub hidden: usize,
    pub gnn_layers: usize,
    /// Adds reversed copies of every relation so items hear from their attributes.
    pub inverse_relations: bool,
    pub train: TrainConfig,
}

impl Default for RecConfig {
    fn default() -> Self {
        RecConfig {
            hidden: 32,
            gnn_layers: 1,
            inverse_relations: true,
            train: TrainConfig {
                epochs: 30,
                batch_size: 32,
                lr: 1e-2,
                clip_norm: 1.0,
            },
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    item_h0: ParamId,
    item_rel: Vec<Vec<ParamId>>,
    item_self: Vec<ParamId>,
    word_h0: ParamId,
    word_w: Vec<ParamId>,
    item_pool: Pooling,
    word_pool: Pooling,
    gate: Linear,
    cold_start: ParamId,
}

#[derive(Clone, Debug)]
struct Pooling {
    m: Linear,
    w: Linear,
}

impl Pooling {
    fn new(store: &mut ParamStore<f32>, name: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Pooling {
            m: Linear::new(store, &format!("{name}.m"), d, d, false, rng)?,
            w: Linear::new(store, &format!("{name}.w"), d, 1, false, rng)?,
        })
    }

    /// `softmax(w^T tanh(M h_i))`-weighted sum of the selected rows.
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, states: Var, ids: &[usize]) -> Result<Var> {
        let rows = g.gather(states, ids)?;
        let m = self.m.forward(g, rows)?;
        let t = g.tanh(m);
        let s = self.w.forward(g, t)?;
        let s = g.reshape(s, vec![1, ids.len()])?;
        let a = g.softmax_rows(s);
        Ok(g.matmul(a, rows)?)
    }
}

/// Pooled vectors and fused user representation for one history.
pub struct UserRep {
    pub p: Var,
    pub beta: Option<Var>,
    pub v: Option<Var>,
    pub n: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct RecTeacher {
    pub config: RecConfig,
    pub item_kg: KnowledgeGraph,
    pub word_kg: KnowledgeGraph,
    pub n_items: usize,
    pub params: ParamStore<f32>,
    layout: Layout,
    item_adj: Vec<Arc<Csr<f32>>>,
    word_adj: Arc<Csr<f32>>,
}

impl RecTeacher {
    pub fn new(config: RecConfig, item_kg: KnowledgeGraph, word_kg: KnowledgeGraph, n_items: usize, seed: u64) -> Result<Self> {
        if config.hidden == 0 {
            return invalid("hidden size must be at least 1");
        }
        if n_items == 0 || n_items > item_kg.n_nodes() {
            return invalid(format!("{n_items} items for an item graph of {} nodes", item_kg.n_nodes()));
        }
        let d = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let mut h0 = normal::<f32>(item_kg.n_nodes().max(1), d, 0.02, &mut rng);
        // items without any edge start at zero
        let connected = item_kg.connected();
        for i in 0..n_items {
            if !connected[i] {
                h0.row_mut(i).fill(0.0);
            }
        }
        let item_h0 = s.add("item.h0", h0)?;
        let nrel = if config.inverse_relations { 2 * item_kg.n_relations() } else { item_kg.n_relations() };
        let mut item_rel = Vec::new();
        let mut item_self = Vec::new();
        for l in 0..config.gnn_layers {
            item_rel.push(
                (0..nrel)
                    .map(|r| s.add(format!("item.l{l}.rel{r}"), uniform_fan_in(d, d, d, &mut rng)))
                    .collect::<conkd_nn::Result<Vec<_>>>()?,
            );
            item_self.push(s.add(format!("item.l{l}.self"), uniform_fan_in(d, d, d, &mut rng))?);
        }
        let word_h0 = s.add("word.h0", normal(word_kg.n_nodes().max(1), d, 0.02, &mut rng))?;
        let word_w = (0..config.gnn_layers)
            .map(|l| s.add(format!("word.l{l}.w"), uniform_fan_in(d, d, d, &mut rng)))
            .collect::<conkd_nn::Result<Vec<_>>>()?;
        let item_pool = Pooling::new(&mut s, "item.pool", d, &mut rng)?;
        let word_pool = Pooling::new(&mut s, "word.pool", d, &mut rng)?;
        let gate = Linear::new(&mut s, "gate", 2 * d, 1, false, &mut rng)?;
        let cold_start = s.add("cold_start", normal(1, d, 0.02, &mut rng))?;
        let item_adj = relation_adjacency(&item_kg, config.inverse_relations)?.into_iter().map(Arc::new).collect();
        let word_adj = Arc::new(normalized_adjacency(&word_kg)?);
        Ok(RecTeacher {
            config,
            item_kg,
            word_kg,
            n_items,
            params: s,
            layout: Layout {
                item_h0,
                item_rel,
                item_self,
                word_h0,
                word_w,
                item_pool,
                word_pool,
                gate,
                cold_start,
            },
            item_adj,
            word_adj,
        })
    }

    /// Final-layer node states of both graphs.
    pub fn encode_graphs(&self, g: &mut Graph<'_, f32>) -> Result<(Var, Var)> {
        let lay = &self.layout;
        let mut h = g.param(lay.item_h0);
        for (rel, &wself) in lay.item_rel.iter().zip(&lay.item_self) {
            let ws: Vec<Var> = rel.iter().map(|&w| g.param(w)).collect();
            let wself = g.param(wself);
            h = rgcn_layer(g, h, &self.item_adj, &ws, wself)?;
        }
        let mut wh = g.param(lay.word_h0);
        for &w in &lay.word_w {
            let w = g.param(w);
            wh = gcn_layer(g, wh, &self.word_adj, w)?;
        }
        Ok((h, wh))
    }

    pub fn user_representation(&self, g: &mut Graph<'_, f32>, item_states: Var, word_states: Var, items: &[usize], words: &[usize]) -> Result<UserRep> {
        let lay = &self.layout;
        if items.is_empty() && words.is_empty() {
            let p = g.param(lay.cold_start);
            return Ok(UserRep { p, beta: None, v: None, n: None });
        }
        let d = self.config.hidden;
        let n = if items.is_empty() {
            g.constant(Tensor::zeros(&[1, d]))
        } else {
            lay.item_pool.forward(g, item_states, items)?
        };
        let v = if words.is_empty() {
            g.constant(Tensor::zeros(&[1, d]))
        } else {
            lay.word_pool.forward(g, word_states, words)?
        };
        let vn = g.concat_cols(v, n)?;
        let z = lay.gate.forward(g, vn)?;
        let beta = g.sigmoid(z);
        let one_minus = g.one_minus(beta);
        let bv = g.scale_by(v, beta)?;
        let bn = g.scale_by(n, one_minus)?;
        let p = g.add(bv, bn)?;
        Ok(UserRep {
            p,
            beta: Some(beta),
            v: Some(v),
            n: Some(n),
        })
    }

    /// Item logits `p_u^T n_i`, one row per history.
    pub fn logits(&self, g: &mut Graph<'_, f32>, histories: &[(&[usize], &[usize])]) -> Result<Var> {
        if histories.is_empty() {
            return invalid("no histories to score");
        }
        let (hi, hw) = self.encode_graphs(g)?;
        let mut rows = Vec::with_capacity(histories.len());
        for (items, words) in histories {
            rows.push(self.user_representation(g, hi, hw, items, words)?.p);
        }
        let p = g.concat_rows(&rows)?;
        let item_emb = g.slice_rows(hi, 0, self.n_items)?;
        Ok(g.matmul_t(p, item_emb)?)
    }

    /// Item distributions for a batch of histories (evaluation mode).
    pub fn distributions(&self, histories: &[(&[usize], &[usize])]) -> Result<Vec<Vec<f32>>> {
        self.distributions_at(histories, 1.0)
    }

    /// As [`RecTeacher::distributions`], with logits divided by `tau`.
    pub fn distributions_at(&self, histories: &[(&[usize], &[usize])], tau: f32) -> Result<Vec<Vec<f32>>> {
        let mut g = Graph::new(&self.params);
        let l = self.logits(&mut g, histories)?;
        let mut t = g.value(l).clone();
        if tau != 1.0 {
            t.scale_assign(1.0 / tau);
        }
        (0..t.rows()).map(|r| softmax(t.row(r)).map_err(Error::from)).collect()
    }

    pub fn distribution(&self, items: &[usize], words: &[usize]) -> Result<Vec<f32>> {
        Ok(self.distributions(&[(items, words)])?.remove(0))
    }

    pub fn to_checkpoint(&self, seed: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: KIND.into(),
            config: serde_json::json!({
                "model": self.config,
                "n_items": self.n_items,
                "item_kg": self.item_kg,
                "word_kg": self.word_kg,
            }),
            seed,
            vocab: None,
            params: self.params.clone(),
        })
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(KIND)?;
        #[derive(Deserialize)]
        struct Echo {
            model: RecConfig,
            n_items: usize,
            item_kg: KnowledgeGraph,
            word_kg: KnowledgeGraph,
        }
        let mut e: Echo = c.config_as()?;
        e.item_kg.reindex();
        e.word_kg.reindex();
        let mut m = RecTeacher::new(e.model, e.item_kg, e.word_kg, e.n_items, c.seed)?;
        c.restore_into(&mut m.params)?;
        Ok(m)
    }
}

/// `k` items by descending score, ties by ascending item index.
pub fn recommend_topk(dist: &[f32], k: usize) -> Result<Vec<usize>> {
    if k > dist.len() {
        return invalid(format!("k = {k} exceeds {} items", dist.len()));
    }
    Ok(top_k(dist, k))
}

/// Normalized multi-hot target: each gold mention adds equal mass.
pub fn gold_target(gold: &[usize], n_items: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; n_items];
    for &g in gold {
        t[g] += 1.0;
    }
    let s: f32 = t.iter().sum();
    if s > 0.0 {
        t.iter_mut().for_each(|x| *x /= s);
    }
    t
}

/// Trains on every example with gold items.
pub fn train_recommender(model: &mut RecTeacher, examples: &[TurnExample], seed: u64) -> Result<TrainLog> {
    let rec: Vec<&TurnExample> = examples.iter().filter(|e| e.is_rec()).collect();
    if rec.is_empty() {
        return invalid("no recommendation turns to train on");
    }
    if let Some(e) = rec.iter().find(|e| e.gold_items.iter().any(|&g| g >= model.n_items)) {
        return invalid(format!("gold item out of range in dialogue {} turn {}", e.dialogue, e.turn));
    }
    let n_items = model.n_items;
    let cfg = model.config.train.clone();
    let mut params = std::mem::replace(&mut model.params, ParamStore::new());
    let view: &RecTeacher = model;
    let out = train::run(&mut params, rec.len(), &cfg, seed, |g, batch| {
        let hist: Vec<(&[usize], &[usize])> = batch
            .iter()
            .map(|&i| (rec[i].mentioned_items.as_slice(), rec[i].mentioned_words.as_slice()))
            .collect();
        let logits = view.logits(g, &hist)?;
        let logp = g.log_softmax_rows(logits);
        let mut target = Vec::with_capacity(batch.len() * n_items);
        for &i in batch {
            target.extend(gold_target(&rec[i].gold_items, n_items));
        }
        let target = Tensor::matrix(batch.len(), n_items, target)?;
        let w = vec![1.0 / batch.len() as f32; batch.len()];
        Ok(g.soft_cross_entropy(logp, target, w)?)
    });
    model.params = params;
    out
}

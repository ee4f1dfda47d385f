//! Evaluation metrics: recommendation recall, in-response recall/precision,
//! recommendation ratio, distinct n-grams, perplexity baselines, mismatch
//! reports, gate diagnostics, 2-hop relevance, item refilling and latency.

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::hash::Hash;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::conkd::item_mass;
use crate::data::{KnowledgeGraph, TurnExample, Vocabulary};
use crate::dialogue::{DecodeConfig, LanguageModel};
use crate::error::{invalid, Result};

pub const STANDARD_KS: [usize; 3] = [1, 10, 50];

/// One generated agent turn with its per-slot item candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub tokens: Vec<usize>,
    /// Ranked (item, probability) candidates for every emitted item slot.
    pub slots: Vec<Vec<(usize, f32)>>,
    /// Gold item mentions, in order.
    pub gold: Vec<usize>,
}

fn check_k(k: usize) {
    if !STANDARD_KS.contains(&k) {
        warn!("k = {k} is not one of the standard cutoffs 1, 10, 50");
    }
}

/// Fraction of gold mentions found in the top-`k` of their turn's ranking.
pub fn recall_at_k(rankings: &[Vec<usize>], gold: &[Vec<usize>], k: usize) -> Result<f64> {
    check_k(k);
    if rankings.len() != gold.len() {
        return invalid(format!("{} rankings for {} turns", rankings.len(), gold.len()));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (r, g) in rankings.iter().zip(gold) {
        let top = &r[..k.min(r.len())];
        for item in g {
            total += 1;
            hit += top.contains(item) as usize;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponseMetrics {
    /// Correct slots over gold mentions.
    pub rer: f64,
    /// Correct slots over generated item slots.
    pub prr: f64,
    pub f1: f64,
    pub rec_ratio: f64,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

fn score_records<F>(records: &[GenerationRecord], k: usize, mut correct: F) -> ResponseMetrics
where
    F: FnMut(usize, usize, &[(usize, f32)]) -> bool,
{
    check_k(k);
    let (mut hits, mut gold, mut slots, mut rec_turns) = (0usize, 0usize, 0usize, 0usize);
    for (ri, r) in records.iter().enumerate() {
        gold += r.gold.len();
        slots += r.slots.len();
        rec_turns += !r.slots.is_empty() as usize;
        for (j, s) in r.slots.iter().enumerate().take(r.gold.len()) {
            hits += correct(ri, j, &s[..k.min(s.len())]) as usize;
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let rer = rate(hits, gold);
    let prr = rate(hits, slots);
    ResponseMetrics {
        rer,
        prr,
        f1: harmonic_mean(rer, prr),
        rec_ratio: rate(rec_turns, records.len()),
    }
}

/// Pairs the j-th generated item slot with the j-th gold mention of each turn.
pub fn response_metrics(records: &[GenerationRecord], k: usize) -> ResponseMetrics {
    score_records(records, k, |ri, j, top| {
        let g = records[ri].gold[j];
        top.iter().any(|&(i, _)| i == g)
    })
}

/// As [`response_metrics`], where a slot is also correct when its top-`k`
/// holds any item of `relevant[record]`.
pub fn relaxed_response_metrics(records: &[GenerationRecord], relevant: &[BTreeSet<usize>], k: usize) -> Result<ResponseMetrics> {
    if relevant.len() != records.len() {
        return invalid(format!("{} relevance sets for {} records", relevant.len(), records.len()));
    }
    Ok(score_records(records, k, |ri, j, top| {
        let g = records[ri].gold[j];
        top.iter().any(|&(i, _)| i == g || relevant[ri].contains(&i))
    }))
}

fn ngrams<T>(r: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    r.windows(n.max(1)).filter(move |_| n > 0)
}

/// Distinct n-grams over all responses divided by the total n-gram count.
pub fn dist_n<T: Eq + Hash>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return invalid("n must be at least 1");
    }
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        for g in ngrams(r, n) {
            total += 1;
            seen.insert(g);
        }
    }
    Ok(if total == 0 { 0.0 } else { seen.len() as f64 / total as f64 })
}

/// Distinct n-grams over all responses divided by the number of responses.
pub fn legacy_dist_n<T: Eq + Hash>(responses: &[Vec<T>], n: usize) -> Result<f64> {
    if n == 0 {
        return invalid("n must be at least 1");
    }
    if responses.is_empty() {
        return Ok(0.0);
    }
    let seen: HashSet<&[T]> = responses.iter().flat_map(|r| ngrams(r, n)).collect();
    Ok(seen.len() as f64 / responses.len() as f64)
}

/// Word tokens of a generated response (items and special tokens dropped).
pub fn word_tokens(tokens: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    tokens.iter().copied().filter(|&t| vocab.is_word(t)).collect()
}

/// Unigram model with additive smoothing `alpha`, fit on `train` and scored on `eval`.
pub fn unigram_perplexity(train: &[Vec<usize>], eval: &[Vec<usize>], vocab_len: usize, alpha: f64) -> Result<f64> {
    let mut counts = vec![0.0f64; vocab_len];
    for &t in train.iter().flatten() {
        if t >= vocab_len {
            return invalid(format!("token {t} outside vocabulary of {vocab_len}"));
        }
        counts[t] += 1.0;
    }
    let total: f64 = counts.iter().sum::<f64>() + alpha * vocab_len as f64;
    if total == 0.0 {
        return invalid("empty unigram training corpus");
    }
    let (mut nll, mut n) = (0.0, 0usize);
    for &t in eval.iter().flatten() {
        if t >= vocab_len {
            return invalid(format!("token {t} outside vocabulary of {vocab_len}"));
        }
        nll -= ((counts[t] + alpha) / total).ln();
        n += 1;
    }
    if n == 0 {
        return invalid("empty evaluation corpus");
    }
    Ok((nll / n as f64).exp())
}

/// Relative decrease `(R - ReR) / R` in percent; absent when `R` is 0.
pub fn relative_decrease(r: f64, rer: f64) -> Option<f64> {
    (r != 0.0).then(|| 100.0 * (r - rer) / r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchRow {
    pub k: usize,
    pub recall: f64,
    pub rer: f64,
    pub decrease_percent: Option<f64>,
}

pub fn mismatch_report(ks: &[usize], recall: &[f64], rer: &[f64]) -> Result<Vec<MismatchRow>> {
    if ks.len() != recall.len() || ks.len() != rer.len() {
        return invalid("mismatch report needs one recall and one ReR value per k");
    }
    Ok(ks
        .iter()
        .zip(recall.iter().zip(rer))
        .map(|(&k, (&r, &e))| MismatchRow {
            k,
            recall: r,
            rer: e,
            decrease_percent: relative_decrease(r, e),
        })
        .collect())
}

/// Mean teacher-forced item mass over steps whose gold token is an item
/// (`lambda_r`) and over all other steps (`lambda_v`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDiagnostics {
    pub lambda_r: Option<f64>,
    pub lambda_v: Option<f64>,
}

pub fn gate_diagnostics(model: &LanguageModel, examples: &[TurnExample]) -> Result<GateDiagnostics> {
    let items = model.vocab.item_range();
    let refs: Vec<&TurnExample> = examples.iter().collect();
    let dists = model.teacher_forced(&refs, 1.0)?;
    let (mut s, mut c) = ([0.0f64; 2], [0usize; 2]);
    for (e, m) in examples.iter().zip(&dists) {
        for (t, y) in e.decoder_target().into_iter().enumerate() {
            let i = items.contains(&y) as usize;
            s[i] += item_mass(m.row(t), items.clone()) as f64;
            c[i] += 1;
        }
    }
    let mean = |i: usize| (c[i] > 0).then(|| s[i] / c[i] as f64);
    Ok(GateDiagnostics {
        lambda_r: mean(1),
        lambda_v: mean(0),
    })
}

/// Items within two undirected hops of any mentioned item, excluding the
/// mentioned items. Item `i` is node `i` of the item graph.
pub fn relevant_items_2hop(kg: &KnowledgeGraph, n_items: usize, mentioned: &[usize]) -> BTreeSet<usize> {
    let nbrs = kg.neighbors();
    let mut depth = vec![usize::MAX; kg.n_nodes()];
    let mut queue = VecDeque::new();
    for &m in mentioned {
        if m < depth.len() && depth[m] != 0 {
            depth[m] = 0;
            queue.push_back(m);
        }
    }
    while let Some(u) = queue.pop_front() {
        if depth[u] == 2 {
            continue;
        }
        for &v in &nbrs[u] {
            if depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                queue.push_back(v);
            }
        }
    }
    (0..n_items.min(depth.len())).filter(|&i| depth[i] == 1 || depth[i] == 2).collect()
}

/// Replaces item tokens, in order, with successive entries of `ranking`
/// (item indices, best first). Slots beyond the ranking keep their token.
pub fn refill_items(tokens: &[usize], ranking: &[usize], vocab: &Vocabulary) -> Vec<usize> {
    let mut next = ranking.iter();
    tokens
        .iter()
        .map(|&t| {
            if vocab.is_item(t) {
                next.next().map(|&i| vocab.item_token_id(i)).unwrap_or(t)
            } else {
                t
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub ms_per_token: f64,
    pub tokens: usize,
}

impl LatencyReport {
    pub fn display(&self) -> String {
        format!("{:.3} ms/token", self.ms_per_token)
    }
}

/// Greedy-decodes `contexts` round-robin until `min_tokens` decoding steps
/// have been timed, after `warmup` untimed generations.
pub fn latency_bench(model: &LanguageModel, contexts: &[Vec<usize>], min_tokens: usize, warmup: usize, max_new_tokens: usize) -> Result<LatencyReport> {
    if contexts.is_empty() {
        return invalid("latency benchmark needs at least one context");
    }
    let cfg = DecodeConfig {
        max_new_tokens,
        ..Default::default()
    };
    for c in contexts.iter().cycle().take(warmup) {
        model.generate(c, &cfg, None)?;
    }
    let mut tokens = 0usize;
    let start = Instant::now();
    for c in contexts.iter().cycle() {
        if tokens >= min_tokens {
            break;
        }
        tokens += model.generate(c, &cfg, None)?.item_mass.len();
    }
    let ms = start.elapsed().as_secs_f64() * 1000.0;
    Ok(LatencyReport {
        ms_per_token: ms / tokens.max(1) as f64,
        tokens,
    })
}

/// Everything reported for one system.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ks: Vec<usize>,
    /// Recommendation-module recall, when a separate module is evaluated.
    pub recall: Option<Vec<f64>>,
    pub rer: Vec<f64>,
    pub prr: Vec<f64>,
    pub f1: Vec<f64>,
    pub rec_ratio: f64,
    /// DIST-2, DIST-3, DIST-4.
    pub dist: Vec<f64>,
    pub legacy_dist: Vec<f64>,
    pub ppl: Option<f64>,
}

pub const DIST_NS: [usize; 3] = [2, 3, 4];

impl MetricReport {
    pub fn from_records(records: &[GenerationRecord], vocab: &Vocabulary, ks: &[usize], ppl: Option<f64>) -> Result<Self> {
        let words: Vec<Vec<usize>> = records.iter().map(|r| word_tokens(&r.tokens, vocab)).collect();
        let mut rep = MetricReport {
            ks: ks.to_vec(),
            ppl,
            ..Default::default()
        };
        for &k in ks {
            let m = response_metrics(records, k);
            rep.rer.push(m.rer);
            rep.prr.push(m.prr);
            rep.f1.push(m.f1);
            rep.rec_ratio = m.rec_ratio;
        }
        for n in DIST_NS {
            rep.dist.push(dist_n(&words, n)?);
            rep.legacy_dist.push(legacy_dist_n(&words, n)?);
        }
        Ok(rep)
    }

    pub fn f1_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.f1[i])
    }

    /// Copy with every value rounded to `digits` decimals.
    pub fn rounded(&self, digits: i32) -> Self {
        let p = 10f64.powi(digits);
        let r = |x: f64| (x * p).round() / p;
        let v = |xs: &[f64]| xs.iter().map(|&x| r(x)).collect::<Vec<_>>();
        MetricReport {
            ks: self.ks.clone(),
            recall: self.recall.as_deref().map(v),
            rer: v(&self.rer),
            prr: v(&self.prr),
            f1: v(&self.f1),
            rec_ratio: r(self.rec_ratio),
            dist: v(&self.dist),
            legacy_dist: v(&self.legacy_dist),
            ppl: self.ppl.map(r),
        }
    }

    /// Aligned text table: recommendation columns, then dialogue columns.
    pub fn table(&self, name: &str) -> String {
        let mut head = vec!["system".to_string()];
        let mut row = vec![name.to_string()];
        let mut push = |h: String, v: String| {
            head.push(h);
            row.push(v);
        };
        if let Some(r) = &self.recall {
            for (k, x) in self.ks.iter().zip(r) {
                push(format!("R@{k}"), format!("{x:.3}"));
            }
        }
        for (label, xs) in [("ReR", &self.rer), ("PrR", &self.prr), ("F1", &self.f1)] {
            for (k, x) in self.ks.iter().zip(xs) {
                push(format!("{label}@{k}"), format!("{x:.3}"));
            }
        }
        push("RecRatio".into(), format!("{:.3}", self.rec_ratio));
        push("PPL".into(), self.ppl.map(|p| format!("{p:.3}")).unwrap_or_else(|| "-".into()));
        for (n, x) in DIST_NS.iter().zip(&self.dist) {
            push(format!("DIST-{n}"), format!("{x:.3}"));
        }
        for (n, x) in DIST_NS.iter().zip(&self.legacy_dist) {
            push(format!("legacy-DIST-{n}"), format!("{x:.3}"));
        }
        let w: Vec<usize> = head.iter().zip(&row).map(|(a, b)| a.len().max(b.len())).collect();
        let line = |cells: &[String]| cells.iter().zip(&w).map(|(c, &w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ");
        format!("{}\n{}\n", line(&head), line(&row))
    }
}

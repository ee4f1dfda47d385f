//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use conkd::data::{KnowledgeGraph, NodeKind, Triple};
use conkd::eval::{GenerationRecord, ResponseMetrics};
use conkd::recommender::{gcn_layer, normalized_adjacency, relation_adjacency, rgcn_layer};
use conkd_nn::{Graph, ParamStore, Tensor};
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn graph(n: usize, n_rel: usize, edges: &[(usize, usize, usize)]) -> KnowledgeGraph {
    KnowledgeGraph::new(
        (0..n).map(|i| format!("n{i}")).collect(),
        vec![NodeKind::Item; n],
        (0..n_rel).map(|r| format!("r{r}")).collect(),
        edges.iter().map(|&(head, rel, tail)| Triple { head, rel, tail }).collect(),
    )
    .unwrap()
}

pub fn random_graph(rng: &mut impl Rng, max_nodes: usize, max_rel: usize) -> KnowledgeGraph {
    let n = rng.random_range(1..=max_nodes);
    let nr = rng.random_range(1..=max_rel);
    let m = rng.random_range(0..=2 * n);
    let edges: Vec<_> = (0..m).map(|_| (rng.random_range(0..n), rng.random_range(0..nr), rng.random_range(0..n))).collect();
    graph(n, nr, &edges)
}

pub fn random_mat(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    (0..r).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n).map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn relu(a: Mat) -> Mat {
    a.into_iter().map(|r| r.into_iter().map(|x| x.max(0.0)).collect()).collect()
}

fn tensor(m: &Mat) -> Tensor<f64> {
    Tensor::matrix(m.len(), m[0].len(), m.iter().flatten().copied().collect()).unwrap()
}

/// `ReLU(H W0 + sum_r A_r H W_r)` with `A_r[t][h]` counting the `h -r-> t`
/// edges; inverse relations follow the forward ones.
pub fn dense_rgcn(kg: &KnowledgeGraph, inverse: bool, h: &Mat, w_rel: &[Mat], w_self: &Mat) -> Mat {
    let n = kg.n_nodes();
    let nr = kg.n_relations();
    let mut out = mul(h, w_self);
    for (r, w) in w_rel.iter().enumerate() {
        let mut a = vec![vec![0.0; n]; n];
        for t in &kg.triples {
            if r < nr && t.rel == r {
                a[t.tail][t.head] += 1.0;
            }
            if inverse && r >= nr && t.rel == r - nr {
                a[t.head][t.tail] += 1.0;
            }
        }
        out = add(&out, &mul(&a, &mul(h, w)));
    }
    relu(out)
}

/// `ReLU(D^-1/2 (A + I) D^-1/2 H W)` on the simple undirected graph.
pub fn dense_gcn(kg: &KnowledgeGraph, h: &Mat, w: &Mat) -> Mat {
    let n = kg.n_nodes();
    let mut a = vec![vec![0.0; n]; n];
    for t in &kg.triples {
        a[t.head][t.tail] = 1.0;
        a[t.tail][t.head] = 1.0;
    }
    for (i, row) in a.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let d: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let norm: Mat = (0..n).map(|i| (0..n).map(|j| a[i][j] / (d[i] * d[j]).sqrt()).collect()).collect();
    relu(mul(&norm, &mul(h, w)))
}

pub fn lib_rgcn(kg: &KnowledgeGraph, inverse: bool, h: &Mat, w_rel: &[Mat], w_self: &Mat) -> Mat {
    let adj: Vec<_> = relation_adjacency::<f64>(kg, inverse).unwrap().into_iter().map(Arc::new).collect();
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let hv = g.constant(tensor(h));
    let ws: Vec<_> = w_rel.iter().map(|w| g.constant(tensor(w))).collect();
    let w0 = g.constant(tensor(w_self));
    let o = rgcn_layer(&mut g, hv, &adj, &ws, w0).unwrap();
    let t = g.value(o);
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn lib_gcn(kg: &KnowledgeGraph, h: &Mat, w: &Mat) -> Mat {
    let adj = Arc::new(normalized_adjacency::<f64>(kg).unwrap());
    let s = ParamStore::new();
    let mut g = Graph::new(&s);
    let hv = g.constant(tensor(h));
    let wv = g.constant(tensor(w));
    let o = gcn_layer(&mut g, hv, &adj, wv).unwrap();
    let t = g.value(o);
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Checks one graph against both dense formulations; returns the worst error.
pub fn message_passing_error(kg: &KnowledgeGraph, rng: &mut impl Rng) -> f64 {
    let n = kg.n_nodes();
    let d = 3;
    let h = random_mat(rng, n, d);
    let mut worst: f64 = 0.0;
    for inverse in [false, true] {
        let nr = kg.n_relations() * if inverse { 2 } else { 1 };
        let ws: Vec<Mat> = (0..nr).map(|_| random_mat(rng, d, d)).collect();
        let w0 = random_mat(rng, d, d);
        worst = worst.max(max_abs_diff(&lib_rgcn(kg, inverse, &h, &ws, &w0), &dense_rgcn(kg, inverse, &h, &ws, &w0)));
    }
    let w = random_mat(rng, d, d);
    worst.max(max_abs_diff(&lib_gcn(kg, &h, &w), &dense_gcn(kg, &h, &w)))
}

pub fn brute_recall(rankings: &[Vec<usize>], gold: &[Vec<usize>], k: usize) -> f64 {
    let mut hit = 0;
    let mut total = 0;
    for t in 0..gold.len() {
        for &item in &gold[t] {
            total += 1;
            if let Some(pos) = rankings[t].iter().position(|&x| x == item) {
                if pos < k {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

pub fn brute_response_metrics(records: &[GenerationRecord], k: usize) -> ResponseMetrics {
    let gold: usize = records.iter().map(|r| r.gold.len()).sum();
    let slots: usize = records.iter().map(|r| r.slots.len()).sum();
    let mut hits = 0;
    for r in records {
        for j in 0..r.slots.len().min(r.gold.len()) {
            let mut cand: Vec<usize> = r.slots[j].iter().map(|c| c.0).collect();
            cand.truncate(k);
            if cand.contains(&r.gold[j]) {
                hits += 1;
            }
        }
    }
    let rer = if gold == 0 { 0.0 } else { hits as f64 / gold as f64 };
    let prr = if slots == 0 { 0.0 } else { hits as f64 / slots as f64 };
    let f1 = if rer + prr == 0.0 { 0.0 } else { 2.0 * rer * prr / (rer + prr) };
    let with = records.iter().filter(|r| !r.slots.is_empty()).count();
    ResponseMetrics {
        rer,
        prr,
        f1,
        rec_ratio: if records.is_empty() { 0.0 } else { with as f64 / records.len() as f64 },
    }
}

fn all_ngrams(responses: &[Vec<usize>], n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for r in responses {
        if r.len() >= n {
            for i in 0..=r.len() - n {
                out.push(r[i..i + n].to_vec());
            }
        }
    }
    out
}

pub fn brute_dist(responses: &[Vec<usize>], n: usize) -> f64 {
    let all = all_ngrams(responses, n);
    let mut uniq = all.clone();
    uniq.sort();
    uniq.dedup();
    if all.is_empty() {
        0.0
    } else {
        uniq.len() as f64 / all.len() as f64
    }
}

pub fn brute_legacy_dist(responses: &[Vec<usize>], n: usize) -> f64 {
    let mut uniq = all_ngrams(responses, n);
    uniq.sort();
    uniq.dedup();
    if responses.is_empty() {
        0.0
    } else {
        uniq.len() as f64 / responses.len() as f64
    }
}

/// Items reachable in one or two undirected hops, by adjacency-matrix powers.
pub fn brute_2hop(kg: &KnowledgeGraph, n_items: usize, mentioned: &[usize]) -> BTreeSet<usize> {
    let n = kg.n_nodes();
    let mut a = vec![vec![false; n]; n];
    for t in &kg.triples {
        if t.head != t.tail {
            a[t.head][t.tail] = true;
            a[t.tail][t.head] = true;
        }
    }
    let src: Vec<usize> = mentioned.iter().copied().filter(|&m| m < n).collect();
    let mut out = BTreeSet::new();
    for j in 0..n.min(n_items) {
        if src.contains(&j) {
            continue;
        }
        let one = src.iter().any(|&m| a[m][j]);
        let two = src.iter().any(|&m| (0..n).any(|x| a[m][x] && a[x][j]));
        if one || two {
            out.insert(j);
        }
    }
    out
}

pub fn random_records(rng: &mut impl Rng, n_items: usize) -> Vec<GenerationRecord> {
    let n = rng.random_range(0..6);
    (0..n)
        .map(|t| {
            let slots = (0..rng.random_range(0..4))
                .map(|_| {
                    let mut c: Vec<usize> = (0..n_items).collect();
                    for i in (1..c.len()).rev() {
                        c.swap(i, rng.random_range(0..=i));
                    }
                    c.truncate(rng.random_range(1..=n_items));
                    c.into_iter().map(|i| (i, 1.0 / n_items as f32)).collect()
                })
                .collect();
            GenerationRecord {
                dialogue_id: format!("d{t}"),
                turn: t,
                tokens: vec![],
                slots,
                gold: (0..rng.random_range(0..4)).map(|_| rng.random_range(0..n_items)).collect(),
            }
        })
        .collect()
}

pub fn random_responses(rng: &mut impl Rng) -> Vec<Vec<usize>> {
    (0..rng.random_range(0..6)).map(|_| (0..rng.random_range(0..7)).map(|_| rng.random_range(0..4)).collect()).collect()
}

pub fn random_distribution(rng: &mut impl Rng, v: usize) -> Vec<f64> {
    // occasionally concentrate mass to exercise the extremes
    let sharp = rng.random_bool(0.2);
    let x: Vec<f64> = (0..v)
        .map(|_| {
            let u: f64 = rng.random_range(0.0..1.0);
            if sharp {
                u.powi(8)
            } else {
                u
            }
        })
        .collect();
    let s: f64 = x.iter().sum::<f64>().max(1e-300);
    x.into_iter().map(|y| y / s).collect()
}

//! Gated two-teacher distillation into a single student language model.
//!
//! At every target position the dialogue teacher's probability mass on item
//! tokens yields a gate `lambda`. The student minimizes
//! `(1 - gamma) NLL + gamma [(1 - lambda) KD_dial + lambda KD_rec]`.

use std::ops::Range;

use conkd_nn::{Float, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::TurnExample;
use crate::dialogue::{fit, LanguageModel, PackedBatch};
use crate::error::{invalid, Result};
use crate::recommender::RecTeacher;
use crate::train::TrainLog;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GateMode {
    Hard,
    Soft,
    Fixed { value: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub gate: GateMode,
    pub eta: f32,
    pub gamma: f32,
    pub tau: f32,
    pub use_dialogue_teacher: bool,
    pub use_rec_teacher: bool,
    pub use_special_tokens: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            gate: GateMode::Hard,
            eta: 0.3,
            gamma: 0.6,
            tau: 1.0,
            use_dialogue_teacher: true,
            use_rec_teacher: true,
            use_special_tokens: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta) {
            return invalid(format!("eta = {} outside [0, 1]", self.eta));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return invalid(format!("gamma = {} outside [0, 1]", self.gamma));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return invalid(format!("temperature {} must be positive", self.tau));
        }
        if let GateMode::Fixed { value } = self.gate {
            if !(0.0..=1.0).contains(&value) {
                return invalid(format!("fixed gate {value} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Gate value for one next-token distribution of the gating model.
    pub fn lambda(&self, dist: &[f32], items: Range<usize>) -> f32 {
        match self.gate {
            GateMode::Hard => hard_gate(dist, items, self.eta),
            GateMode::Soft => soft_gate(dist, items),
            GateMode::Fixed { value } => value,
        }
    }

    /// As [`DistillConfig::lambda`], from an item mass already summed.
    pub fn lambda_from_mass(&self, mass: f32) -> f32 {
        match self.gate {
            GateMode::Hard => (mass >= self.eta) as u8 as f32,
            GateMode::Soft => mass.clamp(0.0, 1.0),
            GateMode::Fixed { value } => value,
        }
    }
}

/// Total probability on the item-token id range, clamped to 1 against
/// rounding in the sum.
pub fn item_mass<T: Float>(dist: &[T], items: Range<usize>) -> T {
    let s: T = dist[items].iter().copied().sum();
    if s > T::one() {
        T::one()
    } else {
        s
    }
}

/// 1 when the item mass reaches `eta`, else 0.
pub fn hard_gate<T: Float>(dist: &[T], items: Range<usize>, eta: T) -> T {
    if item_mass(dist, items) >= eta {
        T::one()
    } else {
        T::zero()
    }
}

pub fn soft_gate<T: Float>(dist: &[T], items: Range<usize>) -> T {
    item_mass(dist, items)
}

/// Places an item distribution at the item-token ids of a `vocab_len` space.
pub fn lift_rec_distribution<T: Float>(items_dist: &[T], vocab_len: usize, items: Range<usize>) -> Result<Vec<T>> {
    if items.len() != items_dist.len() || items.end > vocab_len {
        return invalid(format!(
            "{} item probabilities for item ids {items:?} in a space of {vocab_len}",
            items_dist.len()
        ));
    }
    let mut out = vec![T::zero(); vocab_len];
    out[items].copy_from_slice(items_dist);
    Ok(out)
}

fn row_ce<T: Float>(target: &[T], logp: &[T]) -> T {
    target.iter().zip(logp).filter(|(t, _)| **t != T::zero()).map(|(&t, &l)| -t * l).sum()
}

/// Mean over time steps of `CE(teacher_t, student_t)`; both `T x |Y|`, the
/// student given as log-probabilities.
pub fn dial_kd_loss<T: Float>(student_logp: &Tensor<T>, teacher: &Tensor<T>) -> Result<T> {
    if student_logp.shape() != teacher.shape() || student_logp.rows() == 0 {
        return invalid(format!("student {:?} vs teacher {:?}", student_logp.shape(), teacher.shape()));
    }
    let n = student_logp.rows();
    Ok((0..n).map(|r| row_ce(teacher.row(r), student_logp.row(r))).sum::<T>() / T::lit(n as f64))
}

/// As [`dial_kd_loss`] with one lifted recommendation distribution reused at every step.
pub fn rec_kd_loss<T: Float>(student_logp: &Tensor<T>, lifted: &[T]) -> Result<T> {
    if student_logp.cols() != lifted.len() || student_logp.rows() == 0 {
        return invalid(format!("student {:?} vs lifted length {}", student_logp.shape(), lifted.len()));
    }
    let n = student_logp.rows();
    Ok((0..n).map(|r| row_ce(lifted, student_logp.row(r))).sum::<T>() / T::lit(n as f64))
}

/// Gated per-step loss in its two-branch form:
/// `(1 - lambda) [(1 - gamma) nll + gamma dial] + lambda [(1 - gamma) nll + gamma rec]`.
pub fn combined_step_loss(nll: f64, dial_kd: f64, rec_kd: f64, lambda: f64, gamma: f64) -> f64 {
    let l_dial = (1.0 - gamma) * nll + gamma * dial_kd;
    let l_rec = (1.0 - gamma) * nll + gamma * rec_kd;
    (1.0 - lambda) * l_dial + lambda * l_rec
}

/// Teacher signals for one packed batch; every tensor has one row per decoder row.
pub struct Signals<T> {
    /// Dialogue-teacher distributions; `None` substitutes the gold one-hot.
    pub dial: Option<Tensor<T>>,
    /// Lifted recommendation distributions; `None` disables the recommendation branch.
    pub rec: Option<Tensor<T>>,
    pub lambda: Vec<T>,
}

/// Scalar distillation objective over decoder `logits`.
///
/// Row `r` contributes `w_r [(1 - gamma) NLL_r + gamma ((1 - lambda_r) KD_dial_r + lambda_r KD_rec_r)]`.
/// KD terms compare teacher rows with `log_softmax(logits / tau)`.
pub fn distillation_loss<T: Float>(
    g: &mut Graph<'_, T>,
    logits: Var,
    targets: &[usize],
    signals: Signals<T>,
    gamma: T,
    tau: T,
    weights: &[T],
) -> Result<Var> {
    let (rows, cols) = g.value(logits).dims2();
    if targets.len() != rows || weights.len() != rows || signals.lambda.len() != rows {
        return invalid(format!(
            "{rows} logit rows, {} targets, {} weights, {} gates",
            targets.len(),
            weights.len(),
            signals.lambda.len()
        ));
    }
    let one = T::one();
    let lambda: Vec<T> = if signals.rec.is_some() { signals.lambda } else { vec![T::zero(); rows] };
    let mut onehot = Tensor::zeros(&[rows, cols]);
    for (r, &y) in targets.iter().enumerate() {
        onehot.row_mut(r)[y] = one;
    }
    let logp = g.log_softmax_rows(logits);
    // without a dialogue teacher its branch falls back to the gold tokens
    let nll_w: Vec<T> = (0..rows)
        .map(|r| {
            let base = weights[r] * (one - gamma);
            if signals.dial.is_none() {
                base + weights[r] * gamma * (one - lambda[r])
            } else {
                base
            }
        })
        .collect();
    let mut loss = g.soft_cross_entropy(logp, onehot, nll_w)?;
    let lq = if tau == one {
        logp
    } else {
        let s = g.scale(logits, one / tau);
        g.log_softmax_rows(s)
    };
    if let Some(d) = signals.dial {
        let w = (0..rows).map(|r| weights[r] * gamma * (one - lambda[r])).collect();
        let kd = g.soft_cross_entropy(lq, d, w)?;
        loss = g.add(loss, kd)?;
    }
    if let Some(rc) = signals.rec {
        let w = (0..rows).map(|r| weights[r] * gamma * lambda[r]).collect();
        let kd = g.soft_cross_entropy(lq, rc, w)?;
        loss = g.add(loss, kd)?;
    }
    Ok(loss)
}

/// Mean gate values seen during training, split by whether the gold token is an item.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub rec_steps: usize,
    pub other_steps: usize,
    pub mean_lambda_rec: Option<f64>,
    pub mean_lambda_other: Option<f64>,
}

#[derive(Clone, Debug, Default)]
struct GateAcc {
    sums: [f64; 2],
    counts: [usize; 2],
}

impl GateAcc {
    fn push(&mut self, is_item: bool, lambda: f32) {
        let i = is_item as usize;
        self.sums[i] += lambda as f64;
        self.counts[i] += 1;
    }

    fn summary(&self) -> GateSummary {
        let mean = |i: usize| (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64);
        GateSummary {
            rec_steps: self.counts[1],
            other_steps: self.counts[0],
            mean_lambda_rec: mean(1),
            mean_lambda_other: mean(0),
        }
    }
}

/// One gate decision, as exported for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub dialogue_id: String,
    pub turn: usize,
    pub t: usize,
    pub item_mass: f32,
    pub lambda: f32,
}

#[derive(Clone, Debug)]
pub struct StudentLog {
    pub train: TrainLog,
    pub gate: GateSummary,
}

/// Trains `student` against the enabled teachers. The recommendation
/// teacher's distribution depends only on the history, so it is computed once
/// per example; the dialogue teacher runs on every batch.
pub fn train_student(
    student: &mut LanguageModel,
    examples: &[TurnExample],
    dial_teacher: Option<&LanguageModel>,
    rec_teacher: Option<&RecTeacher>,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<StudentLog> {
    cfg.validate()?;
    let dial_teacher = if cfg.use_dialogue_teacher {
        Some(dial_teacher.ok_or_else(|| crate::Error::InvalidArgument("dialogue teacher required".into()))?)
    } else {
        None
    };
    let rec_teacher = if cfg.use_rec_teacher {
        Some(rec_teacher.ok_or_else(|| crate::Error::InvalidArgument("recommendation teacher required".into()))?)
    } else {
        None
    };
    let vocab = student.vocab.clone();
    if let Some(t) = dial_teacher {
        if t.vocab != vocab {
            return invalid("dialogue teacher and student vocabularies differ");
        }
    }
    let items = vocab.item_range();
    let v = vocab.len();
    let lifted: Option<Vec<Vec<f32>>> = match rec_teacher {
        Some(r) => {
            if r.n_items != items.len() {
                return invalid(format!("recommendation teacher scores {} items, vocabulary has {}", r.n_items, items.len()));
            }
            let mut out = Vec::with_capacity(examples.len());
            for chunk in examples.chunks(64) {
                let h: Vec<(&[usize], &[usize])> = chunk
                    .iter()
                    .map(|e| (e.mentioned_items.as_slice(), e.mentioned_words.as_slice()))
                    .collect();
                for d in r.distributions_at(&h, cfg.tau)? {
                    out.push(lift_rec_distribution(&d, v, items.clone())?);
                }
            }
            Some(out)
        }
        None => None,
    };
    let mut acc = GateAcc::default();
    let train = fit(student, examples, seed, |g, logits, idx, batch, packed: &PackedBatch| {
        let rows = packed.rows();
        // gating distributions come from the dialogue teacher; without one the
        // gate is ignored and the recommendation branch covers every step
        let gate_rows: Vec<Vec<f32>> = match dial_teacher {
            Some(t) => t.teacher_forced(batch, 1.0)?.iter().flat_map(|m| (0..m.rows()).map(|r| m.row(r).to_vec()).collect::<Vec<_>>()).collect(),
            None => Vec::new(),
        };
        let lambda: Vec<f32> = match dial_teacher {
            Some(_) => gate_rows.iter().map(|d| cfg.lambda(d, items.clone())).collect(),
            None => vec![1.0; rows],
        };
        for (r, &y) in packed.targets.iter().enumerate() {
            acc.push(items.contains(&y), lambda[r]);
        }
        let dial = match dial_teacher {
            Some(t) => {
                let tempered = if cfg.tau == 1.0 { None } else { Some(t.teacher_forced(batch, cfg.tau)?) };
                let mut d = Tensor::zeros(&[rows, v]);
                match tempered {
                    None => gate_rows.iter().enumerate().for_each(|(r, row)| d.row_mut(r).copy_from_slice(row)),
                    Some(ms) => {
                        let mut r = 0;
                        for m in &ms {
                            for i in 0..m.rows() {
                                d.row_mut(r).copy_from_slice(m.row(i));
                                r += 1;
                            }
                        }
                    }
                }
                Some(d)
            }
            None => None,
        };
        let rec = match &lifted {
            Some(l) => {
                let mut t = Tensor::zeros(&[rows, v]);
                for (bi, &ei) in idx.iter().enumerate() {
                    for r in packed.offsets[bi]..packed.offsets[bi + 1] {
                        t.row_mut(r).copy_from_slice(&l[ei]);
                    }
                }
                Some(t)
            }
            None => None,
        };
        distillation_loss(g, logits, &packed.targets, Signals { dial, rec, lambda }, cfg.gamma, cfg.tau, &packed.row_weights())
    })?;
    Ok(StudentLog { train, gate: acc.summary() })
}

/// Teacher-forced gate trace of `model` over `examples`.
pub fn gate_trace(model: &LanguageModel, examples: &[TurnExample], ids: &[String], cfg: &DistillConfig) -> Result<Vec<GateRecord>> {
    let items = model.vocab.item_range();
    let refs: Vec<&TurnExample> = examples.iter().collect();
    let dists = model.teacher_forced(&refs, 1.0)?;
    let mut out = Vec::new();
    for (e, m) in examples.iter().zip(&dists) {
        for t in 0..m.rows() {
            out.push(GateRecord {
                dialogue_id: ids.get(e.dialogue).cloned().unwrap_or_else(|| e.dialogue.to_string()),
                turn: e.turn,
                t,
                item_mass: item_mass(m.row(t), items.clone()),
                lambda: cfg.lambda(m.row(t), items.clone()),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::{BOS, REC};
    use crate::data::{KnowledgeGraph, Vocabulary};
    use crate::dialogue::{train_language_model, LmConfig};
    use crate::recommender::RecConfig;
    use crate::train::TrainConfig;
    use conkd_nn::transformer::Seq2Seq;
    use conkd_nn::{ParamStore, SeqBatch, TransformerConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FIXTURE: [f64; 5] = [0.10, 0.20, 0.30, 0.25, 0.15];

    #[test]
    fn item_mass_fixture() {
        assert!((item_mass(&FIXTURE, 3..5) - 0.40).abs() < 1e-12);
        assert_eq!(item_mass(&[0.5, 0.5, 0.0, 0.0], 2..4), 0.0);
        assert_eq!(item_mass(&[0.0, 0.0, 1.0f64], 2..3), 1.0);
    }

    #[test]
    fn gate_fixtures() {
        assert_eq!(hard_gate(&FIXTURE, 3..5, 0.3), 1.0);
        assert_eq!(hard_gate(&FIXTURE, 3..5, 0.41), 0.0);
        assert_eq!(hard_gate(&[1.0, 0.0], 1..2, 0.0), 1.0);
        assert!((soft_gate(&FIXTURE, 3..5) - 0.40).abs() < 1e-12);
        // the threshold itself selects the recommendation branch
        assert_eq!(hard_gate(&[0.5, 0.5f64], 1..2, 0.5), 1.0);
    }

    #[test]
    fn lift_places_mass_on_item_ids() {
        let l = lift_rec_distribution(&[0.5, 0.3, 0.2], 10, 6..9).unwrap();
        assert_eq!(l.iter().filter(|&&x| x != 0.0).count(), 3);
        assert_eq!(&l[6..9], &[0.5, 0.3, 0.2]);
        assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let u = lift_rec_distribution(&[0.25f32; 4], 6, 2..6).unwrap();
        assert_eq!(u, vec![0.0, 0.0, 0.25, 0.25, 0.25, 0.25]);
        assert!(lift_rec_distribution(&[1.0f32], 6, 2..6).is_err());
    }

    #[test]
    fn kd_loss_fixtures() {
        let student = Tensor::matrix(1, 2, vec![0.5f64.ln(), 0.5f64.ln()]).unwrap();
        let teacher = Tensor::matrix(1, 2, vec![0.7, 0.3]).unwrap();
        assert!((dial_kd_loss(&student, &teacher).unwrap() - 0.6931).abs() < 1e-4);
        // one-hot teacher reduces to NLL
        let s = Tensor::matrix(1, 3, vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]).unwrap();
        let oh = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert!((dial_kd_loss(&s, &oh).unwrap() + 0.5f64.ln()).abs() < 1e-12);
        // matching student gives the teacher entropy
        let p = [0.2, 0.5, 0.3f64];
        let h: f64 = -p.iter().map(|x| x * x.ln()).sum::<f64>();
        assert!((dial_kd_loss(&s, &Tensor::matrix(1, 3, p.to_vec()).unwrap()).unwrap() - h).abs() < 1e-12);
        let uni = Tensor::matrix(2, 4, vec![0.25f64.ln(); 8]).unwrap();
        let delta = lift_rec_distribution(&[0.0, 1.0], 4, 2..4).unwrap();
        assert!((rec_kd_loss(&uni, &delta).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(dial_kd_loss(&uni, &oh).is_err());
        assert!(rec_kd_loss(&uni, &[1.0]).is_err());
    }

    #[test]
    fn combined_loss_reductions() {
        let (n, d, r) = (1.3, 0.7, 2.9);
        assert_eq!(combined_step_loss(n, d, r, 0.0, 0.6), 0.4 * n + 0.6 * d);
        assert_eq!(combined_step_loss(n, d, r, 1.0, 0.6), 0.4 * n + 0.6 * r);
        assert!((combined_step_loss(n, d, r, 0.3, 0.0) - n).abs() < 1e-12);
        let f = combined_step_loss(n, d, r, 0.3, 0.6);
        assert!((f - (0.4 * n + 0.6 * (0.7 * d + 0.3 * r))).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(DistillConfig::default().validate().is_ok());
        assert!(DistillConfig { eta: 1.5, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { gamma: -0.1, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { gate: GateMode::Fixed { value: 2.0 }, ..Default::default() }.validate().is_err());
        let c = DistillConfig { gate: GateMode::Fixed { value: 0.5 }, ..Default::default() };
        assert_eq!(c.lambda(&[1.0, 0.0], 1..2), 0.5);
    }

    fn micro() -> (ParamStore<f64>, Seq2Seq) {
        let cfg = TransformerConfig { layers: 1, hidden: 4, heads: 2, ffn: 6, max_len: 6, dropout: 0.0 };
        let mut s = ParamStore::new();
        let net = Seq2Seq::new(&mut s, "m", 2, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (s, net)
    }

    fn micro_loss(s: &ParamStore<f64>, net: &Seq2Seq, tau: f64) -> (f64, conkd_nn::Gradients<f64>) {
        let src = SeqBatch::new(&[vec![0, 1, 1], vec![1, 0]]);
        let prefix = SeqBatch::new(&[vec![0, 1], vec![1, 1, 0]]);
        let targets = [1, 0, 0, 1, 1];
        let dial = Tensor::matrix(5, 2, vec![0.3, 0.7, 0.6, 0.4, 0.9, 0.1, 0.2, 0.8, 0.5, 0.5]).unwrap();
        let rec = Tensor::matrix(5, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let lambda: Vec<f64> = (0..5).map(|r| hard_gate(dial.row(r), 1..2, 0.3)).collect();
        let w = [0.25, 0.25, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
        let mut g = Graph::new(s);
        let l = net.logits(&mut g, &src, &prefix).unwrap();
        let loss = distillation_loss(&mut g, l, &targets, Signals { dial: Some(dial), rec: Some(rec), lambda }, 0.6, tau, &w).unwrap();
        (g.value(loss).item(), g.backward(loss).unwrap())
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (s, net) = micro();
        for tau in [1.0, 2.0] {
            let grads = micro_loss(&s, &net, tau).1;
            for (id, _, t) in s.iter() {
                for k in 0..t.len() {
                    let mut p = s.clone();
                    p.get_mut(id).data_mut()[k] += 1e-6;
                    let mut m = s.clone();
                    m.get_mut(id).data_mut()[k] -= 1e-6;
                    let num = (micro_loss(&p, &net, tau).0 - micro_loss(&m, &net, tau).0) / 2e-6;
                    let ana = grads.get(id).map(|x| x.data()[k]).unwrap_or(0.0);
                    let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                    assert!(rel < 1e-3 || (num - ana).abs() < 1e-8, "{} [{k}]: {num} vs {ana}", s.name(id));
                }
            }
        }
    }

    #[test]
    fn objective_matches_per_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = 4;
        let v = 5;
        let logits_t = Tensor::from_fn(rows, v, |_, _| rng.random_range(-2.0..2.0));
        let norm = |rng: &mut ChaCha8Rng| {
            let x: Vec<f64> = (0..v).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = x.iter().sum();
            x.into_iter().map(|y| y / s).collect::<Vec<_>>()
        };
        let dial: Vec<f64> = (0..rows).flat_map(|_| norm(&mut rng)).collect();
        let rec = lift_rec_distribution(&[0.6, 0.4], v, 3..5).unwrap();
        let targets = [0, 3, 1, 4];
        let lambda = [0.0, 1.0, 0.25, 0.8];
        let w = [0.25; 4];
        let gamma = 0.6;
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let l = g.constant(logits_t.clone());
        let rec_t = Tensor::matrix(rows, v, rec.iter().cloned().cycle().take(rows * v).collect()).unwrap();
        let dial_t = Tensor::matrix(rows, v, dial.clone()).unwrap();
        let sig = Signals { dial: Some(dial_t.clone()), rec: Some(rec_t), lambda: lambda.to_vec() };
        let out = distillation_loss(&mut g, l, &targets, sig, gamma, 1.0, &w).unwrap();
        let got = g.value(out).item();
        let mut want = 0.0;
        for r in 0..rows {
            let lp = conkd_nn::functional::log_softmax(logits_t.row(r)).unwrap();
            let row = Tensor::matrix(1, v, lp.clone()).unwrap();
            let nll = -lp[targets[r]];
            let d = dial_kd_loss(&row, &Tensor::matrix(1, v, dial_t.row(r).to_vec()).unwrap()).unwrap();
            let rk = rec_kd_loss(&row, &rec).unwrap();
            want += w[r] * combined_step_loss(nll, d, rk, lambda[r], gamma);
        }
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    fn toy() -> (Vocabulary, Vec<TurnExample>, RecTeacher) {
        let vocab = Vocabulary::from_parts(
            ["hi", "watch", "thanks", "scary"].iter().map(|s| s.to_string()).collect(),
            vec!["1".into(), "2".into()],
        )
        .unwrap();
        let w = |s: &str| vocab.id(s).unwrap();
        let ex = |item: usize| TurnExample {
            dialogue: item,
            turn: 1,
            context: vec![BOS, 6, w("hi"), w("scary")],
            response: vec![REC, w("watch"), vocab.item_token_id(item), w("thanks")],
            gold_items: vec![item],
            mentioned_items: vec![],
            mentioned_words: vec![0],
        };
        let examples = vec![ex(0), ex(1), ex(0), ex(0)];
        let cat = crate::data::Catalog::new(vec![
            crate::data::CatalogEntry { id: "1".into(), title: "A".into() },
            crate::data::CatalogEntry { id: "2".into(), title: "B".into() },
        ])
        .unwrap();
        let ik = KnowledgeGraph::item_graph(&cat, &[crate::data::RawTriple::new("1", "genre", "horror")]).unwrap();
        let wk = KnowledgeGraph::word_graph(&[crate::data::RawTriple::new("scary", "r", "horror")]).unwrap();
        let rec = RecTeacher::new(RecConfig { hidden: 4, ..Default::default() }, ik, wk, 2, 1).unwrap();
        (vocab, examples, rec)
    }

    fn lm_config() -> LmConfig {
        LmConfig {
            model: TransformerConfig { layers: 1, hidden: 8, heads: 2, ffn: 16, max_len: 8, dropout: 0.1 },
            train: TrainConfig { epochs: 3, batch_size: 2, lr: 1e-2, clip_norm: 1.0 },
        }
    }

    #[test]
    fn zero_gamma_follows_the_maximum_likelihood_trajectory() {
        let (vocab, ex, rec) = toy();
        let teacher = LanguageModel::new(vocab.clone(), lm_config(), 11).unwrap();
        let mut a = LanguageModel::new(vocab.clone(), lm_config(), 5).unwrap();
        let mut b = a.clone();
        train_language_model(&mut a, &ex, 9).unwrap();
        let cfg = DistillConfig { gamma: 0.0, ..Default::default() };
        train_student(&mut b, &ex, Some(&teacher), Some(&rec), &cfg, 9).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn disabled_teachers_are_not_required() {
        let (vocab, ex, rec) = toy();
        let mut s = LanguageModel::new(vocab.clone(), lm_config(), 5).unwrap();
        let no_rec = DistillConfig { use_rec_teacher: false, ..Default::default() };
        assert!(train_student(&mut s, &ex, None, None, &no_rec, 1).is_err());
        let only_rec = DistillConfig { use_dialogue_teacher: false, ..Default::default() };
        let log = train_student(&mut s, &ex, None, Some(&rec), &only_rec, 1).unwrap();
        assert_eq!(log.gate.rec_steps, 3 * 4);
        assert!(train_student(&mut s, &ex, None, Some(&rec), &DistillConfig::default(), 1).is_err());
        let bad = DistillConfig { eta: 2.0, ..Default::default() };
        assert!(train_student(&mut s, &ex, None, Some(&rec), &bad, 1).is_err());
    }

    #[test]
    fn no_rec_teacher_ignores_the_gate() {
        let (vocab, ex, rec) = toy();
        let teacher = LanguageModel::new(vocab.clone(), lm_config(), 11).unwrap();
        let run = |gate| {
            let mut s = LanguageModel::new(vocab.clone(), lm_config(), 5).unwrap();
            let cfg = DistillConfig { gate, use_rec_teacher: false, ..Default::default() };
            train_student(&mut s, &ex, Some(&teacher), Some(&rec), &cfg, 2).unwrap();
            s.params
        };
        assert_eq!(run(GateMode::Hard), run(GateMode::Fixed { value: 0.9 }));
    }

    #[test]
    fn no_dialogue_teacher_applies_the_rec_branch_everywhere() {
        let (vocab, ex, rec) = toy();
        let run = |gate| {
            let mut s = LanguageModel::new(vocab.clone(), lm_config(), 5).unwrap();
            let cfg = DistillConfig { gate, use_dialogue_teacher: false, ..Default::default() };
            let log = train_student(&mut s, &ex, None, Some(&rec), &cfg, 2).unwrap();
            assert_eq!((log.gate.mean_lambda_rec, log.gate.mean_lambda_other), (Some(1.0), Some(1.0)));
            s.params
        };
        assert_eq!(run(GateMode::Hard), run(GateMode::Fixed { value: 0.2 }));
    }

    #[test]
    fn lambda_from_mass_agrees_with_lambda() {
        for gate in [GateMode::Hard, GateMode::Soft, GateMode::Fixed { value: 0.5 }] {
            let cfg = DistillConfig { gate, ..Default::default() };
            for d in [[0.7f32, 0.2, 0.1], [0.2, 0.5, 0.3], [0.0, 0.0, 1.0]] {
                assert_eq!(cfg.lambda(&d, 1..3), cfg.lambda_from_mass(item_mass(&d, 1..3)));
            }
        }
    }

    #[test]
    fn gate_trace_covers_every_step() {
        let (vocab, ex, _) = toy();
        let m = LanguageModel::new(vocab, lm_config(), 1).unwrap();
        let tr = gate_trace(&m, &ex[..2], &["a".into(), "b".into()], &DistillConfig { gate: GateMode::Soft, ..Default::default() }).unwrap();
        assert_eq!(tr.len(), 10);
        assert_eq!(tr[5].dialogue_id, "b");
        assert!(tr.iter().all(|r| r.lambda == r.item_mass && (0.0..=1.0).contains(&r.lambda)));
    }
}

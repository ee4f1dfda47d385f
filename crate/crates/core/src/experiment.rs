//! End-to-end pipeline: corpus, teachers, students, classifier, evaluation
//! and the ablation table.

use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::classifier::{label, train_classifier, Decision, TurnClassifier};
use crate::config::ExperimentConfig;
use crate::conkd::{train_student, DistillConfig, GateMode, GateSummary};
use crate::data::{
    generate_synthetic_corpus, kg::load_triples, kg::save_triples, split_dialogues, Catalog, Dataset, Dialogue, RawTriple, Split,
    TurnExample,
};
use crate::data::corpus::{load_dialogues, save_dialogues};
use crate::dialogue::{train_language_model, LanguageModel};
use crate::error::{invalid, Result};
use crate::eval::{gate_diagnostics, latency_bench, mismatch_report, recall_at_k, GateDiagnostics, GenerationRecord, LatencyReport, MetricReport, MismatchRow};
use crate::recommender::{recommend_topk, train_recommender, RecTeacher};
use crate::train::derive_seed;

/// Raw corpus files.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dialogues: Vec<Dialogue>,
    pub catalog: Catalog,
    pub item_triples: Vec<RawTriple>,
    pub word_triples: Vec<RawTriple>,
}

pub const DIALOGUES_FILE: &str = "dialogues.jsonl";
pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const ITEM_KG_FILE: &str = "item_kg.jsonl";
pub const WORD_KG_FILE: &str = "word_kg.jsonl";

impl Corpus {
    pub fn synthetic(cfg: &ExperimentConfig) -> Result<Self> {
        let s = generate_synthetic_corpus(&cfg.data)?;
        Ok(Corpus {
            dialogues: s.dialogues,
            catalog: s.catalog,
            item_triples: s.item_triples,
            word_triples: s.word_triples,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_dialogues(&dir.join(DIALOGUES_FILE), &self.dialogues)?;
        self.catalog.save(&dir.join(CATALOG_FILE))?;
        save_triples(&dir.join(ITEM_KG_FILE), &self.item_triples)?;
        save_triples(&dir.join(WORD_KG_FILE), &self.word_triples)?;
        Ok(())
    }

    /// Loads from `dir`, with any path in the config taking precedence.
    pub fn load(cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        let p = &cfg.paths;
        let pick = |o: &Option<std::path::PathBuf>, f: &str| o.clone().unwrap_or_else(|| dir.join(f));
        Ok(Corpus {
            dialogues: load_dialogues(&pick(&p.dialogues, DIALOGUES_FILE))?,
            catalog: Catalog::load(&pick(&p.catalog, CATALOG_FILE))?,
            item_triples: load_triples(&pick(&p.item_kg, ITEM_KG_FILE))?,
            word_triples: load_triples(&pick(&p.word_kg, WORD_KG_FILE))?,
        })
    }
}

/// Dataset with its four example views.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub heldout_ids: Vec<String>,
    pub train_st: Vec<TurnExample>,
    pub train_plain: Vec<TurnExample>,
    pub held_st: Vec<TurnExample>,
    pub held_plain: Vec<TurnExample>,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Self> {
        let (train, held) = split_dialogues(&corpus.dialogues, cfg.heldout_fraction, derive_seed(cfg.seed, "split"))?;
        let dataset = Dataset::new(&train, &held, corpus.catalog.clone(), &corpus.item_triples, &corpus.word_triples)?;
        let max = cfg.lm.model.max_len.min(cfg.classifier.model.max_len);
        let limit = |mut v: Vec<TurnExample>| {
            if let Some(n) = cfg.eval.max_turns {
                v.truncate(n);
            }
            v
        };
        Ok(Prepared {
            heldout_ids: held.iter().map(|d| d.id.clone()).collect(),
            train_st: dataset.examples(Split::Train, true, max),
            train_plain: dataset.examples(Split::Train, false, max),
            held_st: limit(dataset.examples(Split::Heldout, true, max)),
            held_plain: limit(dataset.examples(Split::Heldout, false, max)),
            dataset,
        })
    }

    pub fn train(&self, special_tokens: bool) -> &[TurnExample] {
        if special_tokens {
            &self.train_st
        } else {
            &self.train_plain
        }
    }

    pub fn heldout(&self, special_tokens: bool) -> &[TurnExample] {
        if special_tokens {
            &self.held_st
        } else {
            &self.held_plain
        }
    }
}

pub fn train_rec_teacher(cfg: &ExperimentConfig, p: &Prepared) -> Result<RecTeacher> {
    let ds = &p.dataset;
    let mut m = RecTeacher::new(cfg.rec.clone(), ds.item_kg.clone(), ds.word_kg.clone(), ds.vocab.n_items(), derive_seed(cfg.seed, "init:rec"))?;
    let log = train_recommender(&mut m, &p.train_plain, derive_seed(cfg.seed, "train:rec"))?;
    info!("recommender trained, final loss {:?}", log.epoch_loss.last());
    Ok(m)
}

pub fn train_dialogue_teacher(cfg: &ExperimentConfig, p: &Prepared, special_tokens: bool) -> Result<LanguageModel> {
    let tag = if special_tokens { "dial_st" } else { "dial_plain" };
    let mut m = LanguageModel::new(p.dataset.vocab.clone(), cfg.lm.clone(), derive_seed(cfg.seed, &format!("init:{tag}")))?;
    let log = train_language_model(&mut m, p.train(special_tokens), derive_seed(cfg.seed, &format!("train:{tag}")))?;
    info!("{tag} trained, final loss {:?}", log.epoch_loss.last());
    Ok(m)
}

pub fn train_turn_classifier(cfg: &ExperimentConfig, p: &Prepared) -> Result<TurnClassifier> {
    let mut m = TurnClassifier::new(p.dataset.vocab.clone(), cfg.classifier.clone(), derive_seed(cfg.seed, "init:cls"))?;
    train_classifier(&mut m, &p.train_st, derive_seed(cfg.seed, "train:cls"))?;
    Ok(m)
}

/// Ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "+D")]
    PlusD,
    #[serde(rename = "+R")]
    PlusR,
    #[serde(rename = "+D&R")]
    PlusDR,
    #[serde(rename = "+D&R&ST")]
    PlusDRST,
    #[serde(rename = "lambda=0.5")]
    FixedGate,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Vanilla,
        Variant::PlusD,
        Variant::PlusR,
        Variant::PlusDR,
        Variant::PlusDRST,
        Variant::FixedGate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::PlusD => "+D",
            Variant::PlusR => "+R",
            Variant::PlusDR => "+D&R",
            Variant::PlusDRST => "+D&R&ST",
            Variant::FixedGate => "lambda=0.5",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .map_or_else(|| invalid(format!("unknown variant {s}")), Ok)
    }

    /// Distillation settings derived from `base`; `None` is plain likelihood training.
    pub fn distill(self, base: &DistillConfig) -> Option<DistillConfig> {
        let with = |d: bool, r: bool, st: bool| DistillConfig {
            use_dialogue_teacher: d,
            use_rec_teacher: r,
            use_special_tokens: st,
            ..base.clone()
        };
        match self {
            Variant::Vanilla => None,
            Variant::PlusD => Some(with(true, false, false)),
            Variant::PlusR => Some(with(false, true, false)),
            Variant::PlusDR => Some(with(true, true, false)),
            Variant::PlusDRST => Some(with(true, true, true)),
            Variant::FixedGate => Some(DistillConfig {
                gate: GateMode::Fixed { value: 0.5 },
                ..with(true, true, true)
            }),
        }
    }

    pub fn special_tokens(self) -> bool {
        matches!(self, Variant::PlusDRST | Variant::FixedGate)
    }
}

/// Teachers shared by the students of one seed; built on demand.
#[derive(Default)]
pub struct Teachers {
    pub rec: Option<RecTeacher>,
    pub dial_st: Option<LanguageModel>,
    pub dial_plain: Option<LanguageModel>,
    pub classifier: Option<TurnClassifier>,
}

impl Teachers {
    pub fn rec(&mut self, cfg: &ExperimentConfig, p: &Prepared) -> Result<&RecTeacher> {
        if self.rec.is_none() {
            self.rec = Some(train_rec_teacher(cfg, p)?);
        }
        Ok(self.rec.as_ref().unwrap())
    }

    pub fn dial(&mut self, cfg: &ExperimentConfig, p: &Prepared, st: bool) -> Result<&LanguageModel> {
        let slot = if st { &mut self.dial_st } else { &mut self.dial_plain };
        if slot.is_none() {
            *slot = Some(train_dialogue_teacher(cfg, p, st)?);
        }
        Ok(slot.as_ref().unwrap())
    }

    pub fn classifier(&mut self, cfg: &ExperimentConfig, p: &Prepared) -> Result<&TurnClassifier> {
        if self.classifier.is_none() {
            self.classifier = Some(train_turn_classifier(cfg, p)?);
        }
        Ok(self.classifier.as_ref().unwrap())
    }
}

pub struct TrainedStudent {
    pub model: LanguageModel,
    pub gate: Option<GateSummary>,
}

/// Trains one student. Students use their own initialization seed, distinct
/// from every teacher's.
pub fn train_variant(cfg: &ExperimentConfig, p: &Prepared, teachers: &mut Teachers, variant: Variant) -> Result<TrainedStudent> {
    let st = variant.special_tokens();
    let init = derive_seed(cfg.seed, "init:student");
    let seed = derive_seed(cfg.seed, "train:student");
    let mut m = LanguageModel::new(p.dataset.vocab.clone(), cfg.lm.clone(), init)?;
    let gate = match variant.distill(&cfg.distill) {
        None => {
            train_language_model(&mut m, p.train(st), seed)?;
            None
        }
        Some(d) => {
            if d.use_rec_teacher {
                teachers.rec(cfg, p)?;
            }
            if d.use_dialogue_teacher {
                teachers.dial(cfg, p, st)?;
            }
            let dial = if st { teachers.dial_st.as_ref() } else { teachers.dial_plain.as_ref() };
            let log = train_student(&mut m, p.train(st), dial, teachers.rec.as_ref(), &d, seed)?;
            Some(log.gate)
        }
    };
    info!("student {} trained", variant.name());
    Ok(TrainedStudent { model: m, gate })
}

/// Generates every held-out agent turn. With a classifier, its decision is
/// forced as the first response token.
pub fn generate_records(
    model: &LanguageModel,
    examples: &[TurnExample],
    classifier: Option<&TurnClassifier>,
    cfg: &ExperimentConfig,
    ids: &[String],
) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::with_capacity(examples.len());
    for e in examples {
        let forced = match classifier {
            Some(c) => Some(c.classify(&e.context)?.token()),
            None => None,
        };
        let g = model.generate(&e.context, &cfg.eval.decode, forced)?;
        out.push(GenerationRecord {
            dialogue_id: ids.get(e.dialogue).cloned().unwrap_or_default(),
            turn: e.turn,
            tokens: g.tokens,
            slots: g.slots,
            gold: e.gold_items.clone(),
        });
    }
    Ok(out)
}

pub fn evaluate_model(
    model: &LanguageModel,
    examples: &[TurnExample],
    classifier: Option<&TurnClassifier>,
    cfg: &ExperimentConfig,
    ids: &[String],
) -> Result<(MetricReport, Vec<GenerationRecord>)> {
    let records = generate_records(model, examples, classifier, cfg, ids)?;
    let ppl = model.perplexity(examples)?;
    Ok((MetricReport::from_records(&records, &model.vocab, &cfg.eval.ks, Some(ppl))?, records))
}

/// R@k of the recommender over held-out recommendation turns.
pub fn evaluate_recommender(rec: &RecTeacher, examples: &[TurnExample], ks: &[usize]) -> Result<Vec<f64>> {
    let turns: Vec<&TurnExample> = examples.iter().filter(|e| e.is_rec()).collect();
    if turns.is_empty() {
        return invalid("no held-out recommendation turns");
    }
    let kmax = ks.iter().copied().max().unwrap_or(1).min(rec.n_items);
    let mut rankings = Vec::with_capacity(turns.len());
    for chunk in turns.chunks(64) {
        let h: Vec<(&[usize], &[usize])> = chunk.iter().map(|e| (e.mentioned_items.as_slice(), e.mentioned_words.as_slice())).collect();
        for d in rec.distributions(&h)? {
            rankings.push(recommend_topk(&d, kmax)?);
        }
    }
    let gold: Vec<Vec<usize>> = turns.iter().map(|e| e.gold_items.clone()).collect();
    ks.iter().map(|&k| recall_at_k(&rankings, &gold, k)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub report: MetricReport,
    pub gate: Option<GateSummary>,
    /// Greedy decoding speed; measured only when `eval.bench_tokens > 0`.
    pub latency: Option<LatencyReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub accuracy: f64,
    pub majority_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub ks: Vec<usize>,
    pub rec_recall: Vec<f64>,
    pub gate: GateDiagnostics,
    pub classifier: Option<ClassifierReport>,
    /// Recommender R@k against the vanilla model's in-response ReR@k.
    pub mismatch: Vec<MismatchRow>,
    pub variants: Vec<VariantResult>,
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&MetricReport> {
        self.variants.iter().find(|r| r.variant == v).map(|r| &r.report)
    }
}

pub fn classifier_report(c: &TurnClassifier, examples: &[TurnExample]) -> Result<ClassifierReport> {
    let labels: Vec<Decision> = examples.iter().filter_map(label).collect();
    if labels.is_empty() {
        return invalid("no labelled held-out examples");
    }
    let rec = labels.iter().filter(|&&l| l == Decision::Rec).count() as f64 / labels.len() as f64;
    Ok(ClassifierReport {
        accuracy: c.accuracy(examples)?,
        majority_rate: rec.max(1.0 - rec),
    })
}

/// Trains the teachers and every requested variant for `cfg.seed`, then
/// evaluates all of them on the held-out split.
pub fn run_ablation(cfg: &ExperimentConfig, corpus: &Corpus, variants: &[Variant]) -> Result<AblationReport> {
    cfg.validate()?;
    let p = Prepared::new(cfg, corpus)?;
    let mut t = Teachers::default();
    t.rec(cfg, &p)?;
    t.dial(cfg, &p, true)?;
    let needs_st = variants.iter().any(|v| v.special_tokens());
    if needs_st {
        t.classifier(cfg, &p)?;
    }
    let rec_recall = evaluate_recommender(t.rec.as_ref().unwrap(), &p.held_plain, &cfg.eval.ks)?;
    let gate = gate_diagnostics(t.dial_st.as_ref().unwrap(), &p.held_st)?;
    let classifier = match &t.classifier {
        Some(c) => Some(classifier_report(c, &p.held_st)?),
        None => None,
    };
    let mut results = Vec::new();
    for &v in variants {
        let s = train_variant(cfg, &p, &mut t, v)?;
        let cls = if v.special_tokens() { t.classifier.as_ref() } else { None };
        let (report, _) = evaluate_model(&s.model, p.heldout(v.special_tokens()), cls, cfg, &p.heldout_ids)?;
        info!("{}: F1@1 {:?}", v.name(), report.f1_at(1));
        let latency = if cfg.eval.bench_tokens > 0 {
            let ctx: Vec<Vec<usize>> = p.heldout(v.special_tokens()).iter().take(64).map(|e| e.context.clone()).collect();
            Some(latency_bench(&s.model, &ctx, cfg.eval.bench_tokens, cfg.eval.bench_warmup, cfg.eval.decode.max_new_tokens)?)
        } else {
            None
        };
        results.push(VariantResult {
            variant: v,
            report,
            gate: s.gate,
            latency,
        });
    }
    let mismatch = match results.iter().find(|r| r.variant == Variant::Vanilla) {
        Some(r) => mismatch_report(&cfg.eval.ks, &rec_recall, &r.report.rer)?,
        None => Vec::new(),
    };
    Ok(AblationReport {
        seed: cfg.seed,
        ks: cfg.eval.ks.clone(),
        rec_recall,
        gate,
        classifier,
        mismatch,
        variants: results,
    })
}

/// Mean of `f` over reports, skipping absent values.
pub fn mean_over<F: Fn(&AblationReport) -> Option<f64>>(reports: &[AblationReport], f: F) -> Option<f64> {
    let v: Vec<f64> = reports.iter().filter_map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Plain-text ablation table, one row per variant, averaged over reports.
pub fn ablation_table(reports: &[AblationReport]) -> String {
    let Some(first) = reports.first() else {
        return String::new();
    };
    let mut s = format!("{:<12} {:>8} {:>8} {:>8} {:>9} {:>8} {:>8}\n", "variant", "F1@1", "ReR@1", "PrR@1", "RecRatio", "PPL", "DIST-2");
    for r in &first.variants {
        let v = r.variant;
        let m = |f: &dyn Fn(&MetricReport) -> Option<f64>| mean_over(reports, |a| a.variant(v).and_then(f)).unwrap_or(f64::NAN);
        s += &format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>8.3} {:>8.4}\n",
            v.name(),
            m(&|x| x.f1.first().copied()),
            m(&|x| x.rer.first().copied()),
            m(&|x| x.prr.first().copied()),
            m(&|x| Some(x.rec_ratio)),
            m(&|x| x.ppl),
            m(&|x| x.dist.first().copied()),
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticConfig;
    use crate::dialogue::LmConfig;
    use crate::train::TrainConfig;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::with_seed(5);
        c.data = SyntheticConfig {
            n_users: 20,
            n_items: 40,
            n_attributes: 10,
            n_dialogues: 40,
            ..Default::default()
        };
        c.heldout_fraction = 0.2;
        let quick = TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..Default::default()
        };
        c.rec.train = quick.clone();
        c.lm = LmConfig {
            model: conkd_nn::TransformerConfig {
                layers: 1,
                hidden: 8,
                heads: 2,
                ffn: 16,
                max_len: 48,
                dropout: 0.1,
            },
            train: quick.clone(),
        };
        c.classifier = c.lm.clone();
        c.eval.max_turns = Some(40);
        c.eval.decode.max_new_tokens = 6;
        c.eval.bench_tokens = 0;
        c
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!(Variant::parse("other").is_err());
        let d = DistillConfig::default();
        assert!(Variant::Vanilla.distill(&d).is_none());
        let r = Variant::PlusR.distill(&d).unwrap();
        assert!(!r.use_dialogue_teacher && r.use_rec_teacher && !r.use_special_tokens);
        assert_eq!(Variant::FixedGate.distill(&d).unwrap().gate, GateMode::Fixed { value: 0.5 });
    }

    #[test]
    fn corpus_files_round_trip() {
        let cfg = tiny();
        let c = Corpus::synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(&cfg, dir.path()).unwrap();
        assert_eq!(back.dialogues, c.dialogues);
        assert_eq!(back.item_triples, c.item_triples);
    }

    #[test]
    fn tiny_ablation_is_deterministic() {
        let cfg = tiny();
        let corpus = Corpus::synthetic(&cfg).unwrap();
        let vs = [Variant::Vanilla, Variant::PlusDRST];
        let a = run_ablation(&cfg, &corpus, &vs).unwrap();
        let b = run_ablation(&cfg, &corpus, &vs).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.variants.len(), 2);
        assert_eq!(a.mismatch.len(), 3);
        let t = ablation_table(&[a.clone(), b]);
        assert_eq!(t.lines().count(), 3);
        let st = a.variant(Variant::PlusDRST).unwrap();
        assert!(st.ppl.unwrap() >= 1.0);
        assert!(a.gate.lambda_r.is_some());
    }
}

use std::io::Write;
use std::path::{Path, PathBuf};

use conkd::checkpoint::Checkpoint;
use conkd::classifier::TurnClassifier;
use conkd::config::ExperimentConfig;
use conkd::data::{Catalog, Vocabulary};
use conkd::dialogue::LanguageModel;
use conkd::eval::latency_bench;
use conkd::experiment::{
    ablation_table, classifier_report, evaluate_model, evaluate_recommender, run_ablation, train_dialogue_teacher, train_rec_teacher,
    train_turn_classifier, train_variant, AblationReport, Corpus, Prepared, Teachers, Variant, CATALOG_FILE, DIALOGUES_FILE, ITEM_KG_FILE,
    WORD_KG_FILE,
};
use conkd::recommender::RecTeacher;
use conkd::{Error, Result};
use log::info;

use crate::args::{Cli, Command};
use crate::serve::{self, ChatModels};

pub const REC_FILE: &str = "rec_teacher.ckpt";
pub const CLASSIFIER_FILE: &str = "classifier.ckpt";
pub const CONFIG_ECHO: &str = "config.toml";
pub const ABLATION_FILE: &str = "ablation.json";

pub fn dial_file(special_tokens: bool) -> &'static str {
    if special_tokens {
        "dial_st.ckpt"
    } else {
        "dial_plain.ckpt"
    }
}

pub fn student_file(v: Variant) -> String {
    let slug = match v {
        Variant::Vanilla => "vanilla",
        Variant::PlusD => "plus_d",
        Variant::PlusR => "plus_r",
        Variant::PlusDR => "plus_dr",
        Variant::PlusDRST => "plus_dr_st",
        Variant::FixedGate => "lambda_0.5",
    };
    format!("student_{slug}.ckpt")
}

/// Reads the config, with `seed` overriding the file's. The seed is
/// mandatory: it must come from one of the two.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return seed
            .map(ExperimentConfig::with_seed)
            .ok_or_else(|| Error::Config("a seed is required: pass --seed or a config that sets one".into()));
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string().trim().replace('\n', " ")))?;
    if seed.is_some() && !table.contains_key("seed") {
        table.insert("seed".into(), toml::Value::Integer(0));
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn missing(path: &Path, hint: &str) -> Error {
    Error::InvalidArgument(format!("{} not found; {hint}", path.display()))
}

fn corpus_paths(cfg: &ExperimentConfig, out: &Path) -> [PathBuf; 4] {
    let p = &cfg.paths;
    let pick = |o: &Option<PathBuf>, f: &str| o.clone().unwrap_or_else(|| out.join(f));
    [
        pick(&p.dialogues, DIALOGUES_FILE),
        pick(&p.catalog, CATALOG_FILE),
        pick(&p.item_kg, ITEM_KG_FILE),
        pick(&p.word_kg, WORD_KG_FILE),
    ]
}

fn has_corpus(cfg: &ExperimentConfig, out: &Path) -> bool {
    corpus_paths(cfg, out).iter().all(|p| p.exists())
}

pub fn load_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<Corpus> {
    for p in corpus_paths(cfg, out) {
        if !p.exists() {
            return Err(missing(&p, "run gen-data first or set [paths] in the config"));
        }
    }
    Corpus::load(cfg, out)
}

fn checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(missing(path, "train it first"));
    }
    Checkpoint::load(path)
}

pub fn load_lm(path: &Path) -> Result<(LanguageModel, String)> {
    LanguageModel::from_checkpoint(&checkpoint(path)?)
}

pub fn load_classifier(path: &Path) -> Result<TurnClassifier> {
    TurnClassifier::from_checkpoint(&checkpoint(path)?)
}

pub fn load_rec(path: &Path) -> Result<RecTeacher> {
    RecTeacher::from_checkpoint(&checkpoint(path)?)
}

pub fn same_vocab(expected: &Vocabulary, found: &Vocabulary, what: &str) -> Result<()> {
    if expected != found {
        return Err(Error::Checkpoint(format!(
            "{what} vocabulary ({} tokens, {} items) does not match ({} tokens, {} items)",
            found.len(),
            found.n_items(),
            expected.len(),
            expected.n_items()
        )));
    }
    Ok(())
}

pub fn same_items(vocab: &Vocabulary, rec: &RecTeacher) -> Result<()> {
    if rec.n_items != vocab.n_items() {
        return Err(Error::Checkpoint(format!(
            "recommender scores {} items, vocabulary has {}",
            rec.n_items,
            vocab.n_items()
        )));
    }
    Ok(())
}

/// Whether a language model checkpoint was trained on tagged agent turns.
pub fn role_uses_special_tokens(role: &str) -> bool {
    role == "dial_st"
        || role
            .strip_prefix("student:")
            .and_then(|v| Variant::parse(v).ok())
            .is_some_and(Variant::special_tokens)
}

fn save(c: &Checkpoint, path: &Path) -> Result<()> {
    c.save(path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out)?;
    match cli.command {
        Command::GenData => gen_data(&cfg, out),
        Command::TrainRec => {
            let p = Prepared::new(&cfg, &load_corpus(&cfg, out)?)?;
            let m = train_rec_teacher(&cfg, &p)?;
            let r = evaluate_recommender(&m, &p.held_plain, &cfg.eval.ks)?;
            for (k, x) in cfg.eval.ks.iter().zip(&r) {
                println!("R@{k} {x:.4}");
            }
            save(&m.to_checkpoint(cfg.seed)?, &out.join(REC_FILE))
        }
        Command::TrainDial { special_tokens } => {
            let p = Prepared::new(&cfg, &load_corpus(&cfg, out)?)?;
            let m = train_dialogue_teacher(&cfg, &p, special_tokens)?;
            let role = if special_tokens { "dial_st" } else { "dial_plain" };
            println!("held-out PPL {:.4}", m.perplexity(p.heldout(special_tokens))?);
            save(&m.to_checkpoint(role, cfg.seed)?, &out.join(dial_file(special_tokens)))
        }
        Command::TrainClassifier => {
            let p = Prepared::new(&cfg, &load_corpus(&cfg, out)?)?;
            let m = train_turn_classifier(&cfg, &p)?;
            let r = classifier_report(&m, &p.held_st)?;
            println!("held-out accuracy {:.4} (majority {:.4})", r.accuracy, r.majority_rate);
            save(&m.to_checkpoint(cfg.seed)?, &out.join(CLASSIFIER_FILE))
        }
        Command::TrainStudent { variant } => train_student(&cfg, out, Variant::parse(&variant)?),
        Command::Evaluate { model, classifier, rec } => evaluate(&cfg, out, &model, classifier.as_deref(), rec.as_deref()),
        Command::Ablate { variants, seeds } => {
            let vs = variants.iter().map(|v| Variant::parse(v.trim())).collect::<Result<Vec<_>>>()?;
            ablate(&cfg, out, &vs, &seeds)
        }
        Command::Bench { model } => {
            let p = Prepared::new(&cfg, &load_corpus(&cfg, out)?)?;
            let (m, role) = load_lm(&model)?;
            same_vocab(&p.dataset.vocab, &m.vocab, "model")?;
            let ctx: Vec<Vec<usize>> = p.heldout(role_uses_special_tokens(&role)).iter().take(64).map(|e| e.context.clone()).collect();
            let r = latency_bench(&m, &ctx, cfg.eval.bench_tokens.max(1), cfg.eval.bench_warmup, cfg.eval.decode.max_new_tokens)?;
            println!("{}", r.display());
            Ok(())
        }
        Command::Serve {
            student,
            classifier,
            rec,
            host,
            port,
            top_k,
        } => {
            let (lm, _) = load_lm(&student)?;
            let cls = classifier.as_deref().map(load_classifier).transpose()?;
            let rec = rec.as_deref().map(load_rec).transpose()?;
            let catalog = catalog_for(&cfg, out)?;
            let models = ChatModels::new(lm, cls, rec, catalog.as_ref(), &cfg, top_k)?;
            serve::serve(models, &host, port)
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let c = Corpus::synthetic(cfg)?;
    c.save(out)?;
    std::fs::write(out.join(CONFIG_ECHO), cfg.to_toml()?)?;
    println!(
        "wrote {} dialogues, {} items, {} item triples, {} word triples to {}",
        c.dialogues.len(),
        c.catalog.len(),
        c.item_triples.len(),
        c.word_triples.len(),
        out.display()
    );
    Ok(())
}

fn train_student(cfg: &ExperimentConfig, out: &Path, v: Variant) -> Result<()> {
    let p = Prepared::new(cfg, &load_corpus(cfg, out)?)?;
    let vocab = &p.dataset.vocab;
    let mut t = Teachers::default();
    if let Some(d) = v.distill(&cfg.distill) {
        if d.use_rec_teacher {
            let rec = load_rec(&out.join(REC_FILE))?;
            same_items(vocab, &rec)?;
            t.rec = Some(rec);
        }
        if d.use_dialogue_teacher {
            let st = v.special_tokens();
            let (dial, _) = load_lm(&out.join(dial_file(st)))?;
            same_vocab(vocab, &dial.vocab, "dialogue teacher")?;
            if st {
                t.dial_st = Some(dial);
            } else {
                t.dial_plain = Some(dial);
            }
        }
    }
    let s = train_variant(cfg, &p, &mut t, v)?;
    if let Some(g) = &s.gate {
        info!("gate: {g:?}");
    }
    println!("held-out PPL {:.4}", s.model.perplexity(p.heldout(v.special_tokens()))?);
    save(&s.model.to_checkpoint(&format!("student:{}", v.name()), cfg.seed)?, &out.join(student_file(v)))
}

fn evaluate(cfg: &ExperimentConfig, out: &Path, model: &Path, classifier: Option<&Path>, rec: Option<&Path>) -> Result<()> {
    let p = Prepared::new(cfg, &load_corpus(cfg, out)?)?;
    let vocab = &p.dataset.vocab;
    let (m, role) = load_lm(model)?;
    same_vocab(vocab, &m.vocab, "model")?;
    let cls = classifier.map(load_classifier).transpose()?;
    if let Some(c) = &cls {
        same_vocab(vocab, &c.vocab, "classifier")?;
    }
    let st = cls.is_some() || role_uses_special_tokens(&role);
    let (mut report, records) = evaluate_model(&m, p.heldout(st), cls.as_ref(), cfg, &p.heldout_ids)?;
    if let Some(path) = rec {
        let r = load_rec(path)?;
        same_items(vocab, &r)?;
        report.recall = Some(evaluate_recommender(&r, &p.held_plain, &cfg.eval.ks)?);
    }
    let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    print!("{}", report.table(stem));
    write_json(&out.join(format!("{stem}.metrics.json")), &report)?;
    let path = out.join(format!("{stem}.records.jsonl"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

/// One ablation per seed. An existing corpus is reused for every seed;
/// otherwise each seed gets its own synthetic corpus.
fn ablate(cfg: &ExperimentConfig, out: &Path, variants: &[Variant], seeds: &[u64]) -> Result<()> {
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let shared = if has_corpus(cfg, out) { Some(load_corpus(cfg, out)?) } else { None };
    let mut reports: Vec<AblationReport> = Vec::new();
    for s in seeds {
        let mut c = cfg.clone();
        c.seed = s;
        let corpus = match &shared {
            Some(x) => x.clone(),
            None => {
                c.data.seed = s;
                Corpus::synthetic(&c)?
            }
        };
        info!("ablation seed {s}");
        reports.push(run_ablation(&c, &corpus, variants)?);
    }
    print!("{}", ablation_table(&reports));
    write_json(&out.join(ABLATION_FILE), &reports)
}

/// Catalog for item titles: the configured or generated one when present.
fn catalog_for(cfg: &ExperimentConfig, out: &Path) -> Result<Option<Catalog>> {
    let path = corpus_paths(cfg, out)[1].clone();
    if path.exists() {
        Ok(Some(Catalog::load(&path)?))
    } else {
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        assert_eq!(load_config(None, None).unwrap_err().kind(), "config");
        assert_eq!(load_config(None, Some(4)).unwrap().seed, 4);
    }

    #[test]
    fn flag_seed_overrides_or_fills_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let with = dir.path().join("a.toml");
        std::fs::write(&with, "seed = 3\n[data]\nn_dialogues = 7\n").unwrap();
        assert_eq!(load_config(Some(&with), None).unwrap().seed, 3);
        let c = load_config(Some(&with), Some(9)).unwrap();
        assert_eq!((c.seed, c.data.n_dialogues), (9, 7));
        let without = dir.path().join("b.toml");
        std::fs::write(&without, "[data]\nn_dialogues = 7\n").unwrap();
        assert_eq!(load_config(Some(&without), None).unwrap_err().kind(), "config");
        assert_eq!(load_config(Some(&without), Some(u64::MAX)).unwrap().seed, u64::MAX);
    }

    #[test]
    fn roles_select_the_tagged_view() {
        assert!(role_uses_special_tokens("dial_st"));
        assert!(!role_uses_special_tokens("dial_plain"));
        assert!(role_uses_special_tokens("student:+D&R&ST"));
        assert!(role_uses_special_tokens("student:lambda=0.5"));
        assert!(!role_uses_special_tokens("student:+D&R"));
    }

    #[test]
    fn student_files_are_distinct() {
        let names: std::collections::BTreeSet<String> = Variant::ALL.iter().map(|&v| student_file(v)).collect();
        assert_eq!(names.len(), Variant::ALL.len());
    }
}

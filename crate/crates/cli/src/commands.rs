//! The `sda` subcommands. Each writes its artifacts plus a
//! `<command>.manifest.json` into the output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use serde_json::json;

use sda_core::data::{generate_synthetic, Corpus, Dataset};
use sda_core::inference::predict_dataset;
use sda_core::models::{Model, ModelConfig, ModelKind, ModelManifest};
use sda_core::probes::{export_representations, probe_runs, representations_to_tsv, ProbeSummary, ProbeTarget, Representation};
use sda_core::text::{TokenMode, Vocab};
use sda_core::training::{evaluate, log_to_jsonl, train};

use crate::config::{Regime, RunConfig, Split};
use crate::report::{eval_table, eval_tsv, summarize as summarize_rows, summary_table, summary_tsv, EvalRow};
use crate::{emit, CliError, Result};

pub const CODE_VERSION: &str = concat!("sda ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
    #[serde(default)]
    pub results: serde_json::Value,
}

fn config_err(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))?;
    emit(&json!({"level": "info", "event": "artifact", "path": path.display().to_string()}));
    Ok(())
}

fn manifest_path(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.manifest.json"))
}

/// Written last, so its presence means every listed artifact exists.
fn write_manifest(cfg: &RunConfig, command: &str, artifacts: &[PathBuf], results: serde_json::Value) -> Result<()> {
    let m = Manifest {
        command: command.into(),
        code_version: CODE_VERSION.into(),
        config: cfg.resolved.clone(),
        seeds: cfg.seeds().into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
        artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        results,
    };
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n";
    write(&manifest_path(&cfg.output, command), text)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

// ------------------------------------------------------------ data

fn load_corpus(path: &Path, mode: TokenMode) -> Result<Corpus> {
    if !path.exists() {
        return Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Ok(Corpus::load(path, mode)?)
}

/// Training corpus after removing held-out domains and applying the regime.
fn training_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = cfg.train_path.as_deref().ok_or_else(|| config_err("train", "a training corpus is required"))?;
    let full = load_corpus(path, cfg.mode)?;
    let held = &cfg.held_out;
    let kept = full.filter(|d| match &d.domain {
        Some(x) => !held.contains(x),
        None => cfg.regime != Regime::Supervised,
    })?;
    Ok(match cfg.regime {
        Regime::Unsupervised => kept.without_domains()?,
        _ => kept,
    })
}

/// (dev, test): the configured files, or the held-out domains of the
/// training file split 4:6.
fn dev_test(cfg: &RunConfig) -> Result<(Corpus, Corpus)> {
    if let (Some(d), Some(t)) = (&cfg.dev_path, &cfg.test_path) {
        return Ok((load_corpus(d, cfg.mode)?, load_corpus(t, cfg.mode)?));
    }
    if cfg.held_out.is_empty() {
        return Err(config_err("dev", "set dev and test, or held_out to split them from the training corpus"));
    }
    let path = cfg.train_path.as_deref().ok_or_else(|| config_err("train", "a training corpus is required"))?;
    let held = load_corpus(path, cfg.mode)?.in_domains(&cfg.held_out)?;
    let (dev, test) = held.split_dev_test(4, 6, cfg.split_seed)?;
    let dev = match &cfg.dev_path {
        Some(d) => load_corpus(d, cfg.mode)?,
        None => dev,
    };
    let test = match &cfg.test_path {
        Some(t) => load_corpus(t, cfg.mode)?,
        None => test,
    };
    Ok((dev, test))
}

fn build_vocab(cfg: &RunConfig, corpus: &Corpus) -> Vocab {
    match cfg.mode {
        TokenMode::Byte => Vocab::bytes(),
        TokenMode::Word => Vocab::build(
            corpus.documents().iter().map(|d| d.text.as_str()),
            cfg.vocab_min_count,
            cfg.vocab_max_size,
        ),
    }
}

fn model_config(cfg: &RunConfig, labels: usize, domains: usize, vocab: usize) -> Result<ModelConfig> {
    let k = if cfg.k == 0 { domains } else { cfg.k };
    if k == 0 && cfg.model != ModelKind::Scnn {
        return Err(config_err("k", "no training domains to count; set k explicitly"));
    }
    if cfg.model == ModelKind::Dsda && cfg.regime != Regime::Unsupervised && k < domains {
        return Err(config_err("k", format!("dsda with observed domains needs k >= {domains}")));
    }
    let mut mc = ModelConfig::new(cfg.model, k, labels, domains, vocab);
    mc.encoder.embed_dim = cfg.embed_dim;
    mc.encoder.windows = cfg.windows.clone();
    mc.encoder.filters = cfg.filters;
    mc.hidden = cfg.hidden;
    mc.dropout = cfg.dropout;
    mc.label_embed = cfg.label_embed;
    mc.domain_embed = cfg.domain_embed;
    mc.domain_weight = cfg.domain_weight;
    mc.validate().map_err(|e| config_err("model", e.to_string()))?;
    Ok(mc)
}

struct Loaded {
    model: Model,
    manifest: ModelManifest,
    vocab: Vocab,
}

fn load_model(dir: &Path) -> Result<Loaded> {
    if !dir.join("model.json").exists() {
        return Err(CliError::Run(format!("{} holds no trained model (run `sda train` first)", dir.display())));
    }
    let (model, manifest) = Model::load(dir)?;
    let vocab_path = dir.join("vocab.txt");
    let vocab = Vocab::load(&vocab_path)?;
    if format!("{:016x}", vocab.hash()) != manifest.vocab_hash {
        return Err(CliError::Run(format!("{} does not match the model's vocabulary hash", vocab_path.display())));
    }
    Ok(Loaded { model, manifest, vocab })
}

fn dataset(corpus: &Corpus, loaded: &Loaded) -> Result<Dataset> {
    Ok(Dataset::new(corpus, &loaded.vocab, &loaded.manifest.labels, &loaded.manifest.domains)?)
}

// ------------------------------------------------------------ train

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainResults {
    pub best_dev_accuracy: f64,
    pub best_step: usize,
    pub steps: usize,
    pub train_instances: usize,
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainResults> {
    let corpus = training_corpus(cfg)?;
    let (dev_corpus, _) = dev_test(cfg)?;
    let vocab = build_vocab(cfg, &corpus);
    let labels = corpus.labels().to_vec();
    let domains = corpus.domains().to_vec();
    let train_data = Dataset::new(&corpus, &vocab, &labels, &domains)?;
    let dev = Dataset::new(&dev_corpus, &vocab, &labels, &domains)?;
    let mc = model_config(cfg, labels.len(), domains.len(), vocab.len())?;
    let model = Model::new(mc.clone(), cfg.train.seed)?;
    let out = train(model, &train_data, &dev, &cfg.train)?;
    let dir = &cfg.output;
    let manifest = ModelManifest {
        config: mc,
        lambda: cfg.train.lambda,
        mode: cfg.mode,
        vocab_hash: format!("{:016x}", vocab.hash()),
        labels,
        domains,
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    out.model.save(dir, &manifest)?;
    write(&dir.join("vocab.txt"), vocab.to_text())?;
    write(&dir.join("train_log.jsonl"), log_to_jsonl(&out.log))?;
    let results = TrainResults {
        best_dev_accuracy: out.best_dev_accuracy,
        best_step: out.best_step,
        steps: out.steps,
        train_instances: train_data.len(),
    };
    let artifacts = ["model.ckpt", "model.json", "vocab.txt", "train_log.jsonl"].map(|f| dir.join(f));
    write_manifest(cfg, "train", &artifacts, json!(results))?;
    println!(
        "trained {} for {} steps; best dev accuracy {:.4} at step {}",
        cfg.model, results.steps, results.best_dev_accuracy, results.best_step
    );
    Ok(results)
}

// ------------------------------------------------------------ eval

pub fn run_eval(cfg: &RunConfig, model_dir: Option<&Path>) -> Result<EvalRow> {
    let loaded = load_model(model_dir.unwrap_or(&cfg.output))?;
    let (_, test_corpus) = dev_test(cfg)?;
    let test = dataset(&test_corpus, &loaded)?;
    let infer = cfg.train.eval;
    let report = evaluate(&loaded.model, &test, &infer)?;
    let row = EvalRow::from_report(&loaded.model.config.kind.to_string(), &report);
    let preds = predict_dataset(&loaded.model, &test, &infer)?;
    let mut jsonl = String::new();
    for p in &preds {
        jsonl.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        jsonl.push('\n');
    }
    let dir = &cfg.output;
    let table = eval_table(std::slice::from_ref(&row));
    let files = [
        ("eval.txt", table.clone()),
        ("eval.tsv", eval_tsv(std::slice::from_ref(&row))),
        ("predictions.jsonl", jsonl),
    ];
    for (name, text) in &files {
        write(&dir.join(name), text)?;
    }
    let artifacts: Vec<PathBuf> = files.iter().map(|(n, _)| dir.join(n)).collect();
    write_manifest(cfg, "eval", &artifacts, json!(row))?;
    print!("{table}");
    Ok(row)
}

// ------------------------------------------------------------ sweep

fn lambda_dir(cfg: &RunConfig, lambda: f64) -> PathBuf {
    cfg.output.join(format!("lambda-{lambda}"))
}

fn config_text(cfg: &RunConfig) -> String {
    cfg.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Run `sda <command>` in a child process on a resolved config file.
fn child(command: &str, conf: &Path) -> Result<()> {
    let exe = std::env::current_exe().map_err(|e| CliError::Run(format!("cannot locate the sda binary: {e}")))?;
    let status = Command::new(exe)
        .args([command, "--config"])
        .arg(conf)
        .status()
        .map_err(|e| CliError::Run(format!("cannot start child run: {e}")))?;
    if !status.success() {
        return Err(CliError::Run(format!("child `{command}` on {} failed with {status}", conf.display())));
    }
    Ok(())
}

pub fn run_sweep(cfg: &RunConfig, child_runs: bool) -> Result<()> {
    let mut rows = Vec::new();
    let mut tsv = String::from("lambda\tbest_dev_accuracy\ttest_average\ttest_overall\n");
    for &lambda in &cfg.lambdas {
        let dir = lambda_dir(cfg, lambda);
        let sub = cfg.with("lambda", &lambda.to_string())?.with("output", &dir.display().to_string())?;
        let (trained, row) = if child_runs {
            let conf = dir.join("run.conf");
            write(&conf, config_text(&sub))?;
            child("train", &conf)?;
            child("eval", &conf)?;
            let t: TrainResults = serde_json::from_value(read_manifest(&manifest_path(&dir, "train"))?.results)
                .map_err(|e| CliError::Run(e.to_string()))?;
            let r: EvalRow = serde_json::from_value(read_manifest(&manifest_path(&dir, "eval"))?.results)
                .map_err(|e| CliError::Run(e.to_string()))?;
            (t, r)
        } else {
            (run_train(&sub)?, run_eval(&sub, None)?)
        };
        tsv.push_str(&format!("{lambda}\t{}\t{}\t{}\n", trained.best_dev_accuracy, row.average, row.overall));
        rows.push(EvalRow {
            model: format!("lambda={lambda}"),
            ..row
        });
    }
    let table = eval_table(&rows);
    write(&cfg.output.join("sweep.tsv"), &tsv)?;
    write(&cfg.output.join("sweep.txt"), &table)?;
    write_manifest(
        cfg,
        "sweep-lambda",
        &[cfg.output.join("sweep.tsv"), cfg.output.join("sweep.txt")],
        json!(rows),
    )?;
    print!("{table}");
    Ok(())
}

// ------------------------------------------------------------ probe

pub fn run_probe(cfg: &RunConfig) -> Result<Vec<(f64, ProbeSummary)>> {
    if !cfg.model.is_csda() {
        return Err(config_err("model", format!("{} has no latent gate to probe", cfg.model)));
    }
    let mut out = Vec::new();
    let mut tsv = String::from("lambda\ttarget\tmean\tstd_error\tchance\truns\n");
    for &lambda in &cfg.lambdas {
        let dir = lambda_dir(cfg, lambda);
        let sub = cfg.with("lambda", &lambda.to_string())?.with("output", &dir.display().to_string())?;
        if !dir.join("model.json").exists() {
            run_train(&sub)?;
        }
        let loaded = load_model(&dir)?;
        let data = dataset(&training_corpus(&sub)?, &loaded)?;
        let mut targets = vec![ProbeTarget::Label];
        if loaded.manifest.domains.len() >= 2 {
            targets.push(ProbeTarget::Domain);
        }
        for target in targets {
            let s = probe_runs(&loaded.model, &data, target, cfg.probe_seed)?;
            let runs: Vec<String> = s.runs.iter().map(|r| r.to_string()).collect();
            let name = match target {
                ProbeTarget::Label => "y",
                ProbeTarget::Domain => "d",
            };
            tsv.push_str(&format!("{lambda}\t{name}\t{}\t{}\t{}\t{}\n", s.mean, s.std_error, s.chance, runs.join(",")));
            println!("lambda {lambda:<8} {name}-probe {:.4} ± {:.4} (chance {:.3})", s.mean, s.std_error, s.chance);
            out.push((lambda, s));
        }
    }
    let path = cfg.output.join("probe.tsv");
    write(&path, &tsv)?;
    let results: Vec<_> = out.iter().map(|(l, s)| json!({"lambda": l, "summary": s})).collect();
    write_manifest(cfg, "probe", &[path], json!(results))?;
    Ok(out)
}

// ------------------------------------------------------------ export

pub fn run_export(cfg: &RunConfig, model_dir: Option<&Path>) -> Result<PathBuf> {
    let loaded = load_model(model_dir.unwrap_or(&cfg.output))?;
    let corpus = match cfg.export_split {
        Split::Train => training_corpus(cfg)?,
        Split::Dev => dev_test(cfg)?.0,
        Split::Test => dev_test(cfg)?.1,
    };
    let data = dataset(&corpus, &loaded)?;
    let rows = export_representations(&loaded.model, &data, cfg.export, cfg.probe_seed)?;
    let what = match cfg.export {
        Representation::Gate => "gate",
        Representation::Hidden => "hidden",
    };
    let split = match cfg.export_split {
        Split::Train => "train",
        Split::Dev => "dev",
        Split::Test => "test",
    };
    let path = cfg.output.join(format!("representations-{what}-{split}.tsv"));
    write(&path, representations_to_tsv(&rows))?;
    write_manifest(cfg, "export", std::slice::from_ref(&path), json!({"rows": rows.len()}))?;
    Ok(path)
}

// ------------------------------------------------------------ gen-synth

pub fn run_gen_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let corpus = generate_synthetic(&cfg.synth)?;
    let path = cfg.corpus.clone().unwrap_or_else(|| cfg.output.join("corpus.jsonl"));
    write(&path, corpus.to_jsonl())?;
    write_manifest(
        cfg,
        "gen-synth",
        std::slice::from_ref(&path),
        json!({"documents": corpus.len(), "held_out": cfg.synth.held_out_names(), "spec": cfg.synth}),
    )?;
    println!("wrote {} documents to {}", corpus.len(), path.display());
    Ok(path)
}

// ------------------------------------------------------------ summarize

/// Mean ± std per column over eval manifests (or directories holding one).
pub fn run_summarize(inputs: &[PathBuf], tsv: bool) -> Result<String> {
    if inputs.is_empty() {
        return Err(config_err("manifests", "give at least one eval manifest"));
    }
    let mut rows = Vec::new();
    for p in inputs {
        let path = if p.is_dir() { manifest_path(p, "eval") } else { p.clone() };
        let m = read_manifest(&path)?;
        if m.command != "eval" {
            return Err(CliError::Run(format!("{} is a {} manifest, not eval", path.display(), m.command)));
        }
        let row: EvalRow = serde_json::from_value(m.results).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    let summary = summarize_rows(&rows)?;
    Ok(if tsv { summary_tsv(&summary) } else { summary_table(&summary) })
}


//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, later lines win. Every key
//! has a default; unknown keys are rejected. Relative paths in `output` are
//! resolved against `$SDA_OUTPUT_ROOT` when it is set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sda_core::data::SynthSpec;
use sda_core::inference::{InferConfig, Strategy};
use sda_core::models::ModelKind;
use sda_core::text::TokenMode;
use sda_core::training::{LambdaSchedule, TrainConfig, LAMBDA_GRID};

use crate::CliError;

pub const OUTPUT_ROOT_VAR: &str = "SDA_OUTPUT_ROOT";

/// (key, default, description). The defaults of the `synth.*` keys mirror
/// `SynthSpec::default()`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model", "csda-dirichlet", "scnn | mcnn | dsda | csda-beta | csda-dirichlet"),
    ("k", "0", "channels / latent dimensions; 0 = number of training domains"),
    ("lambda", "0.1", "KL weight"),
    ("schedule", "fixed", "fixed | anneal (linear ramp from 0 to lambda)"),
    ("anneal_steps", "0", "ramp length in updates; 0 = one epoch"),
    ("regime", "semi-supervised", "supervised (drop documents without a domain) | semi-supervised | unsupervised (ignore all domains)"),
    ("mode", "word", "word | byte tokenization"),
    ("train", "", "training corpus (line records)"),
    ("dev", "", "dev corpus; when empty, held-out domains of `train` are split into dev and test"),
    ("test", "", "test corpus"),
    ("held_out", "", "comma-separated domains removed from training (and split 4:6 into dev/test when dev/test are unset)"),
    ("split_seed", "0", "seed of the dev/test split"),
    ("embed_dim", "300", "word/byte embedding size"),
    ("windows", "3,4,5", "convolution window sizes"),
    ("filters", "128", "filters per window"),
    ("hidden", "300", "hidden units of the classifier head"),
    ("dropout", "0.5", "dropout rate on channel outputs"),
    ("label_embed", "4", "label embedding size of the inference network"),
    ("domain_embed", "16", "domain embedding size of the inference network"),
    ("domain_weight", "1.0", "weight of the DSDA domain-supervision term"),
    ("vocab_min_count", "1", "minimum token count for the word vocabulary"),
    ("vocab_max_size", "0", "maximum vocabulary size; 0 = unlimited"),
    ("learning_rate", "1e-4", "Adam step size"),
    ("batch_size", "32", "instances per update"),
    ("max_epochs", "20", "epoch limit"),
    ("patience", "5", "dev evaluations without improvement before stopping"),
    ("evals_per_epoch", "2", "dev evaluations per epoch"),
    ("seed", "0", "initialization, shuffling and sampling seed"),
    ("strategy", "prior-sample", "prior-sample | prior-mean | mc-average | importance-sampling"),
    ("samples", "100", "samples for mc-average and importance-sampling"),
    ("infer_seed", "0", "seed of prediction-time sampling"),
    ("lambdas", "", "comma-separated lambda values for sweep-lambda and probe; empty = the 9-value grid"),
    ("probe_seed", "0", "seed of probe sampling and splits"),
    ("export", "gate", "gate | hidden"),
    ("export_split", "train", "train | dev | test"),
    ("output", "runs/default", "output directory"),
    ("corpus", "", "gen-synth output file; empty = <output>/corpus.jsonl"),
    ("synth.num_domains", "6", "synthetic domains"),
    ("synth.held_out", "4,5", "held-out synthetic domain indices"),
    ("synth.groups", "2", "domain groups"),
    ("synth.instances_per_domain", "200", "documents per domain"),
    ("synth.filler_vocab", "30", "filler words per domain"),
    ("synth.overlap", "0.5", "share of filler words drawn from the group pool"),
    ("synth.shared_cue_rate", "0.8", "share of cue words drawn from the shared list"),
    ("synth.cues_per_class", "4", "cue words per class"),
    ("synth.doc_len", "20", "tokens per document"),
    ("synth.cues_per_doc", "3", "cue tokens per document"),
    ("synth.noise_rate", "0", "label noise"),
    ("synth.positive_rate", "0.5", "probability of the positive class"),
    ("synth.unlabeled_domain_rate", "0", "share of training documents written without a domain"),
    ("synth.seed", "0", "generator seed"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    Supervised,
    SemiSupervised,
    Unsupervised,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelKind,
    pub k: usize,
    pub regime: Regime,
    pub mode: TokenMode,
    pub train_path: Option<PathBuf>,
    pub dev_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub held_out: Vec<String>,
    pub split_seed: u64,
    pub embed_dim: usize,
    pub windows: Vec<usize>,
    pub filters: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub label_embed: usize,
    pub domain_embed: usize,
    pub domain_weight: f64,
    pub vocab_min_count: usize,
    pub vocab_max_size: Option<usize>,
    pub train: TrainConfig,
    pub lambdas: Vec<f64>,
    pub probe_seed: u64,
    pub export: sda_core::probes::Representation,
    pub export_split: Split,
    pub output: PathBuf,
    pub corpus: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Every key with its effective value, for manifests.
    pub resolved: BTreeMap<String, String>,
}

fn field(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: key.to_owned(),
        message: message.into(),
    }
}

/// Parse the text of a config file into raw key/value pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(field("", format!("line {}: expected `key = value`, got `{line}`", n + 1)));
        };
        out.push((k.trim().to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

/// Split a `--set key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String), CliError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_owned(), v.trim().to_owned()))
        .ok_or_else(|| field("", format!("override `{s}` is not key=value")))
}

struct Raw(BTreeMap<String, String>);

impl Raw {
    fn get(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).expect("every key has a default")
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key).parse().map_err(|e| field(key, format!("`{}`: {e}", self.get(key))))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| field(key, format!("`{s}`: {e}"))))
            .collect()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }
}

pub fn output_root() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from)
}

fn resolve_output(p: PathBuf) -> PathBuf {
    match output_root() {
        Some(root) if p.is_relative() => root.join(p),
        _ => p,
    }
}

impl RunConfig {
    /// Defaults, then `pairs` in order. Unknown keys and bad values are
    /// reported with the offending key.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, CliError> {
        let mut map: BTreeMap<String, String> = KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        for (k, v) in pairs {
            if !map.contains_key(k) {
                return Err(field(k, "unknown key (see `sda --help` for the list)"));
            }
            map.insert(k.clone(), v.clone());
        }
        let raw = Raw(map);
        let model: ModelKind = raw.parse("model")?;
        let regime = match raw.get("regime") {
            "supervised" => Regime::Supervised,
            "semi-supervised" => Regime::SemiSupervised,
            "unsupervised" => Regime::Unsupervised,
            other => return Err(field("regime", format!("`{other}` is not supervised, semi-supervised or unsupervised"))),
        };
        let lambda: f64 = raw.parse("lambda")?;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(field("lambda", "must be finite and >= 0"));
        }
        let schedule = match raw.get("schedule") {
            "fixed" => LambdaSchedule::Fixed,
            "anneal" => {
                let n: usize = raw.parse("anneal_steps")?;
                LambdaSchedule::LinearAnneal { steps: (n > 0).then_some(n) }
            }
            other => return Err(field("schedule", format!("`{other}` is not fixed or anneal"))),
        };
        let strategy: Strategy = raw.parse("strategy")?;
        let train = TrainConfig {
            lambda,
            schedule,
            learning_rate: raw.parse("learning_rate")?,
            batch_size: raw.parse("batch_size")?,
            max_epochs: raw.parse("max_epochs")?,
            patience: raw.parse("patience")?,
            evals_per_epoch: raw.parse("evals_per_epoch")?,
            seed: raw.parse("seed")?,
            eval: InferConfig {
                strategy,
                samples: raw.parse("samples")?,
                seed: raw.parse("infer_seed")?,
            },
        };
        train.validate().map_err(|e| field("training", e.to_string()))?;
        let mut lambdas: Vec<f64> = raw.list("lambdas")?;
        if lambdas.is_empty() {
            lambdas = LAMBDA_GRID.to_vec();
        }
        if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(field("lambdas", format!("{bad} must be finite and >= 0")));
        }
        let windows: Vec<usize> = raw.list("windows")?;
        if windows.is_empty() || windows.contains(&0) {
            return Err(field("windows", "need at least one positive window size"));
        }
        let dropout: f64 = raw.parse("dropout")?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(field("dropout", "must be in [0, 1)"));
        }
        let max_size: usize = raw.parse("vocab_max_size")?;
        let synth = SynthSpec {
            num_domains: raw.parse("synth.num_domains")?,
            held_out: raw.list("synth.held_out")?,
            groups: raw.parse("synth.groups")?,
            instances_per_domain: raw.parse("synth.instances_per_domain")?,
            filler_vocab: raw.parse("synth.filler_vocab")?,
            overlap: raw.parse("synth.overlap")?,
            shared_cue_rate: raw.parse("synth.shared_cue_rate")?,
            cues_per_class: raw.parse("synth.cues_per_class")?,
            doc_len: raw.parse("synth.doc_len")?,
            cues_per_doc: raw.parse("synth.cues_per_doc")?,
            noise_rate: raw.parse("synth.noise_rate")?,
            positive_rate: raw.parse("synth.positive_rate")?,
            unlabeled_domain_rate: raw.parse("synth.unlabeled_domain_rate")?,
            seed: raw.parse("synth.seed")?,
        };
        synth.validate().map_err(|e| field("synth", e.to_string()))?;
        let export = match raw.get("export") {
            "gate" => sda_core::probes::Representation::Gate,
            "hidden" => sda_core::probes::Representation::Hidden,
            other => return Err(field("export", format!("`{other}` is not gate or hidden"))),
        };
        let export_split = match raw.get("export_split") {
            "train" => Split::Train,
            "dev" => Split::Dev,
            "test" => Split::Test,
            other => return Err(field("export_split", format!("`{other}` is not train, dev or test"))),
        };
        let output = resolve_output(raw.path("output").ok_or_else(|| field("output", "must not be empty"))?);
        Ok(Self {
            model,
            k: raw.parse("k")?,
            regime,
            mode: raw.parse("mode")?,
            train_path: raw.path("train"),
            dev_path: raw.path("dev"),
            test_path: raw.path("test"),
            held_out: raw.list("held_out")?,
            split_seed: raw.parse("split_seed")?,
            embed_dim: raw.parse("embed_dim")?,
            windows,
            filters: raw.parse("filters")?,
            hidden: raw.parse("hidden")?,
            dropout,
            label_embed: raw.parse("label_embed")?,
            domain_embed: raw.parse("domain_embed")?,
            domain_weight: raw.parse("domain_weight")?,
            vocab_min_count: raw.parse("vocab_min_count")?,
            vocab_max_size: (max_size > 0).then_some(max_size),
            train,
            lambdas,
            probe_seed: raw.parse("probe_seed")?,
            export,
            export_split,
            output,
            corpus: raw.path("corpus"),
            synth,
            resolved: raw.0,
        })
    }

    /// Read `path` (if any) and apply `overrides` after it.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| field("config", format!("{}: {e}", p.display())))?;
                parse_pairs(&text)?
            }
            None => Vec::new(),
        };
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    /// Same configuration with one key replaced.
    pub fn with(&self, key: &str, value: &str) -> Result<Self, CliError> {
        let mut pairs: Vec<(String, String)> = self.resolved.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        pairs.retain(|(k, _)| k != key);
        pairs.push((key.to_owned(), value.to_owned()));
        Self::from_pairs(&pairs)
    }

    pub fn seeds(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("seed", self.train.seed),
            ("split_seed", self.split_seed),
            ("infer_seed", self.train.eval.seed),
            ("probe_seed", self.probe_seed),
            ("synth.seed", self.synth.seed),
        ])
    }
}

/// Key reference for `--help`.
pub fn key_help() -> String {
    let mut s = String::from("Config keys (`key = value`, `#` comments; defaults in brackets):\n");
    for (k, d, doc) in KEYS {
        s.push_str(&format!("  {k:<28} {doc} [{d}]\n"));
    }
    s.push_str(&format!(
        "\nRelative `output` paths are placed under ${OUTPUT_ROOT_VAR} when it is set.\n"
    ));
    s
}

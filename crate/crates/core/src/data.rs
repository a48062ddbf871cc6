//! Corpora in the line-record format, regime tags, dev/test splitting and
//! the synthetic multi-domain generator.
//!
//! Line-record format: UTF-8, one JSON object per line.
//!
//! ```text
//! {"id": "b-17", "text": "great read", "label": "pos", "domain": "books"}
//! {"text": "would not buy again", "label": "neg"}
//! ```
//!
//! `text` is required. `id` defaults to the 1-based line number. A missing
//! (or `null`) `label` or `domain` is the UNK sentinel. Unknown fields and
//! repeated keys are rejected.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{tokenize, TokenMode, TokenSeq, Vocab};

/// Reserved spelling of the sentinel; not allowed as a real label or domain.
pub const UNK: &str = "UNK";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub label: Option<String>,
    pub domain: Option<String>,
}

/// Which supervision a document carries, read off its fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegimeTag {
    pub has_label: bool,
    pub has_domain: bool,
}

impl Document {
    pub fn regime(&self) -> RegimeTag {
        RegimeTag {
            has_label: self.label.is_some(),
            has_domain: self.domain.is_some(),
        }
    }
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
}

/// Documents plus sorted label and domain inventories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub mode: TokenMode,
    documents: Vec<Document>,
    labels: Vec<String>,
    domains: Vec<String>,
}

fn inventory<'a, I: Iterator<Item = &'a Option<String>>>(values: I) -> Vec<String> {
    values.flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect()
}

impl Corpus {
    pub fn new(mode: TokenMode, documents: Vec<Document>) -> Result<Self> {
        if documents.is_empty() {
            return Err(Error::Invalid("corpus is empty".into()));
        }
        let mut seen = HashSet::new();
        for d in &documents {
            if !seen.insert(d.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate document id `{}`", d.id)));
            }
            if d.label.as_deref() == Some(UNK) || d.domain.as_deref() == Some(UNK) {
                return Err(Error::Invalid(format!("document `{}` uses the reserved value {UNK}", d.id)));
            }
        }
        let labels = inventory(documents.iter().map(|d| &d.label));
        let domains = inventory(documents.iter().map(|d| &d.domain));
        Ok(Self {
            mode,
            documents,
            labels,
            domains,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn parse(text: &str, mode: TokenMode, source: &str) -> Result<Self> {
        let mut docs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: source.to_owned(),
                line: line_no,
                message: e.to_string(),
            })?;
            for (field, value) in [("label", &rec.label), ("domain", &rec.domain)] {
                if value.as_deref() == Some(UNK) {
                    return Err(Error::Parse {
                        path: source.to_owned(),
                        line: line_no,
                        message: format!("{field} `{UNK}` is reserved; omit the field instead"),
                    });
                }
            }
            docs.push(Document {
                id: rec.id.unwrap_or_else(|| line_no.to_string()),
                text: rec.text,
                label: rec.label,
                domain: rec.domain,
            });
        }
        if docs.is_empty() {
            return Err(Error::Parse {
                path: source.to_owned(),
                line: 0,
                message: "no records".into(),
            });
        }
        Self::new(mode, docs).map_err(|e| Error::Parse {
            path: source.to_owned(),
            line: 0,
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path, mode: TokenMode) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, mode, &path.display().to_string())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.documents {
            let rec = Record {
                id: Some(d.id.clone()),
                text: d.text.clone(),
                label: d.label.clone(),
                domain: d.domain.clone(),
            };
            let line = serde_json::to_string(&rec).expect("records always serialize");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// Documents matching `keep`, with inventories rebuilt.
    pub fn filter<F: Fn(&Document) -> bool>(&self, keep: F) -> Result<Self> {
        Self::new(self.mode, self.documents.iter().filter(|d| keep(d)).cloned().collect())
    }

    pub fn in_domains(&self, domains: &[String]) -> Result<Self> {
        self.filter(|d| d.domain.as_ref().is_some_and(|x| domains.contains(x)))
    }

    /// Drop every domain label (the domain-unsupervised regime).
    pub fn without_domains(&self) -> Result<Self> {
        Self::new(
            self.mode,
            self.documents
                .iter()
                .map(|d| Document {
                    domain: None,
                    ..d.clone()
                })
                .collect(),
        )
    }

    pub fn concat(&self, other: &Corpus) -> Result<Self> {
        if self.mode != other.mode {
            return Err(Error::Invalid("cannot join word and byte corpora".into()));
        }
        Self::new(self.mode, self.documents.iter().chain(&other.documents).cloned().collect())
    }

    /// Seeded shuffle, then the first `dev / (dev + test)` share becomes dev.
    pub fn split_dev_test(&self, dev: usize, test: usize, seed: u64) -> Result<(Corpus, Corpus)> {
        if dev == 0 || test == 0 {
            return Err(Error::Invalid(format!("split ratio {dev}:{test} leaves a side empty")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_dev = (self.len() * dev + (dev + test) / 2) / (dev + test);
        if n_dev == 0 || n_dev == self.len() {
            return Err(Error::Invalid(format!(
                "{} documents cannot be split {dev}:{test} with both sides non-empty",
                self.len()
            )));
        }
        let pick = |ids: &[usize]| Self::new(self.mode, ids.iter().map(|&i| self.documents[i].clone()).collect());
        Ok((pick(&idx[..n_dev])?, pick(&idx[n_dev..])?))
    }
}

/// A tokenized document with inventory indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: String,
    pub seq: TokenSeq,
    pub label: Option<usize>,
    /// Index into the model's domain inventory; `None` for UNK or for a
    /// domain the model was not trained on.
    pub domain: Option<usize>,
    pub domain_name: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub labels: Vec<String>,
    pub domains: Vec<String>,
}

impl Dataset {
    /// Tokenize `corpus` against fixed inventories. Labels outside
    /// `labels` are an error; domains outside `domains` become UNK.
    pub fn new(corpus: &Corpus, vocab: &Vocab, labels: &[String], domains: &[String]) -> Result<Self> {
        let label_ix: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let domain_ix: HashMap<&str, usize> = domains.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let examples = corpus
            .documents()
            .iter()
            .map(|d| {
                let label = match &d.label {
                    None => None,
                    Some(l) => Some(
                        *label_ix
                            .get(l.as_str())
                            .ok_or_else(|| Error::Invalid(format!("document `{}` has unknown label `{l}`", d.id)))?,
                    ),
                };
                Ok(Example {
                    id: d.id.clone(),
                    seq: tokenize(&d.text, corpus.mode, vocab),
                    label,
                    domain: d.domain.as_deref().and_then(|x| domain_ix.get(x).copied()),
                    domain_name: d.domain.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            examples,
            labels: labels.to_vec(),
            domains: domains.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Parameters of the synthetic multi-domain sentiment generator.
///
/// Domain `i` belongs to group `i % groups`. Each document mixes filler
/// words with class-cue words. With probability `overlap` a filler word
/// comes from the group's shared pool (otherwise from the domain's own
/// pool). With probability `shared_cue_rate` a cue word comes from the
/// shared cue list (otherwise from the domain's own cues). Shared cues swap
/// polarity in odd-numbered groups, so reading them correctly requires
/// knowing which group a document is from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_domains: usize,
    pub held_out: Vec<usize>,
    pub groups: usize,
    pub instances_per_domain: usize,
    /// Filler vocabulary size per domain (and per group pool).
    pub filler_vocab: usize,
    pub overlap: f64,
    pub shared_cue_rate: f64,
    /// Cue words per class, in the shared list and in each domain.
    pub cues_per_class: usize,
    pub doc_len: usize,
    pub cues_per_doc: usize,
    /// Probability that a label is replaced by a uniformly drawn one.
    pub noise_rate: f64,
    /// Probability of the positive class.
    pub positive_rate: f64,
    /// Share of training-domain documents emitted without a domain.
    pub unlabeled_domain_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_domains: 6,
            held_out: vec![4, 5],
            groups: 2,
            instances_per_domain: 200,
            filler_vocab: 30,
            overlap: 0.5,
            shared_cue_rate: 0.8,
            cues_per_class: 4,
            doc_len: 20,
            cues_per_doc: 3,
            noise_rate: 0.0,
            positive_rate: 0.5,
            unlabeled_domain_rate: 0.0,
            seed: 0,
        }
    }
}

pub const SYNTH_LABELS: [&str; 2] = ["neg", "pos"];

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.num_domains == 0 || self.groups == 0 || self.groups > self.num_domains {
            return bad(format!("{} domains in {} groups", self.num_domains, self.groups));
        }
        if self.held_out.iter().any(|&h| h >= self.num_domains) {
            return bad(format!("held-out ids {:?} outside 0..{}", self.held_out, self.num_domains));
        }
        for (name, v) in [
            ("overlap", self.overlap),
            ("shared_cue_rate", self.shared_cue_rate),
            ("noise_rate", self.noise_rate),
            ("positive_rate", self.positive_rate),
            ("unlabeled_domain_rate", self.unlabeled_domain_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.instances_per_domain == 0 || self.filler_vocab == 0 || self.cues_per_class == 0 {
            return bad("instances, filler vocabulary and cue counts must be positive".into());
        }
        if self.cues_per_doc == 0 || self.cues_per_doc > self.doc_len {
            return bad(format!("{} cues in documents of {} tokens", self.cues_per_doc, self.doc_len));
        }
        Ok(())
    }

    pub fn domain_name(i: usize) -> String {
        format!("dom{i}")
    }

    pub fn held_out_names(&self) -> Vec<String> {
        self.held_out.iter().map(|&i| Self::domain_name(i)).collect()
    }

    pub fn training_names(&self) -> Vec<String> {
        (0..self.num_domains)
            .filter(|i| !self.held_out.contains(i))
            .map(Self::domain_name)
            .collect()
    }

    /// Class whose cue the shared word `j` signals within group `g`.
    pub fn shared_cue_class(&self, j: usize, g: usize) -> usize {
        (j / self.cues_per_class + g % 2) % 2
    }
}

/// Deterministic corpus for `spec` (word mode). Held-out domains keep their
/// domain labels so they can be reported per domain.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.cues_per_class;
    let mut docs = Vec::with_capacity(spec.num_domains * spec.instances_per_domain);
    for dom in 0..spec.num_domains {
        let group = dom % spec.groups;
        for n in 0..spec.instances_per_domain {
            let class = usize::from(rng.gen::<f64>() < spec.positive_rate);
            let mut tokens = Vec::with_capacity(spec.doc_len);
            for _ in 0..spec.cues_per_doc {
                let j = rng.gen_range(0..c);
                if rng.gen::<f64>() < spec.shared_cue_rate {
                    // shared word that signals `class` in this group
                    let block = (class + group % 2) % 2;
                    tokens.push(format!("cue{}", block * c + j));
                } else {
                    tokens.push(format!("d{dom}c{class}x{j}"));
                }
            }
            for _ in spec.cues_per_doc..spec.doc_len {
                let j = rng.gen_range(0..spec.filler_vocab);
                if rng.gen::<f64>() < spec.overlap {
                    tokens.push(format!("g{group}w{j}"));
                } else {
                    tokens.push(format!("d{dom}w{j}"));
                }
            }
            tokens.shuffle(&mut rng);
            let label = if rng.gen::<f64>() < spec.noise_rate {
                rng.gen_range(0..2)
            } else {
                class
            };
            let keep_domain = spec.held_out.contains(&dom) || rng.gen::<f64>() >= spec.unlabeled_domain_rate;
            docs.push(Document {
                id: format!("dom{dom}-{n}"),
                text: tokens.join(" "),
                label: Some(SYNTH_LABELS[label].to_owned()),
                domain: keep_domain.then(|| SynthSpec::domain_name(dom)),
            });
        }
    }
    Corpus::new(TokenMode::Word, docs)
}

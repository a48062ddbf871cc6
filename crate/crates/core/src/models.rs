//! Single/multi-channel baselines, the discrete mixture model (DSDA) and
//! the continuous latent-gate model (CSDA).
//!
//! Parameters live in one [`ParamStore`] and are grouped by name prefix:
//! `theta.*` (channel encoders and classifier head), `phi.*` (prior
//! network) and `sigma.*` (inference network).

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::distributions::{
    beta_kl_on_tape, beta_sample_on_tape, dirichlet_kl_on_tape, dirichlet_sample_on_tape, uniform_noise,
    BetaParams, DirichletParams, GateDistribution,
};
use crate::error::{Error, Result};
use crate::text::{EncoderConfig, EncoderParams, TokenMode, TokenSeq};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// One channel, no latent gate.
    Scnn,
    /// k channels concatenated into the classifier head.
    Mcnn,
    /// Discrete latent domain, marginalized exactly.
    Dsda,
    CsdaBeta,
    CsdaDirichlet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Scnn,
        ModelKind::Mcnn,
        ModelKind::Dsda,
        ModelKind::CsdaBeta,
        ModelKind::CsdaDirichlet,
    ];

    pub fn is_csda(self) -> bool {
        matches!(self, ModelKind::CsdaBeta | ModelKind::CsdaDirichlet)
    }

    pub fn has_prior(self) -> bool {
        matches!(self, ModelKind::Dsda | ModelKind::CsdaBeta | ModelKind::CsdaDirichlet)
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown model `{s}` (expected scnn, mcnn, dsda, csda-beta or csda-dirichlet)")))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Scnn => "scnn",
            ModelKind::Mcnn => "mcnn",
            ModelKind::Dsda => "dsda",
            ModelKind::CsdaBeta => "csda-beta",
            ModelKind::CsdaDirichlet => "csda-dirichlet",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Number of channels (and latent dimensions).
    pub k: usize,
    pub num_labels: usize,
    /// Size of the domain inventory seen by the inference network.
    pub num_domains: usize,
    pub encoder: EncoderConfig,
    pub hidden: usize,
    pub dropout: f64,
    pub label_embed: usize,
    pub domain_embed: usize,
    /// Weight of the DSDA domain-supervision term.
    pub domain_weight: f64,
}

impl ModelConfig {
    /// Full-size defaults: 300-d embeddings, 3 x 128 filters, hidden 300,
    /// dropout 0.5, label/domain embeddings of 4 and 16.
    pub fn new(kind: ModelKind, k: usize, num_labels: usize, num_domains: usize, vocab_size: usize) -> Self {
        Self {
            kind,
            k: if kind == ModelKind::Scnn { 1 } else { k },
            num_labels,
            num_domains,
            encoder: EncoderConfig::standard(vocab_size),
            hidden: 300,
            dropout: 0.5,
            label_embed: 4,
            domain_embed: 16,
            domain_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        if self.kind == ModelKind::Scnn && self.k != 1 {
            return Err(Error::Invalid(format!("scnn has exactly one channel, got k = {}", self.k)));
        }
        if self.num_labels < 2 {
            return Err(Error::Invalid(format!("need at least two labels, got {}", self.num_labels)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.hidden == 0 || self.label_embed == 0 || self.domain_embed == 0 {
            return Err(Error::Invalid("layer sizes must be positive".into()));
        }
        if !(self.domain_weight >= 0.0 && self.domain_weight.is_finite()) {
            return Err(Error::Invalid(format!("domain weight {} must be finite and >= 0", self.domain_weight)));
        }
        Ok(())
    }

    fn head_input(&self) -> usize {
        let h = self.encoder.output_dim();
        if self.kind == ModelKind::Mcnn {
            h * self.k
        } else {
            h
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Theta,
    Phi,
    Sigma,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        match name.split('.').next() {
            Some("theta") => Some(ParamGroup::Theta),
            Some("phi") => Some(ParamGroup::Phi),
            Some("sigma") => Some(ParamGroup::Sigma),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Network {
    encoder: EncoderParams,
    /// DSDA: [logits]; Beta: [alpha, beta]; Dirichlet: [alpha0, alpha_hat].
    outputs: Vec<Linear>,
}

#[derive(Clone, Debug, PartialEq)]
struct InferenceNet {
    net: Network,
    labels: ParamId,
    domains: ParamId,
}

/// Gate distribution parameters as tape variables.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TapeGate {
    Categorical { logits: Var },
    Beta { alpha: Var, beta: Var },
    Dirichlet { alpha0: Var, alpha_hat: Var, concentration: Var },
}

impl TapeGate {
    /// Read the current values off the tape.
    pub fn distribution(&self, tape: &Tape) -> Result<GateDistribution> {
        Ok(match *self {
            TapeGate::Categorical { logits } => GateDistribution::Categorical {
                logits: tape.value(logits).data().to_vec(),
            },
            TapeGate::Beta { alpha, beta } => GateDistribution::Beta(BetaParams::new(
                tape.value(alpha).data().to_vec(),
                tape.value(beta).data().to_vec(),
            )?),
            TapeGate::Dirichlet { alpha0, alpha_hat, .. } => GateDistribution::Dirichlet(DirichletParams::new(
                tape.value(alpha0).item(),
                tape.value(alpha_hat).data().to_vec(),
            )?),
        })
    }
}

/// Terms of a per-instance training loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    /// Scalar to minimize.
    pub loss: Var,
    /// KL(q || p) for CSDA, before weighting.
    pub kl: Option<Var>,
}

/// Sum of channel outputs weighted by `z`. A one-hot `z` reproduces the
/// selected channel exactly.
pub fn gate_channels(tape: &mut Tape, hs: &[Var], z: Var) -> Result<Var> {
    if hs.is_empty() || tape.value(z).len() != hs.len() {
        return Err(Error::Shape {
            op: "gate_channels",
            detail: format!("{} channels, gate of length {}", hs.len(), tape.value(z).len()),
        });
    }
    let mut acc: Option<Var> = None;
    for (i, &h) in hs.iter().enumerate() {
        let zi = tape.index(z, i)?;
        let term = tape.scale_by(h, zi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one channel"))
}

/// The same weighted sum on plain vectors.
pub fn gate_vectors(hs: &[Vec<f64>], z: &[f64]) -> Result<Vec<f64>> {
    if hs.is_empty() || hs.len() != z.len() || hs.iter().any(|h| h.len() != hs[0].len()) {
        return Err(Error::Shape {
            op: "gate_vectors",
            detail: format!("{} channels, gate of length {}", hs.len(), z.len()),
        });
    }
    let mut out = vec![0.0; hs[0].len()];
    for (h, &w) in hs.iter().zip(z) {
        for (o, v) in out.iter_mut().zip(h) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Written next to the checkpoint so a model can be rebuilt and checked.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config: ModelConfig,
    pub lambda: f64,
    pub mode: TokenMode,
    /// Hex FNV-1a hash of the vocabulary file.
    pub vocab_hash: String,
    pub labels: Vec<String>,
    pub domains: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    channels: Vec<EncoderParams>,
    head: (Linear, Linear),
    prior: Option<Network>,
    inference: Option<InferenceNet>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn tensor(&mut self, name: String, shape: Vec<usize>, bound: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = if bound > 0.0 {
            let d = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| d.sample(&mut self.rng)).collect()
        } else {
            vec![0.0; n]
        };
        self.store.add(name, Tensor::new(shape, data)?)
    }

    /// Glorot-uniform weights, zero bias.
    fn linear(&mut self, prefix: &str, n_in: usize, n_out: usize) -> Result<Linear> {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        Ok(Linear {
            w: self.tensor(format!("{prefix}.weight"), vec![n_in, n_out], bound)?,
            b: self.tensor(format!("{prefix}.bias"), vec![n_out], 0.0)?,
        })
    }

    fn encoder(&mut self, prefix: &str, config: &EncoderConfig) -> Result<EncoderParams> {
        EncoderParams::init(self.store, prefix, config.clone(), &mut self.rng)
    }
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let channels = (0..config.k)
            .map(|i| b.encoder(&format!("theta.channel{i}"), &config.encoder))
            .collect::<Result<Vec<_>>>()?;
        let head = (
            b.linear("theta.head.hidden", config.head_input(), config.hidden)?,
            b.linear("theta.head.output", config.hidden, config.num_labels)?,
        );
        let h = config.encoder.output_dim();
        let output_dims = match config.kind {
            ModelKind::Scnn | ModelKind::Mcnn => vec![],
            ModelKind::Dsda => vec![config.k],
            ModelKind::CsdaBeta => vec![config.k, config.k],
            ModelKind::CsdaDirichlet => vec![1, config.k],
        };
        let prior = if config.kind.has_prior() {
            let encoder = b.encoder("phi.encoder", &config.encoder)?;
            let outputs = output_dims
                .iter()
                .enumerate()
                .map(|(j, &n)| b.linear(&format!("phi.out{j}"), h, n))
                .collect::<Result<Vec<_>>>()?;
            Some(Network { encoder, outputs })
        } else {
            None
        };
        let inference = if config.kind.is_csda() {
            let encoder = b.encoder("sigma.encoder", &config.encoder)?;
            // the extra row in each table is the UNK sentinel
            let labels = b.tensor(
                "sigma.label_embedding".into(),
                vec![config.num_labels + 1, config.label_embed],
                0.05,
            )?;
            let domains = b.tensor(
                "sigma.domain_embedding".into(),
                vec![config.num_domains + 1, config.domain_embed],
                0.05,
            )?;
            let width = h + config.label_embed + config.domain_embed;
            let outputs = output_dims
                .iter()
                .enumerate()
                .map(|(j, &n)| b.linear(&format!("sigma.out{j}"), width, n))
                .collect::<Result<Vec<_>>>()?;
            Some(InferenceNet {
                net: Network { encoder, outputs },
                labels,
                domains,
            })
        } else {
            None
        };
        Ok(Self {
            config,
            params: store,
            channels,
            head,
            prior,
            inference,
        })
    }

    pub fn param_group(&self, id: ParamId) -> Option<ParamGroup> {
        ParamGroup::of(self.params.name(id))
    }

    /// Channel encodings `h_1..h_k`, with dropout on each when `rng` is given.
    pub fn channel_outputs(&self, tape: &mut Tape, seq: &TokenSeq, mut rng: Option<&mut dyn RngCore>) -> Result<Vec<Var>> {
        let mut hs = Vec::with_capacity(self.channels.len());
        for enc in &self.channels {
            let drop: Option<(f64, &mut dyn RngCore)> = match rng.as_mut() {
                Some(r) => Some((self.config.dropout, &mut **r)),
                None => None,
            };
            hs.push(enc.encode(tape, seq, drop)?);
        }
        Ok(hs)
    }

    /// Label log-probabilities from a gated (or concatenated) encoding.
    pub fn classify(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let hidden = self.head.0.apply(tape, h)?;
        let hidden = tape.relu(hidden)?;
        let logits = self.head.1.apply(tape, hidden)?;
        tape.log_softmax(logits)
    }

    fn gate_params(&self, tape: &mut Tape, net_outputs: &[Linear], features: Var) -> Result<TapeGate> {
        match self.config.kind {
            ModelKind::Dsda => Ok(TapeGate::Categorical {
                logits: net_outputs[0].apply(tape, features)?,
            }),
            ModelKind::CsdaBeta => {
                let fa = net_outputs[0].apply(tape, features)?;
                let fb = net_outputs[1].apply(tape, features)?;
                let ea = tape.elu(fa)?;
                let eb = tape.elu(fb)?;
                Ok(TapeGate::Beta {
                    alpha: tape.add_scalar(ea, 1.0)?,
                    beta: tape.add_scalar(eb, 1.0)?,
                })
            }
            ModelKind::CsdaDirichlet => {
                let f0 = net_outputs[0].apply(tape, features)?;
                let fd = net_outputs[1].apply(tape, features)?;
                let alpha0 = tape.exp(f0)?;
                let alpha_hat = tape.sigmoid(fd)?;
                let concentration = tape.scale_by(alpha_hat, alpha0)?;
                Ok(TapeGate::Dirichlet {
                    alpha0,
                    alpha_hat,
                    concentration,
                })
            }
            ModelKind::Scnn | ModelKind::Mcnn => Err(Error::Invalid(format!("{} has no latent gate", self.config.kind))),
        }
    }

    /// p_φ(z | x).
    pub fn prior(&self, tape: &mut Tape, seq: &TokenSeq) -> Result<TapeGate> {
        let net = self
            .prior
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("{} has no prior network", self.config.kind)))?;
        let h = net.encoder.encode(tape, seq, None)?;
        self.gate_params(tape, &net.outputs, h)
    }

    /// q_σ(z | x, y, d); `None` stands for the UNK sentinel.
    pub fn posterior(&self, tape: &mut Tape, seq: &TokenSeq, y: Option<usize>, d: Option<usize>) -> Result<TapeGate> {
        let inf = self
            .inference
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("{} has no inference network", self.config.kind)))?;
        let label = match y {
            Some(l) if l >= self.config.num_labels => {
                return Err(Error::Invalid(format!("label id {l} outside inventory of {}", self.config.num_labels)))
            }
            Some(l) => l,
            None => self.config.num_labels,
        };
        let domain = match d {
            Some(v) if v >= self.config.num_domains => {
                return Err(Error::Invalid(format!("domain id {v} outside inventory of {}", self.config.num_domains)))
            }
            Some(v) => v,
            None => self.config.num_domains,
        };
        let h = inf.net.encoder.encode(tape, seq, None)?;
        let lt = tape.param(inf.labels);
        let le = tape.embedding(lt, &[label], None)?;
        let dt = tape.param(inf.domains);
        let de = tape.embedding(dt, &[domain], None)?;
        let le = tape.reshape(le, &[self.config.label_embed])?;
        let de = tape.reshape(de, &[self.config.domain_embed])?;
        let features = tape.concat(&[h, le, de])?;
        self.gate_params(tape, &inf.net.outputs, features)
    }

    fn label_ll(&self, tape: &mut Tape, h: Var, y: usize) -> Result<Var> {
        if y >= self.config.num_labels {
            return Err(Error::Invalid(format!("label id {y} outside inventory of {}", self.config.num_labels)));
        }
        let lp = self.classify(tape, h)?;
        tape.index(lp, y)
    }

    /// −log p(y | x) for the channel baselines.
    pub fn baseline_loss(&self, tape: &mut Tape, seq: &TokenSeq, y: usize, rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let hs = self.channel_outputs(tape, seq, rng)?;
        let h = if hs.len() == 1 { hs[0] } else { tape.concat(&hs)? };
        let ll = self.label_ll(tape, h, y)?;
        tape.neg(ll)
    }

    /// −log Σ_z p_φ(z | x) p_θ(y | x, z), plus the weighted
    /// −log p_φ(z = d | x) when the domain is observed.
    pub fn dsda_loss(
        &self,
        tape: &mut Tape,
        seq: &TokenSeq,
        y: usize,
        d: Option<usize>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if let Some(d) = d {
            if d >= self.config.k {
                return Err(Error::Invalid(format!("domain {d} cannot supervise a gate with k = {}", self.config.k)));
            }
        }
        let gate = self.prior(tape, seq)?;
        let TapeGate::Categorical { logits } = gate else {
            return Err(Error::Invalid("dsda needs a categorical prior".into()));
        };
        let log_prior = tape.log_softmax(logits)?;
        let hs = self.channel_outputs(tape, seq, rng)?;
        let lls = hs
            .iter()
            .map(|&h| self.label_ll(tape, h, y))
            .collect::<Result<Vec<_>>>()?;
        let ll = tape.concat(&lls)?;
        let joint = tape.add(log_prior, ll)?;
        let marginal = tape.log_sum_exp(joint)?;
        let mut loss = tape.neg(marginal)?;
        if let Some(d) = d {
            let lpd = tape.index(log_prior, d)?;
            let term = tape.scale(lpd, -self.config.domain_weight)?;
            loss = tape.add(loss, term)?;
        }
        Ok(loss)
    }

    /// Negated single-sample ELBO, `−(log p_θ(y | x, ẑ) − λ KL(q || p))`,
    /// with ẑ drawn from q using the given uniform `noise`.
    #[allow(clippy::too_many_arguments)]
    pub fn csda_elbo(
        &self,
        tape: &mut Tape,
        seq: &TokenSeq,
        y: usize,
        d: Option<usize>,
        lambda: f64,
        noise: &[f64],
        rng: Option<&mut dyn RngCore>,
    ) -> Result<LossTerms> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda {lambda} must be finite and >= 0")));
        }
        let q = self.posterior(tape, seq, Some(y), d)?;
        let p = self.prior(tape, seq)?;
        let (z, kl) = match (q, p) {
            (TapeGate::Beta { alpha: qa, beta: qb }, TapeGate::Beta { alpha: pa, beta: pb }) => {
                (beta_sample_on_tape(tape, qa, qb, noise)?, beta_kl_on_tape(tape, qa, qb, pa, pb)?)
            }
            (
                TapeGate::Dirichlet { concentration: qc, .. },
                TapeGate::Dirichlet { concentration: pc, .. },
            ) => (dirichlet_sample_on_tape(tape, qc, noise)?, dirichlet_kl_on_tape(tape, qc, pc)?),
            _ => return Err(Error::Invalid(format!("{} is not a continuous-gate model", self.config.kind))),
        };
        let hs = self.channel_outputs(tape, seq, rng)?;
        let h = gate_channels(tape, &hs, z)?;
        let ll = self.label_ll(tape, h, y)?;
        let weighted = tape.scale(kl, lambda)?;
        let loss = tape.sub(weighted, ll)?;
        Ok(LossTerms { loss, kl: Some(kl) })
    }

    /// Training loss for one instance, chosen by model kind. Returns `None`
    /// when the label is UNK: such instances carry no likelihood term.
    pub fn instance_loss(
        &self,
        tape: &mut Tape,
        seq: &TokenSeq,
        y: Option<usize>,
        d: Option<usize>,
        lambda: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Option<LossTerms>> {
        let Some(y) = y else { return Ok(None) };
        let terms = match self.config.kind {
            ModelKind::Scnn | ModelKind::Mcnn => LossTerms {
                loss: self.baseline_loss(tape, seq, y, Some(rng))?,
                kl: None,
            },
            ModelKind::Dsda => LossTerms {
                loss: self.dsda_loss(tape, seq, y, d, Some(rng))?,
                kl: None,
            },
            ModelKind::CsdaBeta | ModelKind::CsdaDirichlet => {
                let noise = uniform_noise(rng, self.config.k);
                self.csda_elbo(tape, seq, y, d, lambda, &noise, Some(rng))?
            }
        };
        Ok(Some(terms))
    }

    /// Write `model.ckpt` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path, manifest: &ModelManifest) -> Result<()> {
        if manifest.config != self.config {
            return Err(Error::Checkpoint("manifest config differs from the model".into()));
        }
        std::fs::create_dir_all(dir)?;
        let f = BufWriter::new(File::create(dir.join("model.ckpt"))?);
        checkpoint::write_params(&self.params, f)?;
        let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("model.json"), json + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelManifest)> {
        let text = std::fs::read_to_string(dir.join("model.json"))?;
        let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let stored = checkpoint::read_params(BufReader::new(File::open(dir.join("model.ckpt"))?))?;
        let mut model = Model::new(manifest.config.clone(), 0)?;
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, configuration expects {}",
                stored.len(),
                model.params.len()
            )));
        }
        model.params.load_from(&stored)?;
        Ok((model, manifest))
    }
}

/// Draw `k` uniform values; re-exported for callers building frozen noise.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    uniform_noise(rng, k)
}

//! Train each model kind on the synthetic corpus and report held-out accuracy.
//!
//! cargo run --release -p sda-core --example synthetic_transfer -- [seeds] [models...]

use std::time::Instant;

use sda_core::data::{generate_synthetic, Dataset, SynthSpec, SYNTH_LABELS};
use sda_core::models::{Model, ModelConfig, ModelKind};
use sda_core::text::Vocab;
use sda_core::training::{evaluate, train, TrainConfig};

fn env(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().map_or(default, |v| v.parse().expect(name))
}

fn main() -> sda_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seed count"));
    let kinds: Vec<ModelKind> = {
        let v: Vec<ModelKind> = args.map(|a| a.parse()).collect::<Result<_, _>>()?;
        if v.is_empty() {
            vec![ModelKind::Scnn, ModelKind::CsdaDirichlet]
        } else {
            v
        }
    };
    for kind in kinds {
        let mut accs = Vec::new();
        let start = Instant::now();
        for seed in 0..seeds {
            let spec = SynthSpec {
                seed,
                overlap: env("OVERLAP", 0.5),
                shared_cue_rate: env("SHARED", 0.5),
                doc_len: env("DOC_LEN", 20.0) as usize,
                cues_per_doc: env("CUES", 3.0) as usize,
                noise_rate: env("NOISE", 0.0),
                ..SynthSpec::default()
            };
            let corpus = generate_synthetic(&spec)?;
            let held_names = spec.held_out_names();
            let train_corpus = corpus.filter(|d| !d.domain.as_ref().is_some_and(|x| held_names.contains(x)))?;
            let held = corpus.in_domains(&spec.held_out_names())?;
            let (dev, test) = held.split_dev_test(4, 6, seed)?;
            let vocab = Vocab::build(train_corpus.documents().iter().map(|d| d.text.as_str()), 1, None);
            let labels: Vec<String> = SYNTH_LABELS.iter().map(|s| s.to_string()).collect();
            let domains = spec.training_names();
            let tr = Dataset::new(&train_corpus, &vocab, &labels, &domains)?;
            let dv = Dataset::new(&dev, &vocab, &labels, &domains)?;
            let te = Dataset::new(&test, &vocab, &labels, &domains)?;
            let mut cfg = ModelConfig::new(kind, domains.len(), 2, domains.len(), vocab.len());
            cfg.encoder.embed_dim = env("EMBED", 16.0) as usize;
            cfg.encoder.filters = env("FILTERS", 16.0) as usize;
            cfg.hidden = env("HIDDEN", 32.0) as usize;
            cfg.dropout = env("DROPOUT", 0.5);
            let model = Model::new(cfg, seed)?;
            let tc = TrainConfig {
                learning_rate: env("LR", 1e-3),
                max_epochs: env("EPOCHS", 20.0) as usize,
                patience: env("PATIENCE", 5.0) as usize,
                lambda: env("LAMBDA", 0.1),
                seed,
                ..TrainConfig::default()
            };
            let out = train(model, &tr, &dv, &tc)?;
            let rep = evaluate(&out.model, &te, &tc.eval)?;
            let fit = evaluate(&out.model, &tr, &tc.eval)?;
            println!(
                "{kind} seed {seed}: train {:.3} dev {:.3} test {:.3} steps {} best {}",
                fit.accuracy, out.best_dev_accuracy, rep.accuracy, out.steps, out.best_step
            );
            accs.push(rep.accuracy);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{kind}: mean {:.4} ({:.1}s)", mean, start.elapsed().as_secs_f64());
    }
    Ok(())
}

//! Trains a small model, writes a checkpoint and vocabulary to a scratch
//! directory and serves the HTTP API over them.
//!
//! `cargo run --release --example serve -- [bind]`, then e.g.
//! `curl -s localhost:8080/v1/predict -d '{"tokens":[{"kind":"AGE","value":"45"}],"top_k":3}'`

use medseq::model::{ModelConfig, Transformer, Variant};
use medseq::service::{serve, ServiceConfig};
use medseq::synthcohort::{generate_cohort, GeneratorConfig};
use medseq::timeline::{prepare_corpus, write_vocab, TimelineOptions};
use medseq::training::{train, TrainConfig};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bind = std::env::args().nth(1).unwrap_or_else(|| "127.0.0.1:8080".into());
    let dir = std::env::temp_dir().join("medseq-serve-example");
    std::fs::create_dir_all(&dir)?;

    let (records, _) = generate_cohort(&GeneratorConfig { n_patients: 500, ..GeneratorConfig::default() })?;
    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default())?;
    let seqs: Vec<Vec<usize>> = timelines.iter().map(|t| t.ids()).collect();
    let config = Variant::parse("glu+rotary")?.apply(&ModelConfig::small(vocab.len(), 2, 2, 32), None)?;
    let tc = TrainConfig { learning_rate: 3e-3, max_steps: 200, warmup_steps: 20, ..TrainConfig::default() };
    let model = train(Transformer::new_random(config, 0)?, &tc, &seqs, &[], &vocab.hash(), None)?.last;
    model.to_checkpoint(Some(tc), 200, None, &vocab.hash()).save(&dir.join("checkpoint"))?;
    write_vocab(&dir.join("vocab.tsv"), &vocab)?;

    let mut cfg = ServiceConfig::new(dir.join("checkpoint"), dir.join("vocab.tsv"));
    cfg.bind = bind;
    println!("serving {} on http://{}", dir.display(), cfg.bind);
    serve(cfg).await?;
    Ok(())
}

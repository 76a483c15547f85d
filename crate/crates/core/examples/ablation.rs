//! Short training runs of several transformer variants on the same data.
//!
//! `cargo run --release --example ablation -- [steps] [variant,variant,...]`

use medseq::evalmetrics::{evaluate, LmForecaster};
use medseq::model::{ModelConfig, Transformer, Variant};
use medseq::synthcohort::{generate_cohort, GeneratorConfig};
use medseq::timeline::{prepare_corpus, split_cohort, TimelineOptions};
use medseq::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(Ok(300), |a| a.parse())?;
    let variants = args.next().unwrap_or_else(|| "base,rotary,glu,glu+rotary,rezero".into());

    let (records, _) = generate_cohort(&GeneratorConfig { n_patients: 1000, ..GeneratorConfig::default() })?;
    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default())?;
    let ids: Vec<String> = timelines.iter().map(|t| t.patient_id.clone()).collect();
    let part = split_cohort(&ids, 0)?.partition(&timelines);
    let seqs = |ts: &[medseq::timeline::Timeline]| ts.iter().map(|t| t.ids()).collect::<Vec<_>>();
    let (tr, va) = (seqs(&part.train), seqs(&part.validation));
    let tc = TrainConfig { learning_rate: 3e-3, weight_decay: 0.01, max_steps: steps, warmup_steps: 30, eval_every: 100, ..TrainConfig::default() };

    let base = ModelConfig::small(vocab.len(), 2, 2, 32);
    for name in variants.split(',') {
        let variant = Variant::parse(name)?;
        let model = train(Transformer::new_random(variant.apply(&base, None)?, 0)?, &tc, &tr, &va, &vocab.hash(), None)?;
        let row = evaluate(&LmForecaster::new(&model.best, vocab.n_concepts(), variant.label()), &part.test)?;
        println!("{:<24} val {:.4}  P@1 {:.3}  P@5 {:.3}", row.model, model.best_val_loss, row.precision[&1], row.precision[&5]);
    }
    Ok(())
}

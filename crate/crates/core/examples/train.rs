//! Trains a small GLU+rotary transformer on a synthetic cohort, saves the
//! selected checkpoint and reloads it.
//!
//! `cargo run --release --example train -- [steps] [out_dir]`

use medseq::model::{ModelConfig, SequenceModel, Transformer, Variant};
use medseq::synthcohort::{generate_cohort, GeneratorConfig};
use medseq::timeline::{prepare_corpus, split_cohort, TimelineOptions};
use medseq::training::{train, Checkpoint, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map_or(Ok(400), |a| a.parse())?;
    let out = args.next().map_or_else(|| std::env::temp_dir().join("medseq-train-example"), Into::into);

    let (records, _) = generate_cohort(&GeneratorConfig { n_patients: 1000, ..GeneratorConfig::default() })?;
    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default())?;
    let ids: Vec<String> = timelines.iter().map(|t| t.patient_id.clone()).collect();
    let part = split_cohort(&ids, 0)?.partition(&timelines);
    let seqs = |ts: &[medseq::timeline::Timeline]| ts.iter().map(|t| t.ids()).collect::<Vec<_>>();

    let config = Variant::parse("glu+rotary")?.apply(&ModelConfig::small(vocab.len(), 2, 2, 32), None)?;
    let tc = TrainConfig { learning_rate: 3e-3, weight_decay: 0.01, max_steps: steps, warmup_steps: 50, eval_every: 100, ..TrainConfig::default() };
    let outcome = train(Transformer::new_random(config, 0)?, &tc, &seqs(&part.train), &seqs(&part.validation), &vocab.hash(), None)?;
    for e in &outcome.log {
        println!("step {:>5}  lr {:.2e}  train {:.4}  val {:.4}", e.step, e.lr, e.train_loss, e.val_loss);
    }

    let ckpt = outcome.best.to_checkpoint(Some(tc), outcome.best_step, Some(outcome.best_val_loss), &vocab.hash());
    ckpt.save(&out)?;
    let back = Transformer::from_checkpoint(&Checkpoint::load(&out, Some(&vocab.hash()))?, None)?;
    println!("step {} saved to {}; {} tensors reloaded", outcome.best_step, out.display(), back.params().len());
    Ok(())
}

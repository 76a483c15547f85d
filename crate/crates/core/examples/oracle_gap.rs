//! Sequence models against the order-blind ceiling on an order-2 cohort.
//!
//! `cargo run --release --example oracle_gap -- [patients] [transformer_steps] [transformer_lr] [lstm_steps] [lstm_lr]`

use std::time::Instant;

use medseq::baselines::{boc_dataset, train_boc, BocConfig, BocForecaster, Lstm, LstmConfig};
use medseq::evalmetrics::{evaluate, EvalReport, LmForecaster, ReportContext};
use medseq::model::{ModelConfig, Transformer, Variant};
use medseq::synthcohort::{boc_ceiling, generate_cohort, GeneratorConfig, OracleForecaster};
use medseq::timeline::{prepare_corpus, split_cohort, TimelineOptions};
use medseq::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let arg = |i: usize, default: f64| args.get(i).copied().unwrap_or(default);
    let patients = arg(0, 5000.0) as usize;
    let (t_steps, t_lr) = (arg(1, 3000.0) as u64, arg(2, 3e-3));
    let (l_steps, l_lr) = (arg(3, 6000.0) as u64, arg(4, 1e-2));

    let gen = GeneratorConfig { n_patients: patients, ..GeneratorConfig::default() };
    let (records, generator) = generate_cohort(&gen)?;
    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default())?;
    let ids: Vec<String> = timelines.iter().map(|t| t.patient_id.clone()).collect();
    let split = split_cohort(&ids, 0)?;
    let part = split.partition(&timelines);
    let seqs = |ts: &[medseq::timeline::Timeline]| ts.iter().map(|t| t.ids()).collect::<Vec<_>>();
    let (train_ids, val_ids) = (seqs(&part.train), seqs(&part.validation));
    let n = vocab.n_concepts();
    println!("{} train / {} validation / {} test timelines", part.train.len(), part.validation.len(), part.test.len());

    let cfg = |max_steps, learning_rate| TrainConfig {
        learning_rate,
        weight_decay: 0.01,
        warmup_steps: 100,
        max_steps,
        eval_every: 250,
        ..TrainConfig::default()
    };

    let clock = Instant::now();
    let base = ModelConfig::small(vocab.len(), 2, 2, 64);
    let tcfg = Variant::parse("glu+rotary")?.apply(&base, None)?;
    let transformer = train(Transformer::new_random(tcfg, 0)?, &cfg(t_steps, t_lr), &train_ids, &val_ids, &vocab.hash(), None)?.best;
    println!("transformer trained in {:.0?}", clock.elapsed());

    let clock = Instant::now();
    let lstm = train(Lstm::new_random(LstmConfig::small(vocab.len(), 64), 0)?, &cfg(l_steps, l_lr), &train_ids, &val_ids, &vocab.hash(), None)?.best;
    println!("lstm trained in {:.0?}", clock.elapsed());

    let clock = Instant::now();
    let (x, y) = boc_dataset(&part.train, &vocab);
    let boc = train_boc(&x, &y, &BocConfig::default())?;
    println!("boc trained in {:.0?}", clock.elapsed());

    let rows = vec![
        evaluate(&OracleForecaster { model: &generator, vocab: &vocab }, &part.test)?,
        evaluate(&LmForecaster::new(&transformer, n, "Transformer GLU+rotary"), &part.test)?,
        evaluate(&LmForecaster::new(&lstm, n, "LSTM"), &part.test)?,
        evaluate(&BocForecaster { model: &boc, vocab: &vocab }, &part.test)?,
    ];
    let context = ReportContext { seed: 0, split_hash: split.hash(), vocab_hash: vocab.hash() };
    print!("{}", EvalReport::new(context, rows)?.to_text());
    let ceiling = boc_ceiling(&generator, &vocab, &part.test)?;
    println!("order-blind ceiling {:.3} ({} points)", ceiling.overall, ceiling.points);
    Ok(())
}

//! Generates a small order-2 cohort and compares the generator's own oracle
//! with the best any order-blind scorer could do.
//!
//! `cargo run --release --example synth_cohort -- [patients] [determinism]`

use medseq::evalmetrics::evaluate;
use medseq::synthcohort::{boc_ceiling, generate_cohort, GeneratorConfig, OracleForecaster};
use medseq::timeline::{prepare_corpus, TimelineOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n_patients = args.next().map_or(Ok(1000), |a| a.parse())?;
    let determinism = args.next().map_or(Ok(0.9), |a| a.parse())?;
    let cfg = GeneratorConfig { n_patients, determinism, ..GeneratorConfig::default() };
    let (records, generator) = generate_cohort(&cfg)?;

    let r = &records[0];
    let path: Vec<String> = r.events.iter().step_by(2).map(|e| format!("{}@{}", e.concept, e.age)).collect();
    println!("{}: {}", r.patient_id, path.join(" "));

    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default())?;
    let oracle = evaluate(&OracleForecaster { model: &generator, vocab: &vocab }, &timelines)?;
    let ceiling = boc_ceiling(&generator, &vocab, &timelines)?;
    println!("{} timelines, {} eval points", timelines.len(), oracle.points);
    println!("oracle P@1 {:.3}, order-blind ceiling {:.3}", oracle.precision[&1], ceiling.overall);
    Ok(())
}

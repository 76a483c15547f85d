//! Ranks a handful of candidate next disorders for a history after brief
//! training; option probabilities are renormalized to sum to one.

use medseq::model::{ModelConfig, Transformer, Variant};
use medseq::probe::{format_mcq, mcq_rank};
use medseq::synthcohort::{generate_cohort, GeneratorConfig};
use medseq::timeline::{prepare_corpus, TimelineOptions};
use medseq::training::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (records, generator) = generate_cohort(&GeneratorConfig { n_patients: 800, ..GeneratorConfig::default() })?;
    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default())?;
    let seqs: Vec<Vec<usize>> = timelines.iter().map(|t| t.ids()).collect();
    let config = Variant::parse("glu+rotary")?.apply(&ModelConfig::small(vocab.len(), 2, 2, 32), None)?;
    let tc = TrainConfig { learning_rate: 3e-3, weight_decay: 0.01, max_steps: 400, warmup_steps: 30, ..TrainConfig::default() };
    let model = train(Transformer::new_random(config, 0)?, &tc, &seqs, &[], &vocab.hash(), None)?.last;

    // History: a timeline cut before its third token; options: the true next
    // concept, the generator's favourite and three others.
    let t = &timelines[0];
    let history = &t.ids()[..3];
    let truth = t.ids()[3];
    let start = vocab.age_of(history[0]).unwrap_or(0);
    let visited: Vec<usize> = history.iter().filter(|&&id| vocab.is_concept(id)).map(|&id| generator.index_of(&vocab.entry(id).value).unwrap()).collect();
    let favourite = vocab.concept_id(&generator.codes[generator.designated(start, &visited)?]).unwrap();
    let mut options = vec![truth];
    for c in std::iter::once(favourite).chain(0..vocab.n_concepts()) {
        if options.len() < 5 && !options.contains(&c) && !history.contains(&c) {
            options.push(c);
        }
    }
    let ranked = mcq_rank(&model, vocab.n_concepts(), history, &options)?;
    let named: Vec<(String, f64)> = ranked.iter().map(|&(id, p)| (vocab.entry(id).value.clone(), p)).collect();
    let context: Vec<&str> = history.iter().map(|&id| vocab.entry(id).value.as_str()).collect();
    println!("after {} (true next {}):", context.join(" "), vocab.entry(truth).value);
    print!("{}", format_mcq(&named));
    Ok(())
}

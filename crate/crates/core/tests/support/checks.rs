//! Criterion checks: `Ok(detail)` on success, `Err(detail)` on failure.

use std::time::Instant;

use rand::Rng as _;

use medseq::baselines::{boc_dataset, train_boc, BocConfig, BocModel, Lstm};
use medseq::evalmetrics::{evaluate_with, Forecaster, LmForecaster, DEFAULT_K, DEFAULT_N};
use medseq::model::{apply_rotary, Batch, SequenceModel, Transformer, Variant};
use medseq::numerics::{Coordinates, Tape, Tensor};
use medseq::rng::seeded;
use medseq::synthcohort::{generate_cohort, GeneratorConfig, OracleForecaster};
use medseq::timeline::{prepare_corpus, TimelineOptions};
use medseq::training::{mean_loss, Checkpoint, MANIFEST_FILE, PAYLOAD_FILE};

use super::gradients::{model_gradient_error, primitive_error, primitives, tiny_lstm};
use super::metrics::{brute_force, compare, first_points, report_invariants, HashForecaster};
use super::{copy_shared, jitter, max_abs_diff, random_sequence, tiny_transformer, CAUSAL_VARIANTS};

pub type Check = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;

/// Every primitive over `points` random 64-bit points.
pub fn primitive_gradients(points: usize) -> Check {
    let mut worst = (0f64, "");
    for (i, op) in primitives().iter().enumerate() {
        let e = primitive_error(op, points, 100 + i as u64).map_err(|e| format!("{}: {e}", op.name))?;
        if e > worst.0 {
            worst = (e, op.name);
        }
        if e >= PRIMITIVE_TOL {
            return Err(format!("{} relative error {e:.2e}", op.name));
        }
    }
    Ok(format!("{} ops x {points} points, worst {:.1e} ({})", primitives().len(), worst.0, worst.1))
}

/// Tiny transformer (2 layers, width 16, vocabulary 50) in every variant and
/// a tiny LSTM, against finite differences.
pub fn model_gradients() -> Check {
    let seqs: [&[usize]; 2] = [&[3, 17, 42, 8, 8, 30], &[49, 0, 12]];
    let mut worst = 0f64;
    for (i, v) in CAUSAL_VARIANTS.iter().chain(&["glu+rotary"]).enumerate() {
        let mut m = tiny_transformer(v, 50, 2, 16, i as u64);
        jitter(&mut m, 0.1, 50 + i as u64);
        // Every coordinate of the base model; a sample per tensor elsewhere.
        let coords = if *v == "base" { Coordinates::All } else { Coordinates::Sample(40, i as u64) };
        let e = model_gradient_error(&m, &seqs, coords).map_err(|e| format!("{v}: {e}"))?;
        if e >= MODEL_TOL {
            return Err(format!("transformer {v}: relative error {e:.2e}"));
        }
        worst = worst.max(e);
    }
    for tied in [true, false] {
        let mut m = tiny_lstm(50, 8, tied, 3);
        jitter(&mut m, 0.1, 4);
        let e = model_gradient_error(&m, &seqs, Coordinates::All).map_err(|e| format!("lstm: {e}"))?;
        if e >= MODEL_TOL {
            return Err(format!("lstm (tied {tied}): relative error {e:.2e}"));
        }
        worst = worst.max(e);
    }
    Ok(format!("9 transformer variants + 2 LSTMs, worst {worst:.1e}"))
}

/// Changing token `j` leaves logits before `j` bit-identical.
pub fn causality(inputs: usize) -> Check {
    let mut rng = seeded(7);
    for (i, v) in CAUSAL_VARIANTS.iter().enumerate() {
        let mut m = tiny_transformer(v, 50, 2, 16, 20 + i as u64);
        jitter(&mut m, 0.05, 30 + i as u64);
        for n in 0..inputs {
            let len = rng.random_range(2..=16);
            let seq = random_sequence(&mut rng, 50, len);
            let j = rng.random_range(1..len);
            let mut other = seq.clone();
            other[j] = (seq[j] + rng.random_range(1..50)) % 50;
            for t in other.iter_mut().skip(j + 1) {
                *t = rng.random_range(0..50);
            }
            let a = m.logits(&Batch::single(&seq).unwrap()).map_err(|e| e.to_string())?;
            let b = m.logits(&Batch::single(&other).unwrap()).map_err(|e| e.to_string())?;
            if a.data()[..j * 50] != b.data()[..j * 50] {
                return Err(format!("{v}: input {n} leaks position {j} backwards"));
            }
        }
    }
    Ok(format!("{} variants x {inputs} inputs", CAUSAL_VARIANTS.len()))
}

/// Random-init loss near ln V for every variant; ReZero logits at init equal
/// the tied head applied to the input embedding.
pub fn init_sanity() -> Check {
    let vocab = 171;
    let ln_v = (vocab as f64).ln();
    let mut rng = seeded(11);
    let data: Vec<Vec<usize>> = (0..64).map(|_| random_sequence(&mut rng, vocab, 20)).collect();
    let mut worst = 0f64;
    for (i, v) in Variant::STANDARD.iter().filter(|v| **v != "w2v").enumerate() {
        let mut base = medseq::model::ModelConfig::small(vocab, 2, 2, 64);
        base.max_seq = 50;
        let config = Variant::parse(v).unwrap().apply(&base, None).unwrap();
        let m = Transformer::new_random(config, i as u64).unwrap();
        let loss = mean_loss(&m, &data, 32).map_err(|e| e.to_string())?;
        let rel = (loss / ln_v - 1.0).abs();
        worst = worst.max(rel);
        if rel >= 0.05 {
            return Err(format!("{v}: init loss {loss:.4} vs ln V {ln_v:.4}"));
        }
    }

    let m = tiny_transformer("rezero", 50, 2, 16, 9);
    let seq = [4, 9, 9, 31, 0, 22];
    let got = m.logits(&Batch::single(&seq).unwrap()).map_err(|e| e.to_string())?;
    let mut tape = Tape::<f32>::new();
    let p = |name: &str| m.params.by_name(name).unwrap().clone();
    let table = tape.constant(p("tok_emb")).unwrap();
    let x = tape.embedding(table, &seq, &[1, seq.len()]).unwrap();
    let pos = tape.constant(p("pos_emb")).unwrap();
    let pos = tape.slice(pos, 0, 0, seq.len()).unwrap();
    let x = tape.add(x, pos).unwrap();
    let logits = tape.matmul_nt(x, table).unwrap();
    let bias = tape.constant(p("lm_bias")).unwrap();
    let logits = tape.add(logits, bias).unwrap();
    if tape.value(logits).data() != got.data() {
        return Err("ReZero logits at init differ from head(embedding)".into());
    }
    Ok(format!("9 variants, worst |loss/ln V - 1| = {worst:.4}; ReZero identity exact"))
}

/// `<R(q,m), R(k,n)> = <q, R(k, n-m)>`; a negative offset rotates `q` instead.
pub fn rotary_property(samples: usize) -> Check {
    let mut rng = seeded(13);
    let dim = 16;
    let rot = |x: &[f64], p: usize| apply_rotary(&Tensor::new(vec![1, dim], x.to_vec()).unwrap(), &[p]).unwrap().into_data();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut worst = 0f64;
    for _ in 0..samples {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (m, n) = (rng.random_range(0..50), rng.random_range(0..50));
        let lhs = dot(&rot(&q, m), &rot(&k, n));
        let rhs = if n >= m { dot(&q, &rot(&k, n - m)) } else { dot(&rot(&q, m - n), &k) };
        worst = worst.max((lhs - rhs).abs());
    }
    verdict(worst < 1e-5, format!("{samples} samples, worst {worst:.1e}"))
}

/// Sparse top-k wider than the window, identity head mixers and one-layer
/// residual attention all reduce to the plain model.
pub fn variant_identities() -> Check {
    let seqs: [&[usize]; 2] = [&[5, 1, 44, 3, 3, 18, 27, 9], &[12, 40, 2]];
    let batch = Batch::new(&seqs).unwrap();
    let mut report = Vec::new();
    for (layers, name, edit) in [
        (2, "sparse", (|c: &mut medseq::model::ModelConfig| c.sparse_topk = 64) as fn(&mut medseq::model::ModelConfig)),
        (2, "talking-heads", |c| c.talking_heads = true),
        (1, "residual", |c| c.residual_attention = true),
    ] {
        let mut plain = tiny_transformer("base", 50, layers, 16, 3);
        jitter(&mut plain, 0.05, 4);
        let mut config = plain.config.clone();
        edit(&mut config);
        let mut variant = Transformer::new_random(config, 99).unwrap();
        copy_shared(&plain, &mut variant);
        let a = plain.logits(&batch).map_err(|e| e.to_string())?;
        let b = variant.logits(&batch).map_err(|e| e.to_string())?;
        let d = max_abs_diff(a.data(), b.data());
        if d > 1e-6 {
            return Err(format!("{name}: logits differ by {d:.1e}"));
        }
        report.push(format!("{name} {d:.0e}"));
    }
    Ok(report.join(", "))
}

/// Library metrics against the brute-force re-ranking on 1000 points, for a
/// tie-heavy hash scorer, the generator oracle and a small transformer.
pub fn metric_oracle() -> Check {
    let gen = GeneratorConfig { n_patients: 400, seed: 5, ..GeneratorConfig::default() };
    let (records, generator) = generate_cohort(&gen).map_err(|e| e.to_string())?;
    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default()).map_err(|e| e.to_string())?;
    let tls = first_points(&timelines, 1000);
    let n = vocab.n_concepts();
    let hash = HashForecaster { n_concepts: n, levels: 4 };
    let oracle = OracleForecaster { model: &generator, vocab: &vocab };
    let mut lm = tiny_transformer("glu+rotary", vocab.len(), 2, 16, 1);
    lm.config.max_seq = 50;
    let lm = Transformer::new_random(lm.config.clone(), 1).unwrap();
    let lm = LmForecaster::new(&lm, n, "transformer");
    let models: [&dyn Forecaster; 3] = [&hash, &oracle, &lm];
    let mut problems = Vec::new();
    for m in models {
        let row = evaluate_with(m, &tls, &DEFAULT_N, &DEFAULT_K).map_err(|e| e.to_string())?;
        let brute = brute_force(m, &tls, &DEFAULT_N, &DEFAULT_K, usize::MAX);
        if brute.points != 1000 {
            problems.push(format!("{}: {} points", m.name(), brute.points));
        }
        problems.extend(compare(&row, &brute).into_iter().map(|p| format!("{}: {p}", m.name())));
        problems.extend(report_invariants(&row));
    }
    verdict(problems.is_empty(), if problems.is_empty() { "3 scorers x 1000 points exact".into() } else { problems.join("; ") })
}

pub fn timeline_golden() -> Check {
    let cases = super::timelines::load_cases().len();
    let bad = super::timelines::mismatches();
    verdict(cases == 50 && bad.is_empty(), if bad.is_empty() { format!("{cases} cases byte-exact") } else { bad.join("; ") })
}

/// Saves, reloads and compares outputs bit for bit for all three model
/// families; then corrupts the manifest and payload in several ways.
pub fn checkpoint_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let probe: [&[usize]; 2] = [&[1, 2, 3, 4, 5, 6], &[7, 8]];
    let batch = Batch::new(&probe).unwrap();

    let mut t = tiny_transformer("glu+rotary", 50, 2, 16, 2);
    jitter(&mut t, 0.05, 3);
    let path = dir.path().join("t");
    t.to_checkpoint(None, 7, Some(1.5), "h").save(&path).map_err(|e| e.to_string())?;
    let back = Transformer::from_checkpoint(&Checkpoint::load(&path, Some("h")).map_err(|e| e.to_string())?, None)
        .map_err(|e| e.to_string())?;
    if back.logits(&batch).unwrap().data() != t.logits(&batch).unwrap().data() {
        return Err("transformer logits changed across save/load".into());
    }

    let mut l = tiny_lstm(50, 8, true, 1);
    jitter(&mut l, 0.05, 2);
    let lpath = dir.path().join("l");
    l.to_checkpoint(None, 1, None, "h").save(&lpath).map_err(|e| e.to_string())?;
    let lback = Lstm::from_checkpoint(&Checkpoint::load(&lpath, Some("h")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if lback.logits(&batch).unwrap().data() != l.logits(&batch).unwrap().data() {
        return Err("LSTM logits changed across save/load".into());
    }

    let gen = GeneratorConfig { n_patients: 120, n_concepts: 12, concepts_per_patient: (5, 9), seed: 3, ..GeneratorConfig::default() };
    let (records, _) = generate_cohort(&gen).map_err(|e| e.to_string())?;
    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default()).map_err(|e| e.to_string())?;
    let (x, y) = boc_dataset(&timelines, &vocab);
    let boc = train_boc(&x, &y, &BocConfig { epochs: 2, ..BocConfig::default() }).map_err(|e| e.to_string())?;
    let bpath = dir.path().join("b");
    boc.to_checkpoint(&vocab.hash()).save(&bpath).map_err(|e| e.to_string())?;
    let bback = BocModel::from_checkpoint(&Checkpoint::load(&bpath, Some(&vocab.hash())).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    if x.iter().take(50).any(|f| bback.scores(f).unwrap() != boc.scores(f).unwrap()) {
        return Err("BoC scores changed across save/load".into());
    }

    let manifest = std::fs::read_to_string(path.join(MANIFEST_FILE)).unwrap();
    let json: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    let mut fewer = json.clone();
    fewer["tensors"].as_array_mut().unwrap().pop();
    let mut reshaped = json.clone();
    reshaped["tensors"][0]["shape"] = serde_json::json!([50, 15]);
    let mut rejected = Vec::new();
    type Corrupt = Box<dyn Fn(&std::path::Path)>;
    let corruptions: Vec<(&str, Corrupt)> = vec![
        ("dropped tensor", Box::new(move |p| std::fs::write(p.join(MANIFEST_FILE), fewer.to_string()).unwrap())),
        ("wrong shape", Box::new(move |p| std::fs::write(p.join(MANIFEST_FILE), reshaped.to_string()).unwrap())),
        ("not json", Box::new(|p| std::fs::write(p.join(MANIFEST_FILE), "{ nope").unwrap())),
        ("short payload", Box::new(|p| {
            let bytes = std::fs::read(p.join(PAYLOAD_FILE)).unwrap();
            std::fs::write(p.join(PAYLOAD_FILE), &bytes[..bytes.len() - 4]).unwrap()
        })),
    ];
    for (name, corrupt) in corruptions {
        let copy = dir.path().join(name.replace(' ', "_"));
        std::fs::create_dir_all(&copy).unwrap();
        for f in [MANIFEST_FILE, PAYLOAD_FILE] {
            std::fs::copy(path.join(f), copy.join(f)).unwrap();
        }
        corrupt(&copy);
        let loaded = Checkpoint::load(&copy, Some("h")).and_then(|c| Transformer::from_checkpoint(&c, None));
        if loaded.is_ok() {
            return Err(format!("{name} was accepted"));
        }
        rejected.push(name);
    }
    if Checkpoint::load(&path, Some("other-vocab")).is_ok() {
        return Err("vocabulary mismatch was accepted".into());
    }
    Ok(format!("3 families bit-identical; rejected {}", rejected.join(", ")))
}

/// Times `f` and appends the elapsed seconds to its detail.
pub fn timed(f: impl FnOnce() -> Check) -> (Check, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}

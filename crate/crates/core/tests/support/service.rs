//! Request/response golden suite for the HTTP API against a pinned checkpoint.
//!
//! Fixtures live in `tests/fixtures/service`. To rebuild them (after an
//! intentional format or model change) run with `MEDSEQ_REGENERATE=1`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use medseq::model::{ModelConfig, Transformer, Variant};
use medseq::service::{router, AppState, ServiceConfig};
use medseq::synthcohort::{generate_cohort, GeneratorConfig};
use medseq::timeline::{prepare_corpus, write_vocab, TimelineOptions};
use medseq::training::{train, TrainConfig};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/service")
}

fn regenerating() -> bool {
    std::env::var_os("MEDSEQ_REGENERATE").is_some()
}

fn build_fixture(dir: &Path) {
    let gen = GeneratorConfig { n_concepts: 12, n_patients: 300, seed: 11, concepts_per_patient: (5, 10), ..GeneratorConfig::default() };
    let (records, _) = generate_cohort(&gen).unwrap();
    let (vocab, timelines) = prepare_corpus(&records, 1, &TimelineOptions::default()).unwrap();
    let mut config = ModelConfig::small(vocab.len(), 2, 2, 16);
    config.max_seq = 50;
    let config = Variant::parse("glu+rotary").unwrap().apply(&config, None).unwrap();
    let seqs: Vec<Vec<usize>> = timelines.iter().map(|t| t.ids()).collect();
    let tc = TrainConfig { learning_rate: 3e-3, weight_decay: 0.0, max_steps: 150, warmup_steps: 10, eval_every: 50, ..TrainConfig::default() };
    let out = train(Transformer::new_random(config, 0).unwrap(), &tc, &seqs, &[], &vocab.hash(), None).unwrap();
    std::fs::create_dir_all(dir).unwrap();
    write_vocab(&dir.join("vocab.tsv"), &vocab).unwrap();
    out.best.to_checkpoint(Some(tc), out.best_step, Some(out.best_val_loss), &vocab.hash()).save(&dir.join("checkpoint")).unwrap();
    std::fs::write(dir.join("labels.tsv"), "C000\tDiabetes Mellitus\nC001\tHypertension\nC002\tKetoacidosis in Diabetes Mellitus\n")
        .unwrap();
}

pub fn state() -> Arc<AppState> {
    let dir = fixtures();
    if regenerating() && !dir.join("checkpoint").exists() {
        build_fixture(&dir);
    }
    let mut cfg = ServiceConfig::new(dir.join("checkpoint"), dir.join("vocab.tsv"));
    cfg.labels = Some(dir.join("labels.tsv"));
    Arc::new(AppState::load(&cfg).expect("pinned fixture loads"))
}

pub async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: &str) -> (StatusCode, Value) {
    let app = router(state.clone(), None, 64 * 1024);
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

pub fn close(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => (x.as_f64().unwrap() - y.as_f64().unwrap()).abs() <= 1e-6,
        (Value::Array(x), Value::Array(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| close(p, q)),
        (Value::Object(x), Value::Object(y)) => {
            x.len() == y.len() && x.iter().all(|(k, v)| y.get(k).is_some_and(|w| close(v, w)))
        }
        _ => a == b,
    }
}

pub const HISTORY: &str = r#"[{"kind":"AGE","value":"45"},{"kind":"CONCEPT","value":"C000"},{"kind":"CONCEPT","value":"C001"}]"#;

/// (name, method, uri, body, expected status)
pub fn cases() -> Vec<(&'static str, &'static str, String, String, u16)> {
    let h = HISTORY;
    vec![
        ("health", "GET", "/v1/health".into(), String::new(), 200),
        ("model", "GET", "/v1/model".into(), String::new(), 200),
        ("vocab_top", "GET", "/v1/vocab?limit=3".into(), String::new(), 200),
        ("vocab_query", "GET", "/v1/vocab?q=c00&limit=5".into(), String::new(), 200),
        ("vocab_label", "GET", "/v1/vocab?q=DIAB".into(), String::new(), 200),
        ("vocab_none", "GET", "/v1/vocab?q=zzz".into(), String::new(), 200),
        ("vocab_one", "GET", "/v1/vocab?q=&limit=1".into(), String::new(), 200),
        ("predict", "POST", "/v1/predict".into(), format!(r#"{{"tokens":{h},"top_k":5}}"#), 200),
        ("predict_default_k", "POST", "/v1/predict".into(), format!(r#"{{"tokens":{h}}}"#), 200),
        ("predict_malformed", "POST", "/v1/predict".into(), r#"{"tokens": [oops"#.into(), 400),
        ("predict_wrong_shape", "POST", "/v1/predict".into(), r#"{"tokens": 3}"#.into(), 400),
        (
            "predict_unknown_concept",
            "POST",
            "/v1/predict".into(),
            r#"{"tokens":[{"kind":"AGE","value":"45"},{"kind":"CONCEPT","value":"C999"}]}"#.into(),
            422,
        ),
        ("predict_empty", "POST", "/v1/predict".into(), r#"{"tokens":[]}"#.into(), 422),
        ("mcq", "POST", "/v1/mcq".into(), format!(r#"{{"history":{h},"options":["C003","C004","C005"]}}"#), 200),
        ("mcq_single", "POST", "/v1/mcq".into(), format!(r#"{{"history":{h},"options":["C003"]}}"#), 200),
        ("mcq_unknown_option", "POST", "/v1/mcq".into(), format!(r#"{{"history":{h},"options":["C003","C999"]}}"#), 422),
        ("mcq_duplicate", "POST", "/v1/mcq".into(), format!(r#"{{"history":{h},"options":["C003","C003"]}}"#), 422),
        ("mcq_malformed", "POST", "/v1/mcq".into(), "not json".into(), 400),
        ("saliency", "POST", "/v1/saliency".into(), format!(r#"{{"history":{h}}}"#), 200),
        ("saliency_target", "POST", "/v1/saliency".into(), format!(r#"{{"history":{h},"target":"C004"}}"#), 200),
        (
            "saliency_times_input",
            "POST",
            "/v1/saliency".into(),
            format!(r#"{{"history":{h},"mode":"gradient_times_input"}}"#),
            200,
        ),
        ("saliency_unknown_target", "POST", "/v1/saliency".into(), format!(r#"{{"history":{h},"target":"C999"}}"#), 422),
        ("saliency_malformed", "POST", "/v1/saliency".into(), r#"{"hist": []}"#.into(), 400),
    ]
}

/// Runs every golden case; returns one line per mismatch. With
/// `MEDSEQ_REGENERATE` set, rewrites the golden files instead.
pub async fn run_golden(state: &Arc<AppState>) -> Vec<String> {
    let golden = fixtures().join("golden");
    let mut failures = Vec::new();
    for (name, method, uri, body, status) in cases() {
        let (got_status, got) = call(state, method, &uri, &body).await;
        if got_status.as_u16() != status {
            failures.push(format!("{name}: status {got_status}, expected {status}: {got}"));
            continue;
        }
        let path = golden.join(format!("{name}.json"));
        if regenerating() {
            std::fs::create_dir_all(&golden).unwrap();
            std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
            continue;
        }
        let want: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        if status >= 400 {
            // Error details come from the JSON parser; only the code is pinned.
            if got["error"] != want["error"] || !got["detail"].is_string() {
                failures.push(format!("{name}: {got} vs {want}"));
            }
        } else if !close(&got, &want) {
            failures.push(format!("{name}: {got} vs golden {want}"));
        }
    }
    failures
}

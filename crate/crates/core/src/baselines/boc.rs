use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::evalmetrics::{enumerate_eval_points, EvalError, Forecaster};
use crate::model::Family;
use crate::numerics::{ParamSet, Tape, Tensor};
use crate::timeline::{Timeline, Token, TokenKind, Vocab, MAX_AGE};
use crate::training::{AdamW, Checkpoint, TrainError};

/// Order-blind context summary: which concepts were seen, and the current age.
#[derive(Clone, Debug, PartialEq)]
pub struct BocFeature {
    pub indicators: Vec<bool>,
    /// Latest AGE token divided by the maximum age; 0 without one.
    pub age: f64,
}

impl BocFeature {
    pub fn width(&self) -> usize {
        self.indicators.len() + 1
    }

    pub fn to_row(&self) -> Vec<f32> {
        let mut row: Vec<f32> = self.indicators.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        row.push(self.age as f32);
        row
    }
}

/// Features of a context (the tokens strictly before the prediction point).
pub fn boc_featurize(context: &[Token], vocab: &Vocab) -> BocFeature {
    let mut indicators = vec![false; vocab.n_concepts()];
    let mut age = 0.0;
    for t in context {
        match t.kind {
            TokenKind::Concept if t.id < indicators.len() => indicators[t.id] = true,
            TokenKind::Age => {
                if let Some(a) = vocab.age_of(t.id) {
                    age = a as f64 / MAX_AGE as f64;
                }
            }
            _ => {}
        }
    }
    BocFeature { indicators, age }
}

/// One (feature, target) pair per evaluation point of `timelines`.
pub fn boc_dataset(timelines: &[Timeline], vocab: &Vocab) -> (Vec<BocFeature>, Vec<usize>) {
    enumerate_eval_points(timelines)
        .into_iter()
        .map(|p| (boc_featurize(&timelines[p.timeline].tokens[..p.position], vocab), p.target))
        .unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BocConfig {
    pub learning_rate: f64,
    /// Decoupled L2 shrinkage applied to the weights (not the biases).
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BocConfig {
    fn default() -> Self {
        Self { learning_rate: 0.01, weight_decay: 1e-3, epochs: 20, batch_size: 256, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BocState {
    n_classes: usize,
    config: BocConfig,
}

/// Linear one-vs-rest scorer: `scores = x · weights + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct BocModel {
    pub n_classes: usize,
    pub config: BocConfig,
    /// `weights [n_classes + 1, n_classes]`, `bias [n_classes]`.
    pub params: ParamSet<f32>,
}

impl BocModel {
    pub fn scores(&self, feature: &BocFeature) -> Result<Vec<f64>, BaselineError> {
        if feature.width() != self.n_classes + 1 {
            return Err(BaselineError::FeatureWidth { expected: self.n_classes + 1, found: feature.width() });
        }
        let w = self.params.get(0).value.data();
        let mut s: Vec<f64> = self.params.get(1).value.data().iter().map(|&b| b as f64).collect();
        for (i, x) in feature.to_row().into_iter().enumerate() {
            if x != 0.0 {
                for (c, sc) in s.iter_mut().enumerate() {
                    *sc += (x * w[i * self.n_classes + c]) as f64;
                }
            }
        }
        Ok(s)
    }

    pub fn predict(&self, feature: &BocFeature) -> Result<usize, BaselineError> {
        let s = self.scores(feature)?;
        Ok((0..s.len()).fold(0, |best, c| if s[c] > s[best] { c } else { best }))
    }

    pub fn to_checkpoint(&self, vocab_hash: &str) -> Checkpoint {
        let state = serde_json::to_value(BocState { n_classes: self.n_classes, config: self.config.clone() })
            .expect("state serializes");
        Checkpoint::new(Family::Boc, state, None, self.config.epochs as u64, None, vocab_hash.to_string(), self.params.clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let state: BocState = ckpt.model_config(Family::Boc)?;
        let layout = initial_params(state.n_classes);
        crate::training::check_layout(&ckpt.params, &layout)?;
        Ok(Self { n_classes: state.n_classes, config: state.config, params: ckpt.params.clone() })
    }
}

fn initial_params(n_classes: usize) -> ParamSet<f32> {
    let mut p = ParamSet::new();
    p.push("weights", Tensor::zeros(&[n_classes + 1, n_classes]), true);
    p.push("bias", Tensor::zeros(&[n_classes]), false);
    p
}

/// Trains the one-vs-rest classifier with the multiclass hinge loss
/// `mean_i sum_c max(0, 1 - y_ic s_ic)`, `y = ±1`.
pub fn train_boc(features: &[BocFeature], labels: &[usize], config: &BocConfig) -> Result<BocModel, BaselineError> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(BaselineError::EmptyTrainSet);
    }
    let n_classes = features[0].indicators.len();
    if let Some(f) = features.iter().find(|f| f.indicators.len() != n_classes) {
        return Err(BaselineError::FeatureWidth { expected: n_classes + 1, found: f.width() });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(BaselineError::LabelOutOfRange { label, n_classes });
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(BaselineError::SingleClass);
    }
    if config.batch_size == 0 || config.epochs == 0 || !(config.learning_rate > 0.0) || config.weight_decay < 0.0 {
        return Err(BaselineError::Config(format!("{config:?}")));
    }
    let width = n_classes + 1;
    let rows: Vec<Vec<f32>> = features.iter().map(BocFeature::to_row).collect();
    let mut params = initial_params(n_classes);
    let mut opt = AdamW::new(&params);
    let mut rng = crate::rng::seeded(config.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let n = chunk.len();
            let x: Vec<f32> = chunk.iter().flat_map(|&i| rows[i].iter().copied()).collect();
            let mut y = vec![-1.0f32; n * n_classes];
            for (r, &i) in chunk.iter().enumerate() {
                y[r * n_classes + labels[i]] = 1.0;
            }
            let mut tape = Tape::new();
            let nodes = params.register(&mut tape, true)?;
            let x = tape.constant(Tensor::new(vec![n, width], x)?)?;
            let y = tape.constant(Tensor::new(vec![n, n_classes], y)?)?;
            let s = tape.matmul(x, nodes[0])?;
            let s = tape.add(s, nodes[1])?;
            let m = tape.mul(s, y)?;
            let m = tape.scale(m, -1.0)?;
            let m = tape.add_scalar(m, 1.0)?;
            let h = tape.relu(m)?;
            let total = tape.sum(h)?;
            let loss = tape.scale(total, 1.0 / n as f32)?;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = nodes.iter().map(|&id| grads.take(id)).collect();
            opt.step(&mut params, &grads, config.learning_rate, config.weight_decay)?;
        }
    }
    Ok(BocModel { n_classes, config: config.clone(), params })
}

/// [`BocModel`] scored at every position of a timeline.
pub struct BocForecaster<'a> {
    pub model: &'a BocModel,
    pub vocab: &'a Vocab,
}

impl Forecaster for BocForecaster<'_> {
    fn name(&self) -> String {
        "BoC linear".into()
    }

    fn position_scores(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, EvalError> {
        let mut history = Vec::with_capacity(tokens.len());
        for &id in tokens {
            let kind = self.vocab.kind(id).ok_or_else(|| EvalError::Forecast(format!("token id {id} not in vocabulary")))?;
            history.push(Token { kind, id });
        }
        (1..tokens.len())
            .map(|j| self.model.scores(&boc_featurize(&history[..j], self.vocab)).map_err(|e| EvalError::Forecast(e.to_string())))
            .collect()
    }
}

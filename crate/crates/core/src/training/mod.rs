//! Causal language-model training: loss, schedule, optimizer, loop with
//! validation-based selection, and checkpoints.

mod adamw;
mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adamw::{clip_global_norm, AdamW, BETA1, BETA2, EPSILON};
pub use checkpoint::{check_layout, Checkpoint, Manifest, TensorEntry, FORMAT_VERSION, MANIFEST_FILE, PAYLOAD_FILE};

use crate::model::{Batch, ModelError, SequenceModel};
use crate::numerics::{NodeId, NumericsError, Real, Tape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("every position of the batch is masked")]
    AllMasked,
    #[error("empty training set")]
    EmptyTrainSet,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String, last_good: Option<Box<Checkpoint>> },
    #[error("vocabulary hash mismatch: expected {expected}, checkpoint has {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("model config mismatch in field {0}")]
    ConfigMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io { path: path.to_path_buf(), source }
    }

    /// True for failures caused by non-finite numbers.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            TrainError::Diverged { .. }
                | TrainError::NonFiniteGradient(_)
                | TrainError::Numerics(NumericsError::NonFinite { .. })
                | TrainError::Model(ModelError::Numerics(NumericsError::NonFinite { .. }))
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Training precision; only `"f32"` is supported.
    pub precision: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4.46e-5,
            weight_decay: 0.14,
            batch_size: 32,
            warmup_steps: 15,
            max_steps: 2000,
            seed: 0,
            eval_every: 100,
            grad_clip: 1.0,
            precision: "f32".into(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return bad("batch_size, max_steps and eval_every must be positive");
        }
        if self.precision != "f32" {
            return bad("precision must be f32");
        }
        Ok(())
    }
}

/// Learning rate for update number `step`: linear warmup from 0 to the peak
/// over `warmup_steps`, then linear decay to 0 at `max_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    let (w, m) = (config.warmup_steps, config.max_steps);
    if step < w {
        return lr * step as f64 / w as f64;
    }
    if step >= m {
        return if step == w { lr } else { 0.0 };
    }
    lr * (m - step) as f64 / (m - w) as f64
}

/// Mean negative log-likelihood of `targets` over rows where `loss_mask` is
/// set; `logits` is viewed as `[rows, V]`.
pub fn masked_nll<T: Real>(
    tape: &mut Tape<T>,
    logits: NodeId,
    targets: &[usize],
    loss_mask: &[bool],
) -> Result<NodeId, TrainError> {
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TrainError::AllMasked);
    }
    let weights: Vec<T> = loss_mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    Ok(tape.cross_entropy(logits, targets, &weights, T::of(count as f64), None)?)
}

/// Shifted next-token targets and loss mask of a batch: position `j`
/// predicts token `j + 1` when both are real.
pub fn clm_targets(batch: &Batch) -> (Vec<usize>, Vec<bool>) {
    let (b, s) = (batch.batch, batch.seq);
    let mut targets = vec![0; b * s];
    let mut mask = vec![false; b * s];
    for bi in 0..b {
        for j in 0..s.saturating_sub(1) {
            let (r, next) = (bi * s + j, bi * s + j + 1);
            if batch.mask[r] && batch.mask[next] {
                targets[r] = batch.ids[next];
                mask[r] = true;
            }
        }
    }
    (targets, mask)
}

/// Causal LM loss for logits `[batch, seq, V]` of `batch`.
pub fn clm_loss<T: Real>(tape: &mut Tape<T>, logits: NodeId, batch: &Batch) -> Result<NodeId, TrainError> {
    let (targets, mask) = clm_targets(batch);
    masked_nll(tape, logits, &targets, &mask)
}

/// Token-weighted mean loss of `model` over `sequences` (no dropout).
pub fn mean_loss<M: SequenceModel>(model: &M, sequences: &[Vec<usize>], batch_size: usize) -> Result<f64, TrainError> {
    let (mut total, mut count) = (0.0f64, 0usize);
    for chunk in sequences.chunks(batch_size.max(1)) {
        let refs: Vec<&[usize]> = chunk.iter().map(|s| s.as_slice()).collect();
        let batch = Batch::new(&refs)?;
        let (_, mask) = clm_targets(&batch);
        let n = mask.iter().filter(|&&m| m).count();
        if n == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let nodes = model.params().register(&mut tape, false)?;
        let logits = model.logits_node(model.params(), &nodes, &mut tape, &batch, None)?;
        let loss = clm_loss(&mut tape, logits, &batch)?;
        total += tape.value(loss).item() as f64 * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(TrainError::AllMasked);
    }
    Ok(total / count as f64)
}

/// One training-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    /// Mean training-batch loss since the previous entry.
    pub train_loss: f64,
    pub val_loss: f64,
}

pub struct TrainOutcome<M> {
    /// Parameters with the lowest selection loss among logged evaluations.
    pub best: M,
    pub best_step: u64,
    pub best_val_loss: f64,
    /// Parameters after the last step.
    pub last: M,
    pub log: Vec<LogEntry>,
}

/// Keeps sequences with at least one target, truncated to `max_seq`.
fn usable(sequences: &[Vec<usize>], max_seq: usize) -> Vec<Vec<usize>> {
    sequences.iter().filter(|s| s.len() >= 2).map(|s| s[..s.len().min(max_seq)].to_vec()).collect()
}

/// Trains `model` on `train` with AdamW and the warmup/decay schedule.
///
/// Every `eval_every` steps and after the final step the validation loss is
/// measured (training loss when `validation` is empty) and logged; the
/// best-scoring parameters are returned. With `log_path` each entry is also
/// appended as a JSON line. A non-finite loss or gradient aborts with the
/// best checkpoint seen so far.
pub fn train<M: SequenceModel + Clone>(
    model: M,
    config: &TrainConfig,
    train: &[Vec<usize>],
    validation: &[Vec<usize>],
    vocab_hash: &str,
    log_path: Option<&Path>,
) -> Result<TrainOutcome<M>, TrainError> {
    config.validate()?;
    let train = usable(train, model.max_seq());
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let validation = usable(validation, model.max_seq());
    let selection: &[Vec<usize>] = if validation.is_empty() { &train } else { &validation };
    let mut log_file = match log_path {
        Some(p) => Some(
            std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(|e| TrainError::io(p, e))?,
        ),
        None => None,
    };

    let mut rng = crate::rng::seeded(config.seed);
    let mut dropout_rng = crate::rng::derived(config.seed, 1);
    let mut model = model;
    let mut opt = AdamW::new(model.params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut best: Option<(M, u64, f64)> = None;
    let mut log = Vec::new();
    let (mut window_loss, mut window_steps) = (0.0f64, 0u64);

    let checkpoint_of = |best: &Option<(M, u64, f64)>| {
        best.as_ref().map(|(m, step, loss)| {
            Box::new(Checkpoint::new(
                m.family(),
                m.config_json(),
                Some(config.clone()),
                *step,
                Some(*loss),
                vocab_hash.to_string(),
                m.params().clone(),
            ))
        })
    };

    for step in 1..=config.max_steps {
        if cursor + config.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let refs: Vec<&[usize]> = order[cursor..end].iter().map(|&i| train[i].as_slice()).collect();
        cursor = end;
        let batch = Batch::new(&refs)?;

        let result = (|| -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
            let mut tape = Tape::new();
            let nodes = model.params().register(&mut tape, true)?;
            let logits = model.logits_node(model.params(), &nodes, &mut tape, &batch, Some(&mut dropout_rng))?;
            let loss = clm_loss(&mut tape, logits, &batch)?;
            let value = tape.value(loss).item() as f64;
            let mut grads = tape.backward(loss)?;
            Ok((value, nodes.iter().map(|&n| grads.take(n)).collect()))
        })();
        let (loss, mut grads) = match result {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                return Err(TrainError::Diverged { step, detail: e.to_string(), last_good: checkpoint_of(&best) })
            }
            Err(e) => return Err(e),
        };
        if config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, config.grad_clip);
        }
        let lr = lr_at(step, config);
        if let Err(e) = opt.step(model.params_mut(), &grads, lr, config.weight_decay) {
            return Err(TrainError::Diverged { step, detail: e.to_string(), last_good: checkpoint_of(&best) });
        }
        window_loss += loss;
        window_steps += 1;

        if step % config.eval_every == 0 || step == config.max_steps {
            let val_loss = match mean_loss(&model, selection, config.batch_size) {
                Ok(v) if v.is_finite() => v,
                Ok(v) => {
                    return Err(TrainError::Diverged { step, detail: format!("loss {v}"), last_good: checkpoint_of(&best) })
                }
                Err(e) if e.is_numeric() => {
                    return Err(TrainError::Diverged { step, detail: e.to_string(), last_good: checkpoint_of(&best) })
                }
                Err(e) => return Err(e),
            };
            let entry = LogEntry { step, lr, train_loss: window_loss / window_steps as f64, val_loss };
            if let Some(f) = log_file.as_mut() {
                let line = serde_json::to_string(&entry).expect("log entry serializes");
                writeln!(f, "{line}").map_err(|e| TrainError::io(log_path.unwrap(), e))?;
            }
            log.push(entry);
            (window_loss, window_steps) = (0.0, 0);
            if best.as_ref().is_none_or(|(_, _, b)| val_loss < *b) {
                best = Some((model.clone(), step, val_loss));
            }
        }
    }
    let (best, best_step, best_val_loss) = best.expect("the final step is always evaluated");
    Ok(TrainOutcome { best, best_step, best_val_loss, last: model, log })
}

/// Result of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub val_loss: f64,
}

/// Exhaustive search over learning rates and weight decays; returns every
/// cell in grid order and the index of the best one.
pub fn grid_search<M: SequenceModel + Clone>(
    model: &M,
    base: &TrainConfig,
    learning_rates: &[f64],
    weight_decays: &[f64],
    train_set: &[Vec<usize>],
    validation: &[Vec<usize>],
) -> Result<(Vec<GridPoint>, usize), TrainError> {
    let mut points = Vec::new();
    for &lr in learning_rates {
        for &wd in weight_decays {
            let cfg = TrainConfig { learning_rate: lr, weight_decay: wd, ..base.clone() };
            let out = train(model.clone(), &cfg, train_set, validation, "", None)?;
            points.push(GridPoint { learning_rate: lr, weight_decay: wd, val_loss: out.best_val_loss });
        }
    }
    let best = (0..points.len())
        .min_by(|&a, &b| points[a].val_loss.total_cmp(&points[b].val_loss))
        .ok_or_else(|| TrainError::Config("empty grid".into()))?;
    Ok((points, best))
}

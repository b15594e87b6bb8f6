//! Training regimen: seeded batching, AdamW with decoupled weight decay,
//! linear warmup/decay schedule, per-epoch validation, best-checkpoint
//! selection, and the two reference baselines.
//!
//! Training is single-threaded and a deterministic function of
//! (seed, data, config): repeated runs produce bit-identical histories and
//! checkpoints.

use crate::data::Example;
use crate::error::{Error, Result};
use crate::metrics::{confusion, report, MetricsReport};
use crate::model::{load_checkpoint, predict, save_checkpoint, CaBertModel};
use crate::tensor::{Parameter, Scalar, Tensor};
use crate::tokenizer::{encode, tokenize, TokenSequence, Vocabulary};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Batch size used for evaluation passes (results are batch-independent).
const EVAL_BATCH: usize = 64;

/// Hyperparameters of the training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub class_weights: Option<(f64, f64)>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            epochs: 3,
            batch_size: 16,
            warmup_fraction: 0.10,
            weight_decay: 0.01,
            seed: 42,
            grad_clip_norm: Some(1.0),
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in [0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let Some(clip) = self.grad_clip_norm {
            if clip <= 0.0 {
                return Err(Error::Config(format!(
                    "grad_clip_norm must be > 0, got {clip}"
                )));
            }
        }
        if let Some((w0, w1)) = self.class_weights {
            if w0 <= 0.0 || w1 <= 0.0 {
                return Err(Error::Config("class_weights must be > 0".into()));
            }
        }
        Ok(())
    }

    /// Parses a flat `key=value` config file. Keys match the field names
    /// exactly; unknown or duplicate keys are errors. Blank lines and lines
    /// starting with `#` are skipped. `grad_clip_norm` and `class_weights`
    /// accept `none`; `class_weights` takes a `w0,w1` pair.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected key=value, found {line:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            seen.push(key.to_string());
            let bad = |what: &str| Error::Parse {
                line: line_no,
                msg: format!("invalid {what}: {value:?}"),
            };
            match key {
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "warmup_fraction" => {
                    cfg.warmup_fraction = value.parse().map_err(|_| bad("warmup_fraction"))?
                }
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad("weight_decay"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "grad_clip_norm" => {
                    cfg.grad_clip_norm = if value.eq_ignore_ascii_case("none") {
                        None
                    } else {
                        Some(value.parse().map_err(|_| bad("grad_clip_norm"))?)
                    }
                }
                "class_weights" => {
                    cfg.class_weights = if value.eq_ignore_ascii_case("none") {
                        None
                    } else {
                        let (w0, w1) = value.split_once(',').ok_or_else(|| bad("class_weights"))?;
                        Some((
                            w0.trim().parse().map_err(|_| bad("class_weights"))?,
                            w1.trim().parse().map_err(|_| bad("class_weights"))?,
                        ))
                    }
                }
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Linear warmup to the peak rate over the first
/// `ceil(warmup_fraction * total_steps)` steps, then linear decay to zero at
/// `total_steps`. `step` counts completed optimizer updates (1-based during
/// training); step 0 is the schedule origin.
pub fn lr_at_step(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps < 1 {
        return Err(Error::InvalidArgument("total_steps must be >= 1".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} exceeds total_steps {total_steps}"
        )));
    }
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    if warmup > 0 && step <= warmup {
        Ok(cfg.learning_rate * step as f64 / warmup as f64)
    } else if total_steps == warmup {
        Ok(cfg.learning_rate)
    } else {
        Ok(cfg.learning_rate * (total_steps - step) as f64 / (total_steps - warmup) as f64)
    }
}

/// First and second moment estimates for every parameter, in the model's
/// stable parameter order.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &CaBertModel<T>) -> Self {
        let m = model
            .parameters()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect::<Vec<_>>();
        Self { v: m.clone(), m, t: 0 }
    }
}

/// One AdamW update over all parameters: bias-corrected Adam moments plus
/// decoupled decay `lr * wd * theta`. Rank-1 parameters (biases, layer-norm
/// gammas and betas) are exempt from decay.
pub fn adamw_step<T: Scalar>(
    params: &mut [&mut Parameter<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let beta1 = T::from_f64(ADAM_BETA1);
    let beta2 = T::from_f64(ADAM_BETA2);
    let one_m_beta1 = T::from_f64(1.0 - ADAM_BETA1);
    let one_m_beta2 = T::from_f64(1.0 - ADAM_BETA2);
    let eps = T::from_f64(ADAM_EPS);
    let lr_t = T::from_f64(lr);
    let inv_bc1 = T::from_f64(1.0 / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let decay = T::from_f64(lr * cfg.weight_decay);

    for (i, param) in params.iter_mut().enumerate() {
        if param.value.shape() != state.m[i].shape() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: param.value.shape().to_vec(),
                rhs: state.m[i].shape().to_vec(),
            });
        }
        // Decoupled weight decay only for matrices (embeddings, projections).
        let apply_decay = cfg.weight_decay > 0.0 && param.value.shape().len() >= 2;
        let mv = state.m[i].data_mut();
        let vv = state.v[i].data_mut();
        let gv = param.grad.data();
        let pv = param.value.data_mut();
        for j in 0..pv.len() {
            let g = gv[j];
            mv[j] = beta1 * mv[j] + one_m_beta1 * g;
            vv[j] = beta2 * vv[j] + one_m_beta2 * g * g;
            let m_hat = mv[j] * inv_bc1;
            let v_hat = vv[j] * inv_bc2;
            pv[j] = pv[j] - lr_t * m_hat / (v_hat.sqrt() + eps);
            if apply_decay {
                pv[j] = pv[j] - decay * pv[j];
            }
        }
    }
    Ok(())
}

/// Scales all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(params: &mut [&mut Parameter<T>], max_norm: f64) -> f64 {
    let mut sq_sum = 0.0f64;
    for param in params.iter() {
        for &g in param.grad.data() {
            let g = g.to_f64();
            sq_sum += g * g;
        }
    }
    let norm = sq_sum.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for param in params.iter_mut() {
            for g in param.grad.data_mut().iter_mut() {
                *g = *g * scale;
            }
        }
    }
    norm
}

/// Deterministic per-epoch shuffle seed.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Splits `examples` into index batches. With `shuffle` the order is a
/// seeded permutation; the final partial batch is kept.
pub fn make_batches<E>(
    examples: &[E],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// A tokenized example ready for the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub seq: TokenSequence,
    pub label: u8,
}

/// Encodes windowed examples against a vocabulary at the model's `max_len`.
pub fn encode_examples(
    examples: &[Example],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<LabeledSequence>> {
    examples
        .iter()
        .map(|e| {
            Ok(LabeledSequence {
                seq: encode(&e.turns, vocab, max_len)?,
                label: e.label,
            })
        })
        .collect()
}

/// Per-epoch measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub train_loss: f64,
    pub validation: MetricsReport,
}

/// The full training trace: one record per epoch, the best epoch index
/// (0-based, maximizing validation accuracy, earliest on ties), and the
/// total number of optimizer steps taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps_total: usize,
}

/// Runs the full regimen: `epochs` passes over seeded batches with the
/// warmup/decay schedule, validation after every epoch, and a checkpoint
/// write whenever validation accuracy strictly improves. Returns the model
/// reloaded from the best checkpoint together with the history.
pub fn train(
    model: CaBertModel<f32>,
    train_set: &[LabeledSequence],
    val_set: &[LabeledSequence],
    cfg: &TrainConfig,
    checkpoint_path: &Path,
) -> Result<(CaBertModel<f32>, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument(
            "train and validation sets must be non-empty".into(),
        ));
    }
    let max_len = model.config.max_len;
    if let Some(bad) = train_set
        .iter()
        .chain(val_set)
        .find(|e| e.seq.ids.len() != max_len)
    {
        return Err(Error::InvalidArgument(format!(
            "sequence length {} does not match model max_len {max_len}",
            bad.seq.ids.len()
        )));
    }

    let mut model = model;
    let mut adam = AdamState::new(&model);
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let class_weights: Option<[f32; 2]> =
        cfg.class_weights.map(|(w0, w1)| [w0 as f32, w1 as f32]);

    // Dropout gets its own stream, independent of the shuffle seeds.
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_D400_0000_0001);

    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: 0,
        steps_total: total_steps,
    };
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let batches = make_batches(train_set, cfg.batch_size, epoch_seed(cfg.seed, epoch), true);
        let mut loss_sum = 0.0f64;
        for batch_idx in batches {
            let batch: Vec<&TokenSequence> =
                batch_idx.iter().map(|&i| &train_set[i].seq).collect();
            let labels: Vec<usize> =
                batch_idx.iter().map(|&i| train_set[i].label as usize).collect();

            model.zero_grads();
            let loss = model.train_step(
                &batch,
                &labels,
                class_weights.as_ref().map(|w| w.as_slice()),
                &mut dropout_rng,
            )?;
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence { step: step + 1, loss });
            }
            loss_sum += loss * batch.len() as f64;

            let mut params = model.parameters_mut();
            if let Some(clip) = cfg.grad_clip_norm {
                clip_grad_norm(&mut params, clip);
            }
            step += 1;
            let lr = lr_at_step(step, total_steps, cfg)?;
            adamw_step(&mut params, &mut adam, lr, cfg)?;
        }

        let validation = evaluate(&model, val_set)?;
        if validation.accuracy > best_accuracy {
            best_accuracy = validation.accuracy;
            history.best_epoch = epoch;
            save_checkpoint(&model, checkpoint_path)?;
        }
        history.epochs.push(EpochRecord {
            train_loss: loss_sum / train_set.len() as f64,
            validation,
        });
    }

    let best = load_checkpoint(checkpoint_path)?;
    Ok((best, history))
}

/// Eval-mode pass over the whole dataset, reported through the metrics
/// module.
pub fn evaluate<T: Scalar>(
    model: &CaBertModel<T>,
    dataset: &[LabeledSequence],
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("evaluate over an empty dataset".into()));
    }
    let mut y_true = Vec::with_capacity(dataset.len());
    let mut y_pred = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(EVAL_BATCH) {
        let batch: Vec<&TokenSequence> = chunk.iter().map(|e| &e.seq).collect();
        let logits = model.forward_eval(&batch)?;
        for (pred, example) in predict(&logits)?.iter().zip(chunk) {
            y_true.push(example.label);
            y_pred.push(pred.label);
        }
    }
    Ok(report(&confusion(&y_true, &y_pred)?))
}

/// Majority-class baseline: predicts the most frequent training label
/// everywhere (ties toward label 0).
pub fn baseline_majority(train_set: &[Example], eval_set: &[Example]) -> Result<MetricsReport> {
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::InvalidArgument("baseline over an empty dataset".into()));
    }
    let ones = train_set.iter().filter(|e| e.label == 1).count();
    let majority = u8::from(ones * 2 > train_set.len());
    let y_true: Vec<u8> = eval_set.iter().map(|e| e.label).collect();
    let y_pred = vec![majority; eval_set.len()];
    Ok(report(&confusion(&y_true, &y_pred)?))
}

/// Bag-of-words logistic regression baseline: word-count features over the
/// training vocabulary, trained by full-batch gradient descent from zero
/// init, which makes it deterministic without any seed.
pub fn baseline_bow(train_set: &[Example], eval_set: &[Example]) -> Result<MetricsReport> {
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::InvalidArgument("baseline over an empty dataset".into()));
    }
    let mut feature_index: HashMap<String, usize> = HashMap::new();
    let featurize = |e: &Example, index: &HashMap<String, usize>| -> Vec<(usize, f64)> {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for turn in &e.turns {
            for token in tokenize(turn) {
                if let Some(&j) = index.get(&token) {
                    *counts.entry(j).or_insert(0.0) += 1.0;
                }
            }
        }
        let mut sparse: Vec<(usize, f64)> = counts.into_iter().collect();
        sparse.sort_unstable_by_key(|&(j, _)| j);
        sparse
    };
    for e in train_set {
        for turn in &e.turns {
            for token in tokenize(turn) {
                let next = feature_index.len();
                feature_index.entry(token).or_insert(next);
            }
        }
    }

    let n_features = feature_index.len();
    let mut weights = vec![0.0f64; n_features];
    let mut bias = 0.0f64;
    let features: Vec<Vec<(usize, f64)>> =
        train_set.iter().map(|e| featurize(e, &feature_index)).collect();
    let labels: Vec<f64> = train_set.iter().map(|e| e.label as f64).collect();

    const ITERATIONS: usize = 300;
    const LR: f64 = 0.5;
    let n = train_set.len() as f64;
    for _ in 0..ITERATIONS {
        let mut grad_w = vec![0.0f64; n_features];
        let mut grad_b = 0.0f64;
        for (x, &y) in features.iter().zip(&labels) {
            let mut z = bias;
            for &(j, v) in x {
                z += weights[j] * v;
            }
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - y;
            for &(j, v) in x {
                grad_w[j] += err * v;
            }
            grad_b += err;
        }
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= LR * g / n;
        }
        bias -= LR * grad_b / n;
    }

    let y_true: Vec<u8> = eval_set.iter().map(|e| e.label).collect();
    let y_pred: Vec<u8> = eval_set
        .iter()
        .map(|e| {
            let mut z = bias;
            for (j, v) in featurize(e, &feature_index) {
                z += weights[j] * v;
            }
            u8::from(z > 0.0) // p > 0.5; ties toward label 0
        })
        .collect();
    Ok(report(&confusion(&y_true, &y_pred)?))
}

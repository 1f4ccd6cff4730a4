//! Training of the soft prompt and passage adapter against a frozen model.
//!
//! Each step expands a batch of `(q, d+, d-)` instances with in-batch
//! negatives and minimizes the mean over pairs of
//!
//! ```text
//! w_point · (−I(q|d+)) + w_pair · max(0, I(q|d−) − I(q|d+))
//! ```
//!
//! with Adam, separate learning rates for the soft prompt and the adapter,
//! and linear decay to zero.

use std::collections::HashMap;
use std::io::Write;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::adapter::{BoundPspt, PsptParams, SEPARATOR};
use crate::error::{PsptError, Result};
use crate::eval::QaDataset;
use crate::model::{BoundModel, MicroLM, Vocabulary};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::scoring::{question_loglik, ScoreMode};
use crate::tensor::{Graph, Real, SeededRng, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub question_id: String,
    pub question: Vec<u32>,
    pub positive_id: String,
    pub positive: Vec<u32>,
    pub negative_id: String,
    pub negative: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub in_batch_negatives: usize,
    pub epochs: usize,
    pub lr_soft_prompt: f64,
    pub lr_adapter: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub train_sample_size: usize,
    pub dev_fraction: f64,
    pub point_weight: f64,
    pub pair_weight: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            in_batch_negatives: 4,
            epochs: 20,
            lr_soft_prompt: 3e-2,
            lr_adapter: 3e-5,
            early_stop_patience: 3,
            seed: 0,
            train_sample_size: 320,
            dev_fraction: 0.1,
            point_weight: 1.0,
            pair_weight: 1.0,
            clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.in_batch_negatives == 0 || self.in_batch_negatives > self.batch_size {
            problems.push(format!(
                "in_batch_negatives must be in 1..={} (got {})",
                self.batch_size, self.in_batch_negatives
            ));
        }
        for (name, v) in [
            ("lr_soft_prompt", self.lr_soft_prompt),
            ("lr_adapter", self.lr_adapter),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be positive (got {v})"));
            }
        }
        for (name, v) in [("point_weight", self.point_weight), ("pair_weight", self.pair_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be non-negative (got {v})"));
            }
        }
        if self.early_stop_patience == 0 {
            problems.push("early_stop_patience must be at least 1".to_string());
        }
        if self.train_sample_size == 0 {
            problems.push("train_sample_size must be at least 1".to_string());
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            problems.push(format!("dev_fraction must be in [0, 1) (got {})", self.dev_fraction));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(PsptError::Config(problems.join("; ")))
        }
    }
}

/// Samples `sample_size` questions without replacement and one positive and
/// one negative passage for each.
pub fn build_instances(
    dataset: &QaDataset,
    vocab: &Vocabulary,
    seed: u64,
    sample_size: usize,
) -> Result<Vec<TrainingInstance>> {
    let mut eligible = Vec::new();
    for r in &dataset.records {
        let has_pos = r.passages.iter().any(|p| p.relevant);
        let has_neg = r.passages.iter().any(|p| !p.relevant);
        if !has_pos || !has_neg {
            warn!("question {} skipped: needs a positive and a negative passage", r.question_id);
        } else if vocab.tokenize(&r.question_text).is_empty() {
            warn!("question {} skipped: empty after tokenization", r.question_id);
        } else {
            eligible.push(r);
        }
    }
    if eligible.len() < sample_size {
        return Err(PsptError::Data(format!(
            "{} eligible questions, {sample_size} requested",
            eligible.len()
        )));
    }
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut eligible);
    eligible.truncate(sample_size);
    Ok(eligible
        .into_iter()
        .map(|r| {
            let pos: Vec<_> = r.passages.iter().filter(|p| p.relevant).collect();
            let neg: Vec<_> = r.passages.iter().filter(|p| !p.relevant).collect();
            let p = *rng.choose(&pos).expect("non-empty");
            let n = *rng.choose(&neg).expect("non-empty");
            TrainingInstance {
                question_id: r.question_id.clone(),
                question: vocab.tokenize(&r.question_text),
                positive_id: p.passage_id.clone(),
                positive: vocab.tokenize(&p.text),
                negative_id: n.passage_id.clone(),
                negative: vocab.tokenize(&n.text),
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingPair<'a> {
    /// Index of the owning instance within the batch.
    pub instance: usize,
    pub question: &'a [u32],
    pub positive: &'a [u32],
    pub negative: &'a [u32],
    pub negative_id: &'a str,
}

/// Each instance keeps its own negative and borrows up to `m - 1` more from
/// the other instances in round-robin order: their positives first, then
/// their negatives. A question's own positive id is never used as a negative.
pub fn expand_in_batch(batch: &[TrainingInstance], m: usize) -> Vec<TrainingPair<'_>> {
    let mut out = Vec::new();
    let n = batch.len();
    for (i, inst) in batch.iter().enumerate() {
        let mut used: Vec<&str> = Vec::new();
        let others = (1..n).map(|s| &batch[(i + s) % n]);
        let candidates = std::iter::once((inst.negative_id.as_str(), inst.negative.as_slice()))
            .chain(others.clone().map(|o| (o.positive_id.as_str(), o.positive.as_slice())))
            .chain(others.map(|o| (o.negative_id.as_str(), o.negative.as_slice())));
        for (id, text) in candidates {
            if used.len() == m {
                break;
            }
            if id == inst.positive_id || used.contains(&id) {
                continue;
            }
            used.push(id);
            out.push(TrainingPair {
                instance: i,
                question: &inst.question,
                positive: &inst.positive,
                negative: text,
                negative_id: id,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub point: f64,
    pub pair: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { point: 1.0, pair: 1.0 }
    }
}

/// Mean losses of a set of pairs as graph nodes.
struct BatchLoss {
    total: Var,
    point: f64,
    pair: f64,
}

struct LossContext<'a> {
    model: &'a BoundModel,
    theta: &'a BoundPspt,
    sep: &'a [u32],
    max_len: usize,
}

impl LossContext<'_> {
    fn loglik<T: Real>(&self, g: &mut Graph<T>, q: &[u32], d: &[u32]) -> Result<Var> {
        let a = self.theta.assemble(g, self.model, self.sep, d, q, self.max_len)?;
        question_loglik(g, self.model, &a, ScoreMode::Sum)
    }

    fn batch<T: Real>(&self, g: &mut Graph<T>, pairs: &[TrainingPair], w: LossWeights) -> Result<BatchLoss> {
        if pairs.is_empty() {
            return Err(PsptError::Contract("no training pairs".into()));
        }
        let mut positives: HashMap<usize, Var> = HashMap::new();
        let mut total: Option<Var> = None;
        let (mut point_sum, mut pair_sum) = (0.0, 0.0);
        for p in pairs {
            let pos = match positives.get(&p.instance) {
                Some(&v) => v,
                None => {
                    let v = self.loglik(g, p.question, p.positive)?;
                    positives.insert(p.instance, v);
                    v
                }
            };
            let neg = self.loglik(g, p.question, p.negative)?;
            let point = g.neg(pos);
            let margin = g.sub(neg, pos)?;
            let hinge = g.relu(margin);
            point_sum += g.value(point).item().to_f64_lossy();
            pair_sum += g.value(hinge).item().to_f64_lossy();
            let a = g.scale(point, T::from_f64_lossy(w.point));
            let b = g.scale(hinge, T::from_f64_lossy(w.pair));
            let l = g.add(a, b)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let n = pairs.len() as f64;
        let total = g.scale(total.expect("non-empty"), T::from_f64_lossy(1.0 / n));
        Ok(BatchLoss {
            total,
            point: point_sum / n,
            pair: pair_sum / n,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub point: f64,
    pub pair: f64,
}

/// Loss of a single `(q, d+, d-)` triple and its gradients wrt `[e1, A, B]`.
pub fn loss_and_grad<T: Real>(
    question: &[u32],
    positive: &[u32],
    negative: &[u32],
    params: &PsptParams<T>,
    model: &MicroLM<T>,
    weights: LossWeights,
) -> Result<(LossParts, [Tensor<T>; 3])> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let bp = params.bind(&mut g, true);
    let sep = model.tokenize(SEPARATOR);
    let ctx = LossContext {
        model: &bm,
        theta: &bp,
        sep: &sep,
        max_len: model.config().max_seq_len,
    };
    let pair = TrainingPair {
        instance: 0,
        question,
        positive,
        negative,
        negative_id: "",
    };
    let loss = ctx.batch(&mut g, &[pair], weights)?;
    let total = g.value(loss.total).item().to_f64_lossy();
    let mut grads = g.backward(loss.total)?;
    let mut take = |v| grads.take(v).expect("trainable leaf has a gradient");
    let out = [take(bp.e1), take(bp.a), take(bp.b)];
    Ok((
        LossParts {
            total,
            point: loss.point,
            pair: loss.pair,
        },
        out,
    ))
}

fn forward_only<T: Real>(
    question: &[u32],
    positive: &[u32],
    negative: &[u32],
    params: &PsptParams<T>,
    model: &MicroLM<T>,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let bm = model.bind(&mut g, false);
    let bp = params.bind(&mut g, false);
    let sep = model.tokenize(SEPARATOR);
    let ctx = LossContext {
        model: &bm,
        theta: &bp,
        sep: &sep,
        max_len: model.config().max_seq_len,
    };
    let pair = TrainingPair {
        instance: 0,
        question,
        positive,
        negative,
        negative_id: "",
    };
    let loss = ctx.batch(&mut g, &[pair], LossWeights::default())?;
    Ok(LossParts {
        total: g.value(loss.total).item().to_f64_lossy(),
        point: loss.point,
        pair: loss.pair,
    })
}

/// `−I(q | d+)`.
pub fn loss_point<T: Real>(
    question: &[u32],
    positive: &[u32],
    params: &PsptParams<T>,
    model: &MicroLM<T>,
) -> Result<f64> {
    Ok(forward_only(question, positive, positive, params, model)?.point)
}

/// `max(0, I(q | d−) − I(q | d+))`.
pub fn loss_pair<T: Real>(
    question: &[u32],
    positive: &[u32],
    negative: &[u32],
    params: &PsptParams<T>,
    model: &MicroLM<T>,
) -> Result<f64> {
    Ok(forward_only(question, positive, negative, params, model)?.pair)
}

/// `loss_point + loss_pair`.
pub fn loss_total<T: Real>(
    question: &[u32],
    positive: &[u32],
    negative: &[u32],
    params: &PsptParams<T>,
    model: &MicroLM<T>,
) -> Result<f64> {
    let parts = forward_only(question, positive, negative, params, model)?;
    Ok(parts.point + parts.pair)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr_g1: f64,
    pub lr_g2: f64,
    pub loss: f64,
    pub loss_point: f64,
    pub loss_pair: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub dev_loss: f64,
    pub best: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

pub fn write_log(records: &[LogRecord], out: &mut dyn Write) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest dev loss.
    pub params: PsptParams<T>,
    pub log: Vec<LogRecord>,
    /// 0 means no epoch improved on the initial parameters.
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub initial_dev_loss: f64,
    pub epochs_run: usize,
    pub steps: usize,
}

/// `(train, dev)` split of instance indices; with a single instance both
/// sides hold it.
fn split_dev(n: usize, fraction: f64, rng: &mut SeededRng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    if n < 2 {
        return (idx.clone(), idx);
    }
    let n_dev = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let train = idx.split_off(n_dev);
    (train, idx)
}

fn dev_loss<T: Real>(
    dev: &[TrainingInstance],
    config: &TrainConfig,
    model: &MicroLM<T>,
    params: &PsptParams<T>,
    sep: &[u32],
) -> Result<f64> {
    let weights = LossWeights {
        point: config.point_weight,
        pair: config.pair_weight,
    };
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in dev.chunks(config.batch_size) {
        let pairs = expand_in_batch(chunk, config.in_batch_negatives);
        let mut g = Graph::new();
        let bm = model.bind(&mut g, false);
        let bp = params.bind(&mut g, false);
        let ctx = LossContext {
            model: &bm,
            theta: &bp,
            sep,
            max_len: model.config().max_seq_len,
        };
        let loss = ctx.batch(&mut g, &pairs, weights)?;
        sum += g.value(loss.total).item().to_f64_lossy() * pairs.len() as f64;
        count += pairs.len();
    }
    Ok(sum / count.max(1) as f64)
}

/// Optimizes θ on `instances`; the model is only read.
pub fn train<T: Real>(
    config: &TrainConfig,
    instances: &[TrainingInstance],
    model: &MicroLM<T>,
    params: PsptParams<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if instances.is_empty() {
        return Err(PsptError::Data("no training instances".into()));
    }
    let sep = model.tokenize(SEPARATOR);
    let rng = SeededRng::new(config.seed);
    let (train_idx, dev_idx) = split_dev(instances.len(), config.dev_fraction, &mut rng.fork(1));
    let mut train_set: Vec<TrainingInstance> = train_idx.iter().map(|&i| instances[i].clone()).collect();
    let dev_set: Vec<TrainingInstance> = dev_idx.iter().map(|&i| instances[i].clone()).collect();
    let mut order_rng = rng.fork(2);

    let initial_dev_loss = dev_loss(&dev_set, config, model, &params, &sep)?;
    let mut log = vec![LogRecord::Epoch(EpochRecord {
        epoch: 0,
        dev_loss: initial_dev_loss,
        best: true,
    })];
    let mut best = (params.clone(), 0usize, initial_dev_loss);
    let mut params = params;
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut adam = Adam::new(AdamConfig::default(), &params.tensors());
    let weights = LossWeights {
        point: config.point_weight,
        pair: config.pair_weight,
    };
    let mut step = 0usize;
    let mut stale = 0usize;
    let mut epochs_run = 0usize;
    info!(
        "training on {} instances ({} dev), {} steps per epoch",
        train_set.len(),
        dev_set.len(),
        steps_per_epoch
    );

    for epoch in 1..=config.epochs {
        order_rng.shuffle(&mut train_set);
        for chunk in train_set.chunks(config.batch_size) {
            let decay = 1.0 - step as f64 / total_steps as f64;
            let lrs = [config.lr_soft_prompt * decay, config.lr_adapter * decay];
            let pairs = expand_in_batch(chunk, config.in_batch_negatives);
            let mut g = Graph::new();
            let bm = model.bind(&mut g, false);
            let bp = params.bind(&mut g, true);
            let ctx = LossContext {
                model: &bm,
                theta: &bp,
                sep: &sep,
                max_len: model.config().max_seq_len,
            };
            let loss = ctx.batch(&mut g, &pairs, weights)?;
            let value = g.value(loss.total).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(PsptError::Numeric(format!(
                    "training loss is {value} at step {step}"
                )));
            }
            let mut grads = g.backward(loss.total)?;
            let mut grad_list: Vec<Tensor<T>> = [bp.e1, bp.a, bp.b]
                .into_iter()
                .map(|v| grads.take(v).expect("trainable leaf has a gradient"))
                .collect();
            drop(g);
            clip_global_norm(&mut grad_list, config.clip_norm);
            let grad_refs: Vec<&Tensor<T>> = grad_list.iter().collect();
            let mut tensors = params.tensors_mut();
            adam.step(&mut tensors, &grad_refs, &[lrs[0], lrs[1], lrs[1]]);
            log.push(LogRecord::Step(StepRecord {
                step,
                epoch,
                lr_g1: lrs[0],
                lr_g2: lrs[1],
                loss: value,
                loss_point: loss.point,
                loss_pair: loss.pair,
            }));
            step += 1;
        }
        epochs_run = epoch;
        let dev = dev_loss(&dev_set, config, model, &params, &sep)?;
        if !dev.is_finite() {
            return Err(PsptError::Numeric(format!(
                "dev loss is {dev} after epoch {epoch} (step {step})"
            )));
        }
        let improved = dev < best.2;
        if improved {
            best = (params.clone(), epoch, dev);
            stale = 0;
        } else {
            stale += 1;
        }
        log.push(LogRecord::Epoch(EpochRecord {
            epoch,
            dev_loss: dev,
            best: improved,
        }));
        debug!("epoch {epoch}: dev loss {dev:.4}{}", if improved { " (best)" } else { "" });
        if stale >= config.early_stop_patience {
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    let (best_params, best_epoch, best_dev_loss) = best;
    info!("best dev loss {best_dev_loss:.4} at epoch {best_epoch}");
    Ok(TrainOutcome {
        params: best_params,
        log,
        best_epoch,
        best_dev_loss,
        initial_dev_loss,
        epochs_run,
        steps: step,
    })
}

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::vocab::BOS;
use super::MicroLM;
use crate::error::{PsptError, Result};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::tensor::{Graph, SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 0,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// `[BOS] + ids`, truncated so the input fits the context window.
fn training_window(ids: &[u32], max_seq_len: usize) -> Vec<u32> {
    let mut seq = Vec::with_capacity(ids.len() + 1);
    seq.push(BOS);
    seq.extend_from_slice(ids);
    seq.truncate(max_seq_len + 1);
    seq
}

/// Mean next-token cross-entropy (nats per token) of `model` over `corpus`.
pub fn mean_next_token_loss(model: &MicroLM<f32>, corpus: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for ids in corpus {
        let seq = training_window(ids, model.config().max_seq_len);
        if seq.len() < 2 {
            continue;
        }
        let mut g = Graph::<f32>::new();
        let bound = model.bind(&mut g, false);
        let input = bound.embed(&mut g, &seq[..seq.len() - 1])?;
        let positions: Vec<usize> = (0..seq.len() - 1).collect();
        let lp = bound.target_logprobs(&mut g, input, &positions, &seq[1..])?;
        total -= g.value(lp).data().iter().map(|&v| v as f64).sum::<f64>();
        count += seq.len() - 1;
    }
    if count == 0 {
        return Err(PsptError::Data("corpus has no predictable tokens".into()));
    }
    Ok(total / count as f64)
}

/// Trains every weight of `model` on next-token prediction over `corpus` with
/// Adam and linear learning-rate decay. The caller freezes the result.
pub fn pretrain_micro_lm(
    mut model: MicroLM<f32>,
    corpus: &[Vec<u32>],
    config: &PretrainConfig,
) -> Result<MicroLM<f32>> {
    let usable: Vec<&Vec<u32>> = corpus.iter().filter(|s| !s.is_empty()).collect();
    if usable.is_empty() {
        return Err(PsptError::Data("pretraining corpus is empty".into()));
    }
    for s in &usable {
        model.vocab().check_ids(s)?;
    }
    if config.steps == 0 {
        return Ok(model);
    }
    let mut rng = SeededRng::new(config.seed);
    let mut adam = {
        let params: Vec<&Tensor<f32>> = model.params().named().into_iter().map(|(_, t)| t).collect();
        Adam::new(AdamConfig::default(), &params)
    };
    let max_len = model.config().max_seq_len;
    for step in 0..config.steps {
        let lr = config.lr * (1.0 - step as f64 / config.steps as f64);
        let mut g = Graph::<f32>::new();
        let bound = model.bind(&mut g, true);
        let mut losses = Vec::new();
        let mut tokens = 0usize;
        for _ in 0..config.batch_size.max(1) {
            let seq = training_window(usable[rng.below(usable.len())], max_len);
            let input = bound.embed(&mut g, &seq[..seq.len() - 1])?;
            let positions: Vec<usize> = (0..seq.len() - 1).collect();
            let lp = bound.target_logprobs(&mut g, input, &positions, &seq[1..])?;
            losses.push(g.sum(lp));
            tokens += seq.len() - 1;
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = g.add(total, l)?;
        }
        let loss = g.scale(total, -1.0 / tokens as f32);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(PsptError::Numeric(format!(
                "pretraining loss not finite at step {step}"
            )));
        }
        let mut grads = g.backward(loss)?;
        let mut grad_list: Vec<Tensor<f32>> = bound
            .vars()
            .into_iter()
            .map(|v| grads.take(v).expect("trainable leaf has a gradient"))
            .collect();
        drop(g);
        clip_global_norm(&mut grad_list, 1.0);
        let grad_refs: Vec<&Tensor<f32>> = grad_list.iter().collect();
        let mut named = model.params_mut().named_mut();
        let mut params: Vec<&mut Tensor<f32>> = named.iter_mut().map(|(_, t)| &mut **t).collect();
        let lrs = vec![lr; params.len()];
        adam.step(&mut params, &grad_refs, &lrs);
        if step % 50 == 0 || step + 1 == config.steps {
            debug!("pretrain step {step}: loss {value:.4} lr {lr:.2e}");
        }
    }
    info!("pretraining finished after {} steps", config.steps);
    Ok(model)
}

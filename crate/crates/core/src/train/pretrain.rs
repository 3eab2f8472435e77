//! Supervised training of the auxiliary networks (identity embedding,
//! stand-alone age estimator).

use serde::{Deserialize, Serialize};

use super::losses::estimator_supervised_loss;
use crate::data::{batch_iterator, stack, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{AgeEstimator, EmbeddingNet, Module};
use crate::tensor::{Adam, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 8,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            seed: 0,
        }
    }
}

fn run_epochs(
    cfg: &PretrainConfig,
    data: &[LabeledImage],
    module: &dyn Module,
    what: &str,
    mut loss_of: impl FnMut(&Tape, &[usize]) -> Result<f64>,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::arg(format!("{what}: empty training set")));
    }
    let params = module.params();
    params.iter().for_each(|(_, p)| p.set_requires_grad(true));
    let mut opt = Adam::new(params, cfg.lr, cfg.beta1);
    let batch = cfg.batch_size.min(data.len());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let seed = cfg.seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(epoch as u64);
        let mut total = 0.0;
        let mut count = 0;
        for idx in batch_iterator(data.len(), batch, seed)? {
            opt.zero_grad();
            let tape = Tape::new();
            total += loss_of(&tape, &idx)?;
            count += 1;
            opt.step()?;
        }
        let mean = total / count as f64;
        log::info!("{what}: epoch {} loss {mean:.4}", epoch + 1);
        curve.push(mean);
    }
    module.set_trainable(false);
    module.zero_grad();
    Ok(curve)
}

/// Trains `net` as an identity classifier over `labels` (one class index
/// per sample, `< net.classes()`); the network is frozen afterwards.
pub fn pretrain_embedding(
    net: &EmbeddingNet,
    data: &[LabeledImage],
    labels: &[usize],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if labels.len() != data.len() {
        return Err(Error::dim("pretrain_embedding", "label count", data.len(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= net.classes()) {
        return Err(Error::arg(format!("label {bad} outside 0..{}", net.classes())));
    }
    run_epochs(cfg, data, net, "identity embedding", |tape, idx| {
        let x = tape.constant(stack(data, idx)?);
        let logits = net.classify(tape, net.embed(tape, x)?)?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let loss = logits.log_softmax().pick(&y)?.mean().scale(-1.0);
        let v = loss.item();
        tape.backward(loss)?;
        Ok(v)
    })
}

/// Trains `est` on true age groups; frozen afterwards.
pub fn pretrain_age_estimator(est: &AgeEstimator, data: &[LabeledImage], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    run_epochs(cfg, data, est, "age estimator", |tape, idx| {
        let x = tape.constant(stack(data, idx)?);
        let groups: Vec<usize> = idx.iter().map(|&i| data[i].group()).collect();
        let loss = estimator_supervised_loss(est.forward(tape, x)?, &groups)?;
        let v = loss.item();
        tape.backward(loss)?;
        Ok(v)
    })
}

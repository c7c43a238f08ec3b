use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::data::{shuffled_indices, Dataset};
use super::network::Network;
use crate::error::{contract_err, Error, Result};
use crate::schemes::MaskSet;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            batch: 32,
            seed: 0,
        }
    }
}

/// Quadratic pull of selected weight tensors toward fixed targets:
/// `sum_l coef_l / 2 * ||W_l - target_l||_F^2`.
#[derive(Debug, Clone, Default)]
pub struct ProximalPenalty {
    /// `(layer index, target, coefficient)`.
    pub terms: Vec<(usize, Tensor, f64)>,
}

/// Per-epoch means of the data loss and the penalty term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub penalty: f64,
}

/// Trains with Adam on mean softmax cross-entropy; returns the mean loss of
/// each epoch.
pub fn train(network: &mut Network, data: &Dataset, config: &TrainConfig) -> Result<Vec<f64>> {
    Ok(train_with(network, data, config, None, None)?
        .into_iter()
        .map(|s| s.loss)
        .collect())
}

/// Training loop shared by baseline training, ADMM subproblem 1 and masked
/// retraining. When `masks` is given, masked weights (and the biases of
/// masked filters) are zeroed after every optimizer step.
pub fn train_with(
    network: &mut Network,
    data: &Dataset,
    config: &TrainConfig,
    penalty: Option<&ProximalPenalty>,
    masks: Option<&MaskSet>,
) -> Result<Vec<EpochStats>> {
    if config.epochs == 0 {
        return contract_err("epochs must be >= 1");
    }
    if data.is_empty() || config.batch == 0 {
        return contract_err("empty dataset or zero batch size");
    }
    if let Some(m) = masks {
        m.enforce(network)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(
        network.params().iter().map(|t| t.shape()),
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = shuffled_indices(data.len(), &mut rng);
        let (mut loss_sum, mut pen_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            let (images, labels) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let x = tape.constant(images);
            let (logits, params) = network.forward_tape(&mut tape, x)?;
            let ce = tape.softmax_cross_entropy(logits, &labels)?;
            let ce_value = tape.value(ce).data()[0];
            let mut total = ce;
            let mut pen_value = 0.0;
            if let Some(p) = penalty {
                for (layer, target, coef) in &p.terms {
                    let pos = params
                        .layer_index
                        .iter()
                        .position(|l| l == layer)
                        .ok_or_else(|| Error::Contract(format!("penalty on non-parameter layer {layer}")))?;
                    let term = tape.sq_dist(params.vars[pos].0, target.clone(), *coef)?;
                    pen_value += tape.value(term).data()[0];
                    total = tape.add(total, term)?;
                }
            }
            if !ce_value.is_finite() || !pen_value.is_finite() {
                return Err(Error::Training {
                    iteration: None,
                    message: format!("non-finite loss in epoch {epoch}"),
                });
            }
            let mut grads = tape.backward(total)?;
            let grads: Vec<Tensor> = params
                .vars
                .iter()
                .flat_map(|&(w, b)| [w, b])
                .map(|v| grads.take(v))
                .collect();
            adam_step(&mut network.params_mut(), &grads, &mut adam)?;
            if let Some(m) = masks {
                m.enforce(network)?;
            }
            loss_sum += ce_value;
            pen_sum += pen_value;
            batches += 1;
        }
        history.push(EpochStats {
            loss: loss_sum / batches as f64,
            penalty: pen_sum / batches as f64,
        });
    }
    Ok(history)
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate_accuracy(network: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return contract_err("accuracy of an empty dataset");
    }
    const CHUNK: usize = 128;
    let mut correct = 0usize;
    let n = data.len();
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let images = data.images.slice_outer(start, end)?;
        let logits = network.forward(&images)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&data.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Mean cross-entropy over a dataset, without recording gradients.
pub fn evaluate_loss(network: &Network, data: &Dataset) -> Result<f64> {
    let logits = network.forward(&data.images)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let loss = tape.softmax_cross_entropy(l, &data.labels)?;
    Ok(tape.value(loss).data()[0])
}

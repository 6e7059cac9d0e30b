use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::unet::{unet_backward, UNetModel};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{ClassMap, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch, measured before each batch update.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD with heavy-ball momentum (`v ← μv + g`, `w ← w − ηv`).
///
/// The shuffle order of epoch `e` comes from stream `(seed, e)`. Per-sample
/// gradients may be computed in parallel but are summed in batch order, so
/// the result does not depend on the thread count.
pub fn train(
    model: &mut UNetModel,
    dataset: &[(Tensor, ClassMap)],
    options: &TrainOptions,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    if !(options.learning_rate >= 0.0) || !options.learning_rate.is_finite() {
        return Err(Error::config(format!(
            "learning rate must be non-negative, got {}",
            options.learning_rate
        )));
    }
    if options.batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }

    let mut velocity: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut epoch_losses = Vec::with_capacity(options.epochs);

    for epoch in 0..options.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(options.seed, &[epoch as u64]));
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(options.batch_size) {
            let shared: &UNetModel = model;
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| unet_backward(shared, &dataset[i].0, &dataset[i].1))
                .collect::<Result<_>>()?;
            let scale = 1.0 / batch.len() as f32;
            let mut summed: Vec<Vec<f32>> = velocity.iter().map(|v| vec![0.0; v.len()]).collect();
            for g in &results {
                epoch_loss += g.loss;
                for (acc, t) in summed.iter_mut().zip(&g.params) {
                    for (a, &v) in acc.iter_mut().zip(t.data()) {
                        *a += v;
                    }
                }
            }
            if !epoch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("loss became {epoch_loss}"),
                });
            }
            for ((param, vel), grad) in model.params_mut().into_iter().zip(&mut velocity).zip(&summed) {
                for ((w, v), &g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = options.momentum * *v + g * scale;
                    *w -= options.learning_rate * *v;
                }
            }
        }
        epoch_losses.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainReport { epoch_losses })
}

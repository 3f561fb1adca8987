//! Float baseline training with Adam and per-epoch learning-rate decay.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{backward, forward_float, Model};
use crate::optim::{AdamConfig, AdamState};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Learning rate is multiplied by this after every epoch.
    pub lr_decay: f64,
    /// L2 penalty added to weight gradients (biases are not decayed).
    pub weight_decay: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 64,
            base_lr: 1e-3,
            lr_decay: 0.5,
            weight_decay: 5e-4,
            adam: AdamConfig::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.base_lr * libm::pow(self.lr_decay, epoch as f64)
    }

    /// Rate used in the last epoch (the base rate when there are none).
    pub fn final_lr(&self) -> f64 {
        self.lr_at_epoch(self.epochs.saturating_sub(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochSummary>,
    pub final_lr: f64,
}

/// Shuffled order for `epoch`; fixed by the seed.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Adds `decay * w` to every weight gradient.
pub(crate) fn add_weight_decay(grads: &mut crate::net::ParamSet, params: &crate::net::ParamSet, decay: f64) {
    if decay == 0.0 {
        return;
    }
    let decay = decay as f32;
    for (g, p) in grads.layers_mut().iter_mut().zip(params.layers()) {
        if let (Some(g), Some(p)) = (g, p) {
            for (gi, wi) in g.weight.data_mut().iter_mut().zip(p.weight.data()) {
                *gi += decay * wi;
            }
        }
    }
}

/// Trains `model` in place. `progress` sees each finished epoch.
pub fn train_float(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainReport> {
    cfg.adam.validate()?;
    if cfg.batch_size == 0 || cfg.base_lr.is_nan() || cfg.base_lr < 0.0 {
        return Err(Error::InvalidConfig("batch size must be positive and lr non-negative".into()));
    }
    if data.sample_shape() != model.input_shape() {
        return Err(Error::ShapeMismatch("dataset samples do not match the model input".into()));
    }
    let mut adam = AdamState::new(model.params());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (iteration, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = data.gather(idx)?;
            let (_, record) = forward_float(model, &images)?;
            let mut grads = backward(model, &record, &labels)?;
            if !grads.loss.is_finite() {
                return Err(Error::InvalidConfig(alloc::format!(
                    "loss became {} in epoch {epoch}, batch {iteration}",
                    grads.loss
                )));
            }
            loss_sum += grads.loss as f64;
            batches += 1;
            add_weight_decay(&mut grads.params, model.params(), cfg.weight_decay);
            adam.update(model.params_mut(), &grads.params, lr, &cfg.adam)?;
        }
        let summary = EpochSummary {
            epoch,
            lr,
            mean_loss: loss_sum / batches.max(1) as f64,
        };
        progress(&summary);
        epochs.push(summary);
    }
    Ok(TrainReport {
        epochs,
        final_lr: cfg.final_lr(),
    })
}

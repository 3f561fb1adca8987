//! Shadow-weight fine-tuning of a fixed-point network.
//!
//! Every iteration samples discrete weights `w'` from the full-precision
//! shadow weights `w` by stochastic rounding, runs a forward and backward pass
//! with `w'` and float layer outputs, and applies the Adam step to `w`.
//! Periodic validation uses the fixed-point path: round-nearest weights from
//! the current `w` and quantized layer outputs.

use alloc::boxed::Box;
use alloc::vec::Vec;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::Evaluator;
use crate::fxp::RoundingRng;
use crate::net::{backward, forward_float, Model, ParamSet, QuantizedNet};
use crate::optim::{AdamConfig, AdamState};
use crate::stats::QuantScheme;
use crate::train::epoch_order;

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Validate after every this many iterations (and at the start and end).
    pub validate_every: usize,
}

impl FinetuneConfig {
    /// Defaults with the learning rate one decade below the baseline's final rate.
    pub fn from_baseline_lr(final_lr: f64) -> Self {
        Self {
            learning_rate: final_lr / 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(alloc::format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::InvalidConfig("batch size and validation cadence must be positive".into()));
        }
        Ok(())
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            iterations: 2000,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 1,
            validate_every: 100,
        }
    }
}

/// Full-precision weights and their Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowState {
    pub weights: ParamSet,
    pub adam: AdamState,
}

impl ShadowState {
    pub fn new(weights: ParamSet) -> Self {
        let adam = AdamState::new(&weights);
        Self { weights, adam }
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }
}

/// Random stream id for the weights of layer `layer` at `iteration`.
fn stream_id(iteration: usize, layer: usize) -> u64 {
    ((iteration as u64) << 16) | layer as u64
}

/// Samples `w'` from the shadow weights with stochastic rounding in each
/// layer's weight format. Biases and layers whose part is left in float are
/// copied unchanged.
pub fn sample_discrete_weights(
    state: &ShadowState,
    model: &Model,
    scheme: &QuantScheme,
    seed: u64,
    iteration: usize,
) -> Result<ParamSet> {
    scheme.validate(model)?;
    if !state.weights.same_shapes(model.params()) {
        return Err(Error::ShapeMismatch("shadow weights do not fit the model".into()));
    }
    let mut sampled = state.weights.clone();
    for (idx, layer) in model.quantizable_layers() {
        if let Some(fmt) = scheme.weight_format(layer)? {
            let mut rng = RoundingRng::new(seed, stream_id(iteration, idx));
            let p = sampled.layer_mut(idx).unwrap();
            fmt.quantizer().stochastic_slice(p.weight.data_mut(), &mut rng);
        }
    }
    Ok(sampled)
}

/// Adam step applied to the shadow weights.
pub fn adam_update(state: &mut ShadowState, grads: &ParamSet, cfg: &FinetuneConfig) -> Result<()> {
    state
        .adam
        .update(&mut state.weights, grads, cfg.learning_rate, &cfg.adam)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// Mean float-output training loss since the previous entry.
    pub train_loss: Option<f32>,
    /// Top-1 accuracy with fixed-point weights and outputs.
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
    /// Training forward passes run with float layer outputs.
    pub float_output_steps: usize,
    /// Validations run through the fixed-point forward path.
    pub fixed_point_validations: usize,
}

impl History {
    pub fn initial_accuracy(&self) -> Option<f64> {
        self.entries.first().map(|e| e.val_accuracy)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.entries.last().map(|e| e.val_accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// The model with round-nearest quantized final weights (biases in the
    /// output format).
    pub model: Model,
    pub shadow: ShadowState,
    pub history: History,
}

fn quantized_model(model: &Model, weights: &ParamSet, scheme: &QuantScheme) -> Result<Model> {
    let candidate = model.clone().with_params(weights.clone())?;
    let params = QuantizedNet::new(&candidate, scheme)?.params().clone();
    candidate.with_params(params)
}

/// Fine-tunes `model` under `scheme`. `progress` sees each history entry as
/// it is recorded.
pub fn finetune(
    model: &Model,
    scheme: &QuantScheme,
    train: &Dataset,
    validator: &mut dyn Evaluator,
    cfg: &FinetuneConfig,
    progress: &mut dyn FnMut(&HistoryEntry),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    scheme.validate(model)?;
    if train.sample_shape() != model.input_shape() {
        return Err(Error::ShapeMismatch("training samples do not match the model input".into()));
    }
    let mut state = ShadowState::new(model.params().clone());
    let mut working = model.clone();
    let mut history = History::default();

    let mut validate = |state: &ShadowState, history: &mut History, iteration, train_loss| -> Result<()> {
        let q = quantized_model(model, &state.weights, scheme)?;
        let val_accuracy = validator.accuracy(&q, Some(scheme))?;
        history.fixed_point_validations += 1;
        let entry = HistoryEntry {
            iteration,
            train_loss,
            val_accuracy,
        };
        progress(&entry);
        history.entries.push(entry);
        Ok(())
    };
    validate(&state, &mut history, 0, None)?;

    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut order = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0f64, 0usize);
    for iteration in 0..cfg.iterations {
        let epoch = iteration / per_epoch;
        let slot = iteration % per_epoch;
        if slot == 0 {
            order = epoch_order(train.len(), cfg.seed, epoch);
        }
        let idx = &order[slot * cfg.batch_size..((slot + 1) * cfg.batch_size).min(order.len())];
        let (images, labels) = train.gather(idx)?;

        let sampled = sample_discrete_weights(&state, model, scheme, cfg.seed, iteration)?;
        working.set_params(sampled)?;
        let (_, record) = forward_float(&working, &images)?;
        history.float_output_steps += 1;
        let grads = backward(&working, &record, &labels)?;
        if !grads.loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                loss: grads.loss,
                state: Box::new(state),
            });
        }
        loss_sum += grads.loss as f64;
        loss_count += 1;
        adam_update(&mut state, &grads.params, cfg)?;

        let done = iteration + 1;
        if done % cfg.validate_every == 0 || done == cfg.iterations {
            let mean = (loss_sum / loss_count as f64) as f32;
            validate(&state, &mut history, done, Some(mean))?;
            loss_sum = 0.0;
            loss_count = 0;
        }
    }

    let final_model = quantized_model(model, &state.weights, scheme)?;
    Ok(FinetuneOutcome {
        model: final_model,
        shadow: state,
        history,
    })
}

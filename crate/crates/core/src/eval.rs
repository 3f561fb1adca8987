//! Top-1 accuracy of float and fixed-point models.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{forward_float_logits, Model, QuantizedNet};
use crate::stats::QuantScheme;
use crate::tensor::Tensor;

pub const DEFAULT_EVAL_BATCH: usize = 250;

/// Something that can report top-1 accuracy (in percent) of a model, either
/// in float (`scheme = None`) or under a fixed-point scheme.
///
/// The serial [`DatasetEvaluator`] lives here; the `fxpnet` crate adds a
/// thread-parallel one with identical results.
pub trait Evaluator {
    fn accuracy(&mut self, model: &Model, scheme: Option<&QuantScheme>) -> Result<f64>;
}

/// Number of rows of `logits` whose argmax equals the label. Ties go to the
/// lowest class index.
pub fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count()
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Correct predictions over `[start, end)` of `dataset`.
pub fn correct_in_range(
    model: &Model,
    net: Option<&QuantizedNet<'_>>,
    dataset: &Dataset,
    start: usize,
    end: usize,
) -> Result<usize> {
    let (images, labels) = dataset.batch(start, end)?;
    let logits = match net {
        Some(q) => q.forward(&images)?,
        None => forward_float_logits(model, &images)?,
    };
    Ok(count_correct(&logits, labels))
}

/// Top-1 accuracy in percent over the whole dataset, single-threaded.
pub fn evaluate_accuracy(
    model: &Model,
    scheme: Option<&QuantScheme>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let net = scheme.map(|s| QuantizedNet::new(model, s)).transpose()?;
    let size = batch_size.max(1);
    let mut correct = 0;
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + size).min(dataset.len());
        correct += correct_in_range(model, net.as_ref(), dataset, start, end)?;
        start = end;
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct DatasetEvaluator<'a> {
    pub dataset: &'a Dataset,
    pub batch_size: usize,
}

impl<'a> DatasetEvaluator<'a> {
    pub fn new(dataset: &'a Dataset) -> Self {
        Self {
            dataset,
            batch_size: DEFAULT_EVAL_BATCH,
        }
    }
}

impl Evaluator for DatasetEvaluator<'_> {
    fn accuracy(&mut self, model: &Model, scheme: Option<&QuantScheme>) -> Result<f64> {
        evaluate_accuracy(model, scheme, self.dataset, self.batch_size)
    }
}

//! Batch-parallel accuracy evaluation.

use std::sync::Arc;

use fxpnet_core::data::Dataset;
use fxpnet_core::eval::{correct_in_range, Evaluator, DEFAULT_EVAL_BATCH};
use fxpnet_core::net::QuantizedNet;
use fxpnet_core::{Model, QuantScheme};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Evaluates batches on a rayon pool. Per-batch correct counts are integers,
/// so the result does not depend on the thread count.
#[derive(Clone)]
pub struct ParallelEvaluator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    pool: Arc<rayon::ThreadPool>,
}

impl<'a> ParallelEvaluator<'a> {
    /// `threads == 0` uses all available cores.
    pub fn new(dataset: &'a Dataset, threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {threads} threads: {e}")))?;
        Ok(Self {
            dataset,
            batch_size: DEFAULT_EVAL_BATCH,
            pool: Arc::new(pool),
        })
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn dataset(&self) -> &Dataset {
        self.dataset
    }
}

impl Evaluator for ParallelEvaluator<'_> {
    fn accuracy(&mut self, model: &Model, scheme: Option<&QuantScheme>) -> fxpnet_core::Result<f64> {
        let n = self.dataset.len();
        if n == 0 {
            return Err(fxpnet_core::Error::Empty("dataset"));
        }
        let net = scheme.map(|s| QuantizedNet::new(model, s)).transpose()?;
        let starts: Vec<usize> = (0..n).step_by(self.batch_size).collect();
        let size = self.batch_size;
        let data = self.dataset;
        let correct = self.pool.install(|| {
            starts
                .par_iter()
                .map(|&s| correct_in_range(model, net.as_ref(), data, s, (s + size).min(n)))
                .try_reduce(|| 0, |a, b| Ok(a + b))
        })?;
        Ok(100.0 * correct as f64 / n as f64)
    }
}

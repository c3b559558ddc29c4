//! Mini-batch training, evaluation and single-image prediction.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Fraction, ImageSet};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::graph::{self, Graph};
use crate::metrics::{self, MetricsReport};
use crate::model::{build_adnet, FilterScale, ModelConfig};
use crate::ops::Mode;
use crate::optim::{adam_step, softmax_cross_entropy, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::{DType, Scalar, Tensor};
use crate::weights;

/// Salt separating the dropout stream from the initialization stream.
const DROPOUT_SALT: u64 = 0xD20F_0A75_5EED_0001;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub filter_scale: FilterScale,
    pub precision: DType,
    /// Single-threaded kernels.
    pub deterministic: bool,
    /// Also report the test split after every epoch.
    pub eval_each_epoch: bool,
    /// Stratified share of the training split held out for validation.
    pub val_fraction: Option<Fraction>,
    /// Write Adam moments and step count with the final weights.
    pub checkpoint: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            filter_scale: FilterScale::ONE,
            precision: DType::F32,
            deterministic: false,
            eval_each_epoch: false,
            val_fraction: None,
            checkpoint: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }

    pub fn exec(&self) -> Exec {
        Exec::from_deterministic(self.deterministic)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::scaled(self.filter_scale)
    }
}

/// Model, parameters and optimizer state for one run.
#[derive(Debug)]
pub struct Trainer<T: Scalar> {
    pub model: ModelConfig,
    pub graph: Graph,
    pub params: ParamStore<T>,
    pub adam: AdamConfig,
    pub class_names: Vec<String>,
    batch_size: usize,
    seed: u64,
    exec: Exec,
    dropout_rng: ChaCha8Rng,
    epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ModelConfig, run: &RunConfig, class_names: Vec<String>) -> Result<Self> {
        run.validate()?;
        if class_names.len() != model.num_classes {
            return Err(Error::Config(format!(
                "{} class names for a {}-way model",
                class_names.len(),
                model.num_classes
            )));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(run.seed);
        let (graph, params) = build_adnet(&model, &mut init_rng)?;
        Ok(Trainer {
            model,
            graph,
            params,
            adam: AdamConfig::with_learning_rate(run.learning_rate),
            class_names,
            batch_size: run.batch_size,
            seed: run.seed,
            exec: run.exec(),
            dropout_rng: ChaCha8Rng::seed_from_u64(run.seed ^ DROPOUT_SALT),
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over `set` in the epoch's shuffled order. The returned report
    /// is built from the train-mode outputs seen during the pass.
    pub fn run_epoch(&mut self, set: &ImageSet) -> Result<MetricsReport> {
        if set.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let k = self.model.num_classes;
        let mut probs: Vec<T> = Vec::with_capacity(set.len() * k);
        let mut labels = Vec::with_capacity(set.len());
        let mut loss_sum = 0.0;
        for (b, batch) in set.batches::<T>(self.batch_size, self.epoch as u64, self.seed)?.enumerate() {
            let batch = batch?;
            let (_, tape) = graph::forward(
                &self.graph,
                &self.params,
                &batch.images,
                Mode::Train,
                &mut self.dropout_rng,
                self.exec,
            )
            .map_err(|e| self.locate(e, b))?;
            let logits = tape.value(self.graph.logits_id()).expect("train tape keeps values");
            let loss = softmax_cross_entropy(logits, &batch.labels)?;
            if !loss.mean_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {} batch {b}",
                    self.epoch + 1
                )));
            }
            let grads = graph::backward_from(
                &self.graph,
                &self.params,
                &tape,
                self.graph.logits_id(),
                &loss.grad_logits,
                self.exec,
            )?;
            adam_step(&mut self.params, &grads, &mut self.adam)?;
            graph::update_running_stats(&self.graph, &mut self.params, &tape)?;
            loss_sum += loss.mean_loss * batch.labels.len() as f64;
            probs.extend_from_slice(loss.probabilities.data());
            labels.extend_from_slice(&batch.labels);
        }
        self.epoch += 1;
        let probs = Tensor::from_vec(vec![labels.len(), k], probs)?;
        MetricsReport::new(&probs, &labels, loss_sum / labels.len() as f64, &self.class_names)
    }

    fn locate(&self, e: Error, batch: usize) -> Error {
        match e {
            Error::Numeric(m) => Error::Numeric(format!("epoch {} batch {batch}: {m}", self.epoch + 1)),
            other => other,
        }
    }

    /// Infer-mode metrics over `set`.
    pub fn evaluate(&self, set: &ImageSet) -> Result<MetricsReport> {
        Ok(evaluate(&self.graph, &self.params, set, self.batch_size, &self.class_names, self.exec)?.0)
    }

    /// Weights bytes for the current parameters.
    pub fn encode_weights(&self, checkpoint: bool) -> Result<Vec<u8>> {
        weights::encode(&self.params, &self.model.fingerprint(), checkpoint.then_some(self.adam.t))
    }

    pub fn save_weights(&self, path: &Path, checkpoint: bool) -> Result<()> {
        std::fs::write(path, self.encode_weights(checkpoint)?).map_err(|e| Error::io(path, e))
    }
}

/// Infer-mode forward over a whole set in manifest order. Returns the report
/// and the `[n, k]` probabilities.
pub fn evaluate<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    set: &ImageSet,
    batch_size: usize,
    class_names: &[String],
    exec: Exec,
) -> Result<(MetricsReport, Tensor<T>)> {
    if set.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let order: Vec<usize> = (0..set.len()).collect();
    let k = class_names.len();
    let mut probs = Vec::with_capacity(set.len() * k);
    let mut loss_sum = 0.0;
    // Infer mode draws nothing from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = set.batch::<T>(chunk)?;
        let (_, tape) = graph::forward(graph, params, &batch.images, Mode::Infer, &mut rng, exec)?;
        let out = tape.value(graph.output_id()).expect("output is kept");
        let logits_free = out.clone();
        // Loss from the stored probabilities: -ln max(p, floor).
        for (row, &label) in logits_free.data().chunks(k).zip(&batch.labels) {
            loss_sum -= row[label].to_f64().max(crate::optim::PROB_FLOOR).ln();
        }
        probs.extend_from_slice(logits_free.data());
    }
    let probs = Tensor::from_vec(vec![set.len(), k], probs)?;
    let report = MetricsReport::new(&probs, &set.labels, loss_sum / set.len() as f64, class_names)?;
    Ok((report, probs))
}

/// Class probabilities for one `[3, h, w]` image.
pub fn predict<T: Scalar>(graph: &Graph, params: &ParamStore<T>, image: &Tensor<T>, exec: Exec) -> Result<Vec<f64>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let x = image.reshape(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (out, _) = graph::forward(graph, params, &x, Mode::Infer, &mut rng, exec)?;
    Ok(out.to_f64_vec())
}

/// Sets used by [`train`].
pub struct TrainData<'a> {
    pub train: &'a ImageSet,
    pub val: Option<&'a ImageSet>,
    pub test: Option<&'a ImageSet>,
    pub class_names: Vec<String>,
}

/// Full training run: appends metrics rows to `metrics_path` after every
/// epoch and writes the final weights to `weights_path`. `progress` sees
/// each epoch's rows.
pub fn train<T: Scalar>(
    run: &RunConfig,
    data: &TrainData<'_>,
    weights_path: &Path,
    metrics_path: &Path,
    mut progress: impl FnMut(usize, &[(String, MetricsReport)]),
) -> Result<Trainer<T>> {
    run.validate()?;
    let mut trainer = Trainer::<T>::new(run.model_config(), run, data.class_names.clone())?;
    let file = File::create(metrics_path).map_err(|e| Error::io(metrics_path, e))?;
    let mut csv = BufWriter::new(file);
    let write_err = |e| Error::io(metrics_path, e);
    writeln!(csv, "{}", metrics::metrics_header(&data.class_names)).map_err(write_err)?;
    for epoch in 1..=run.epochs {
        let mut rows = vec![("train".to_string(), trainer.run_epoch(data.train)?)];
        if let Some(val) = data.val {
            rows.push(("val".to_string(), trainer.evaluate(val)?));
        }
        if let (true, Some(test)) = (run.eval_each_epoch, data.test) {
            rows.push(("test".to_string(), trainer.evaluate(test)?));
        }
        for (split, r) in &rows {
            writeln!(csv, "{}", metrics::metrics_row(epoch, split, r)).map_err(write_err)?;
        }
        csv.flush().map_err(write_err)?;
        progress(epoch, &rows);
    }
    trainer.save_weights(weights_path, run.checkpoint)?;
    Ok(trainer)
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::engine::{Mode, Model, ParamSet};
use super::spec::NetworkSpec;
use super::weights::NetworkWeights;
use super::Scalar;
use crate::error::{Error, Result};

/// Mini-batch SGD settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Applied to every Dropout layer of the spec during training.
    pub dropout_rate: f64,
    pub seed: u64,
    /// Arithmetic precision of the forward and backward passes.
    pub precision: Precision,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!("precision: expected f32 or f64, got '{other}'"))),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            dropout_rate: 0.5,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs: must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size: must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate: must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum: must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate: must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Labeled samples, materialized on demand so large patch sets need not sit in memory.
pub trait Dataset {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Class of sample `i`, 0 or 1.
    fn label(&self, i: usize) -> usize;

    /// Writes sample `i` into `out`, which has the network's input length.
    fn fill(&self, i: usize, out: &mut [f64]) -> Result<()>;
}

/// Samples held contiguously in memory.
#[derive(Clone, Debug)]
pub struct InMemoryDataset {
    sample_len: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl InMemoryDataset {
    pub fn new(sample_len: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if sample_len == 0 || inputs.len() != sample_len * labels.len() {
            return Err(Error::Shape(format!(
                "{} input values do not form {} samples of length {sample_len}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(InMemoryDataset {
            sample_len,
            inputs,
            labels,
        })
    }
}

impl Dataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    fn fill(&self, i: usize, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.inputs[i * self.sample_len..(i + 1) * self.sample_len]);
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: NetworkWeights,
    /// Mean training loss of each epoch, in order.
    pub epoch_losses: Vec<f64>,
}

pub fn train(spec: &NetworkSpec, data: &dyn Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(spec, data, cfg, |_, _| {})
}

/// RNG stream ids derived from the training seed.
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// Trains from He-initialized weights; `progress(epoch, mean_loss)` runs after each epoch.
///
/// Results depend only on `(spec, data order, cfg)`.
pub fn train_with_progress(
    spec: &NetworkSpec,
    data: &dyn Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::config("dataset is empty"));
    }
    let positives = (0..n).filter(|&i| data.label(i) == 1).count();
    if positives == 0 || positives == n {
        return Err(Error::config("dataset must contain both classes"));
    }
    if let Some(bad) = (0..n).map(|i| data.label(i)).find(|&l| l > 1) {
        return Err(Error::config(format!("class label {bad} is not 0 or 1")));
    }

    match cfg.precision {
        Precision::F64 => run::<f64>(spec, data, cfg, &mut progress),
        Precision::F32 => run::<f32>(spec, data, cfg, &mut progress),
    }
}

fn run<T: Scalar>(
    spec: &NetworkSpec,
    data: &dyn Dataset,
    cfg: &TrainConfig,
    progress: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    let n = data.len();
    let train_spec = spec.with_dropout_rate(cfg.dropout_rate);
    let init = NetworkWeights::he_init(spec, cfg.seed)?;
    let mut model = Model::<T>::new(&train_spec, &init)?;
    let mut velocity: Vec<ParamSet<T>> = model.params.iter().map(ParamSet::zeros_like).collect();
    let (lr, momentum) = (T::from_f64(cfg.learning_rate), T::from_f64(cfg.momentum));

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);

    let sample_len = spec.input_len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut staged = vec![0.0; sample_len];
    let mut input = vec![T::zero(); cfg.batch_size * sample_len];
    let mut labels = Vec::with_capacity(cfg.batch_size);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            labels.clear();
            for (k, &i) in chunk.iter().enumerate() {
                data.fill(i, &mut staged)?;
                for (dst, &src) in input[k * sample_len..(k + 1) * sample_len].iter_mut().zip(&staged) {
                    *dst = T::from_f64(src);
                }
                labels.push(data.label(i));
            }
            let trace = model.forward_trace(&input[..b * sample_len], Mode::Train, Some(&mut dropout_rng))?;
            let (loss, grads) = model.backward(&trace, &labels)?;
            total += loss * b as f64;
            for ((p, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grads) {
                sgd_step(&mut p.weight, &mut v.weight, &g.weight, lr, momentum);
                sgd_step(&mut p.bias, &mut v.bias, &g.bias, lr, momentum);
            }
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric {
                layer: spec.layers.len() - 1,
            });
        }
        epoch_losses.push(mean);
        progress(epoch, mean);
    }

    let mut weights = model.weights(cfg.seed);
    weights.spec_hash = spec.hash();
    Ok(TrainOutcome { weights, epoch_losses })
}

fn sgd_step<T: Scalar>(param: &mut [T], velocity: &mut [T], grad: &[T], lr: T, momentum: T) {
    for ((w, v), &g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
}

//! Local SGD, federated averaging and evaluation for the desk-scale models.
//!
//! Models are dense softmax classifiers: multinomial logistic regression or a
//! tanh MLP. Parameters are stored flat, layer by layer, each layer as a
//! row-major `out × in` weight matrix followed by its `out` biases.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SimError};
use crate::rng::{keyed_rng, Stream};

/// FL global parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub batch_size: usize,
    pub local_epochs: usize,
    pub participants: usize,
    pub max_rounds: usize,
    /// Percent.
    pub target_accuracy: f64,
}

impl GlobalParams {
    pub const S1: GlobalParams = GlobalParams::preset(32, 10, 20);
    pub const S2: GlobalParams = GlobalParams::preset(32, 5, 20);
    pub const S3: GlobalParams = GlobalParams::preset(16, 5, 20);
    pub const S4: GlobalParams = GlobalParams::preset(16, 5, 10);

    const fn preset(batch_size: usize, local_epochs: usize, participants: usize) -> Self {
        GlobalParams {
            batch_size,
            local_epochs,
            participants,
            max_rounds: 300,
            target_accuracy: 90.0,
        }
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "S1" => Some(Self::S1),
            "S2" => Some(Self::S2),
            "S3" => Some(Self::S3),
            "S4" => Some(Self::S4),
            _ => None,
        }
    }

    pub fn validate(&self, fleet_size: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(SimError::config("global.batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(SimError::config("global.local_epochs", "must be at least 1"));
        }
        if self.participants == 0 || self.participants > fleet_size {
            return Err(SimError::config(
                "global.participants",
                format!("must be between 1 and the fleet size {fleet_size}"),
            ));
        }
        if !(0.0..=100.0).contains(&self.target_accuracy) {
            return Err(SimError::config("global.target_accuracy", "must be a percentage"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainableArch {
    Logistic,
    Mlp { hidden: Vec<usize> },
}

impl TrainableArch {
    pub fn hidden(&self) -> &[usize] {
        match self {
            TrainableArch::Logistic => &[],
            TrainableArch::Mlp { hidden } => hidden,
        }
    }
}

/// Layer-count descriptors used for state encoding plus the trainable surrogate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    pub conv_layers: usize,
    pub fc_layers: usize,
    pub rc_layers: usize,
    /// Training FLOPs per sample per epoch.
    pub flops_per_sample: f64,
    pub parameter_count: usize,
    pub arch: TrainableArch,
    pub learning_rate: f64,
}

/// Named workload descriptors.
pub const WORKLOAD_NAMES: [&str; 3] = ["cnn-mnist", "lstm-shakespeare", "mobilenet-imagenet"];

impl WorkloadSpec {
    /// Builds a named workload whose surrogate fits `input_dim` features and `num_classes` classes.
    pub fn preset(name: &str, input_dim: usize, num_classes: usize) -> Option<Self> {
        let (conv, fc, rc, flops, arch) = match name {
            "cnn-mnist" => (2, 2, 0, 1.2e8, TrainableArch::Logistic),
            "lstm-shakespeare" => (0, 1, 2, 2.0e8, TrainableArch::Logistic),
            "mobilenet-imagenet" => (28, 1, 0, 1.7e9, TrainableArch::Mlp { hidden: vec![32] }),
            _ => return None,
        };
        let shape = ModelShape::new(input_dim, num_classes, &arch);
        Some(WorkloadSpec {
            name: name.to_string(),
            conv_layers: conv,
            fc_layers: fc,
            rc_layers: rc,
            flops_per_sample: flops,
            parameter_count: shape.parameter_count(),
            arch,
            learning_rate: 0.05,
        })
    }

    /// Recurrent workloads are carried as descriptors only.
    pub fn is_trainable(&self) -> bool {
        self.rc_layers == 0
    }
}

/// Layer widths of a dense classifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub widths: Vec<usize>,
}

impl ModelShape {
    pub fn new(input_dim: usize, num_classes: usize, arch: &TrainableArch) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(arch.hidden());
        widths.push(num_classes);
        ModelShape { widths }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().expect("at least two layers")
    }

    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (offset, in, out)
        self.widths.windows(2).scan(0, |offset, w| {
            let start = *offset;
            *offset += w[1] * (w[0] + 1);
            Some((start, w[0], w[1]))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub parameters: Vec<f64>,
    pub shape: ModelShape,
    /// Aggregation rounds applied so far.
    pub version: u64,
}

impl ModelState {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = keyed_rng(seed, Stream::ModelInit, 0, 0);
        let mut parameters = vec![0.0; shape.parameter_count()];
        for (offset, fan_in, out) in shape.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut parameters[offset..offset + fan_in * out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        ModelState {
            parameters,
            shape,
            version: 0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let expected = self.shape.parameter_count();
        if self.parameters.len() != expected {
            return Err(SimError::DimensionMismatch {
                expected,
                actual: self.parameters.len(),
            });
        }
        if self.parameters.iter().any(|p| !p.is_finite()) {
            return Err(SimError::precondition("model parameters must be finite"));
        }
        Ok(())
    }

    /// Writes a little-endian `u64` length followed by the parameters as `f64`.
    pub fn write_checkpoint(&self, mut out: impl Write) -> Result<()> {
        out.write_all(&(self.parameters.len() as u64).to_le_bytes())?;
        for p in &self.parameters {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut input: impl Read, shape: ModelShape) -> Result<Self> {
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len != shape.parameter_count() {
            return Err(SimError::DimensionMismatch {
                expected: shape.parameter_count(),
                actual: len,
            });
        }
        let mut parameters = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            input.read_exact(&mut buf)?;
            parameters.push(f64::from_le_bytes(buf));
        }
        Ok(ModelState {
            parameters,
            shape,
            version: 0,
        })
    }
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    activations: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(shape: &ModelShape) -> Self {
        Workspace {
            activations: shape.widths.iter().map(|&w| vec![0.0; w]).collect(),
            deltas: shape.widths.iter().map(|&w| vec![0.0; w]).collect(),
        }
    }
}

/// Fills `ws.activations`; the last layer holds softmax probabilities.
fn forward(shape: &ModelShape, params: &[f64], x: &[f64], ws: &mut Workspace) {
    ws.activations[0].copy_from_slice(x);
    let n_layers = shape.widths.len() - 1;
    for (l, (offset, fan_in, out)) in shape.layers().enumerate() {
        let (before, after) = ws.activations.split_at_mut(l + 1);
        let input = &before[l];
        let output = &mut after[0];
        let weights = &params[offset..offset + fan_in * out];
        let biases = &params[offset + fan_in * out..offset + fan_in * out + out];
        for j in 0..out {
            let row = &weights[j * fan_in..(j + 1) * fan_in];
            let z = biases[j] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>();
            output[j] = if l + 1 < n_layers { z.tanh() } else { z };
        }
    }
    let logits = ws.activations.last_mut().expect("output layer");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Adds the cross-entropy gradient of one sample to `grad`; returns its loss.
fn accumulate_gradient(shape: &ModelShape, params: &[f64], x: &[f64], label: usize, ws: &mut Workspace, grad: &mut [f64]) -> f64 {
    forward(shape, params, x, ws);
    let n = shape.widths.len();
    let probs = &ws.activations[n - 1];
    let loss = -probs[label].ln();
    for (k, d) in ws.deltas[n - 1].iter_mut().enumerate() {
        *d = probs[k] - if k == label { 1.0 } else { 0.0 };
    }
    let layers: Vec<_> = shape.layers().collect();
    for (l, &(offset, fan_in, out)) in layers.iter().enumerate().rev() {
        let (lower, upper) = ws.deltas.split_at_mut(l + 1);
        let delta = &upper[0];
        let input = &ws.activations[l];
        for j in 0..out {
            let row = &mut grad[offset + j * fan_in..offset + (j + 1) * fan_in];
            for (g, a) in row.iter_mut().zip(input) {
                *g += delta[j] * a;
            }
            grad[offset + fan_in * out + j] += delta[j];
        }
        if l > 0 {
            let weights = &params[offset..offset + fan_in * out];
            let below = &mut lower[l];
            for (i, b) in below.iter_mut().enumerate() {
                let back: f64 = (0..out).map(|j| weights[j * fan_in + i] * delta[j]).sum();
                // tanh' = 1 - a^2
                *b = back * (1.0 - input[i] * input[i]);
            }
        }
    }
    loss
}

/// Sample order for one local epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, Stream::Training, epoch as u64, 0));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate {
    pub parameters: Vec<f64>,
    pub samples_used: usize,
}

/// `epochs` passes of minibatch SGD over `shard`, reshuffled each epoch.
pub fn local_train(
    model: &ModelState,
    data: &Dataset,
    shard: &[usize],
    batch_size: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<LocalUpdate> {
    if shard.is_empty() {
        return Err(SimError::precondition("local training needs a non-empty shard"));
    }
    if batch_size == 0 || epochs == 0 {
        return Err(SimError::precondition("batch size and epochs must be at least 1"));
    }
    model.check()?;
    if data.dim() != model.shape.input_dim() {
        return Err(SimError::DimensionMismatch {
            expected: model.shape.input_dim(),
            actual: data.dim(),
        });
    }
    let shape = &model.shape;
    let mut params = model.parameters.clone();
    let mut grad = vec![0.0; params.len()];
    let mut ws = Workspace::new(shape);
    for epoch in 0..epochs {
        let order = epoch_order(seed, epoch, shard.len());
        for batch in order.chunks(batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut loss = 0.0;
            for &pos in batch {
                let i = shard[pos];
                loss += accumulate_gradient(shape, &params, data.features(i), data.label(i) as usize, &mut ws, &mut grad);
            }
            if !loss.is_finite() {
                return Err(SimError::NonFiniteLoss);
            }
            let step = learning_rate / batch.len() as f64;
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(SimError::NonFiniteLoss);
    }
    Ok(LocalUpdate {
        parameters: params,
        samples_used: shard.len(),
    })
}

/// Sample-count-weighted mean of the updates, or `None` when there are none.
pub fn fedavg_aggregate(updates: &[LocalUpdate]) -> Result<Option<Vec<f64>>> {
    let Some(first) = updates.first() else {
        return Ok(None);
    };
    let len = first.parameters.len();
    if let Some(bad) = updates.iter().find(|u| u.parameters.len() != len) {
        return Err(SimError::DimensionMismatch {
            expected: len,
            actual: bad.parameters.len(),
        });
    }
    let total: usize = updates.iter().map(|u| u.samples_used).sum();
    if total == 0 {
        return Err(SimError::precondition("aggregated updates used no samples"));
    }
    let mut out = vec![0.0; len];
    for u in updates {
        let w = u.samples_used as f64 / total as f64;
        for (o, p) in out.iter_mut().zip(&u.parameters) {
            *o += w * p;
        }
    }
    Ok(Some(out))
}

/// Class with the highest predicted probability, first index on ties.
pub fn predict(model: &ModelState, x: &[f64]) -> usize {
    let mut ws = Workspace::new(&model.shape);
    forward(&model.shape, &model.parameters, x, &mut ws);
    argmax(ws.activations.last().expect("output"))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Test accuracy in percent.
pub fn evaluate(model: &ModelState, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(SimError::precondition("test split is empty"));
    }
    model.check()?;
    if test.dim() != model.shape.input_dim() {
        return Err(SimError::DimensionMismatch {
            expected: model.shape.input_dim(),
            actual: test.dim(),
        });
    }
    let mut ws = Workspace::new(&model.shape);
    let correct = (0..test.len())
        .filter(|&i| {
            forward(&model.shape, &model.parameters, test.features(i), &mut ws);
            argmax(ws.activations.last().expect("output")) == test.label(i) as usize
        })
        .count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}

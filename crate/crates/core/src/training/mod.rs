//! Momentum SGD with per-epoch learning-rate decay, Xavier initialisation,
//! scan-level folds and the rebalanced training stream.

mod dataset;
mod folds;
mod gradcheck;

pub use dataset::{assemble_training_set, stream_len, PatchIndex, Sample, SampleStream};
pub use gradcheck::{check_gradients, random_batch, GradCheck};
pub use folds::{make_folds, FoldPlan, FoldSplit, DEFAULT_FOLDS};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{softmax_cross_entropy, Mode, Scalar};
use crate::patching::{PatchRecord, PatchTriple};
use crate::volume_io::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    Xavier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay_per_epoch: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub dropout: f64,
    /// L2 penalty on weight tensors (biases excluded).
    pub l2: f64,
    pub seed: u64,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.003,
            lr_decay_per_epoch: 0.025,
            epochs: 40,
            batch_size: 128,
            momentum: 0.9,
            dropout: 0.5,
            l2: 0.0,
            seed: 0,
            init: InitScheme::Xavier,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.base_lr > 0.0) {
            return bad(format!("base_lr must be > 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.lr_decay_per_epoch) {
            return bad(format!("lr_decay_per_epoch must lie in [0, 1), got {}", self.lr_decay_per_epoch));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.l2 < 0.0 {
            return bad("dropout must lie in [0, 1) and l2 >= 0".into());
        }
        Ok(())
    }

    /// `base_lr * (1 - lr_decay_per_epoch)^epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.base_lr * (1.0 - self.lr_decay_per_epoch).powi(epoch as i32)
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Xavier-uniform values for a weight of `shape` (`[out, in, k...]`);
/// 1-D shapes are biases and come back zero.
pub fn xavier_init<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Vec<T> {
    let n: usize = shape.iter().product();
    if shape.len() < 2 {
        return vec![T::zero(); n];
    }
    let r: usize = shape[2..].iter().product();
    let bound = xavier_bound(shape[1] * r, shape[0] * r);
    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
}

/// Momentum SGD state (`v <- mu v + g; w <- w - lr v`).
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub l2: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &Model<T>, momentum: f64, l2: f64) -> Self {
        Sgd {
            momentum,
            l2,
            velocity: model.params().iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &[Vec<T>], lr: f64) {
        let (mu, lr, l2) = (T::of(self.momentum), T::of(lr), T::of(self.l2));
        for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let decay = self.l2 > 0.0 && p.shape.len() > 1;
            for ((w, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                let gi = if decay { gi + l2 * *w } else { gi };
                *vi = mu * *vi + gi;
                *w = *w - lr * *vi;
            }
        }
    }
}

pub fn zero_grads<T: Scalar>(model: &Model<T>) -> Vec<Vec<T>> {
    model.params().iter().map(|p| vec![T::zero(); p.len()]).collect()
}

/// Mean cross-entropy over `samples` and its parameter gradient.
/// `rng` drives dropout in [`Mode::Train`].
pub fn batch_loss_and_grad<T: Scalar>(
    model: &Model<T>,
    batch: &[(PatchTriple, Label)],
    mode: Mode,
    rng: &mut ChaCha8Rng,
    grads: &mut [Vec<T>],
) -> Result<f64> {
    let scale = T::of(1.0 / batch.len() as f64);
    let mut total = 0.0;
    for (triple, label) in batch {
        let acts = model.forward_sample(triple, mode, rng)?;
        let (loss, mut g) = softmax_cross_entropy(&acts.output().data, label.class() as usize);
        total += loss.as_f64();
        g.iter_mut().for_each(|v| *v *= scale);
        model.graph().backward(model.params(), &acts, &g, grads);
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub samples_per_epoch: usize,
}

/// Trains `model` in place on `stream`. The run is deterministic for a
/// fixed `cfg.seed`.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    stream: &SampleStream,
    records: &[PatchRecord],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let labels: Vec<Label> = stream.samples.iter().map(|s| s.label).collect();
    train_with(model, &labels, |i| stream.materialize(&stream.samples[i], records), cfg)
}

/// Trains on in-memory samples.
pub fn train_samples<T: Scalar>(model: &mut Model<T>, samples: &[(PatchTriple, Label)], cfg: &TrainConfig) -> Result<TrainReport> {
    let labels: Vec<Label> = samples.iter().map(|s| s.1).collect();
    train_with(model, &labels, |i| Ok(samples[i].0.clone()), cfg)
}

/// Core loop: `fetch(i)` produces the patches of sample `i`, whose label is
/// `labels[i]`.
pub fn train_with<T: Scalar>(
    model: &mut Model<T>,
    labels: &[Label],
    mut fetch: impl FnMut(usize) -> Result<PatchTriple>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty training stream".into()));
    }
    model.set_dropout(cfg.dropout);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut sgd = Sgd::new(model, cfg.momentum, cfg.l2);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        learning_rates: Vec::with_capacity(cfg.epochs),
        samples_per_epoch: labels.len(),
    };
    let mut grads = zero_grads(model);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| Ok((fetch(i)?, labels[i])))
                .collect::<Result<Vec<_>>>()?;
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = T::zero()));
            let loss = batch_loss_and_grad(model, &batch, Mode::Train, &mut dropout_rng, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
            }
            sgd.step(model, &grads, lr);
            sum += loss * chunk.len() as f64;
            debug!("epoch {epoch} batch {b} loss {loss:.5}");
        }
        let mean = sum / labels.len() as f64;
        info!("epoch {epoch}: lr {lr:.6} mean loss {mean:.5}");
        report.epoch_losses.push(mean);
        report.learning_rates.push(lr);
    }
    Ok(report)
}

/// Mean loss of `batch` in inference mode.
pub fn evaluate_loss<T: Scalar>(model: &Model<T>, batch: &[(PatchTriple, Label)]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for (t, label) in batch {
        let acts = model.forward_sample(t, Mode::Inference, &mut rng)?;
        total += softmax_cross_entropy(&acts.output().data, label.class() as usize).0.as_f64();
    }
    Ok(total / batch.len() as f64)
}

/// Run manifest: configuration echo, seed, fold, loss trace and wall time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: crate::model::ModelConfig,
    pub train: TrainConfig,
    pub fold: Option<usize>,
    pub samples_per_epoch: usize,
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

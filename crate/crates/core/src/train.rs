//! Training and evaluation loops.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Result, TensorError};
use crate::metrics::{MetricAccumulator, Metrics};
use crate::model::{Classifier, ModelConfig};
use crate::optim::{adamw_step, one_cycle_cosine_lr, AdamWConfig, OptimizerState};
use crate::params::ParamStore;
use crate::scalar::{Precision, Real};
use crate::tape::Tape;

/// Column header of the per-epoch metrics log.
pub const LOG_HEADER: &str = "epoch,loss,top1,top5,weighted_f1,lr,images_per_second";

/// Seed offset separating the shuffle stream from parameter initialization.
const SHUFFLE_STREAM: u64 = 0x5348_5546;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Write a checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 1024,
            peak_lr: 1e-3,
            weight_decay: 0.05,
            warmup_fraction: 0.1,
            seed: 0,
            precision: Precision::Single,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Small-data recipe: 200 epochs of batch 32, otherwise the defaults.
    pub fn desk() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            ..Self::default()
        }
    }

    pub const KEYS: [&'static str; 8] = [
        "epochs",
        "batch_size",
        "lr",
        "weight_decay",
        "warmup_fraction",
        "seed",
        "precision",
        "checkpoint_every",
    ];

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.peak_lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_fraction", self.warmup_fraction.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || TensorError::Config(format!("invalid value for {key}: {value:?}"));
        let v = value.trim();
        match key {
            "epochs" => self.epochs = v.parse().map_err(|_| bad())?,
            "batch_size" => self.batch_size = v.parse().map_err(|_| bad())?,
            "lr" => self.peak_lr = v.parse().map_err(|_| bad())?,
            "weight_decay" => self.weight_decay = v.parse().map_err(|_| bad())?,
            "warmup_fraction" => self.warmup_fraction = v.parse().map_err(|_| bad())?,
            "seed" => self.seed = v.parse().map_err(|_| bad())?,
            "precision" => self.precision = Precision::parse(v).ok_or_else(bad)?,
            "checkpoint_every" => self.checkpoint_every = v.parse().map_err(|_| bad())?,
            _ => return Err(TensorError::Config(format!("unknown training key {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TensorError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub metrics: Metrics,
    pub lr: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format_metrics_line(self.epoch, &self.metrics, self.lr)
    }
}

pub fn format_metrics_line(epoch: usize, m: &Metrics, lr: f64) -> String {
    format!(
        "{epoch},{:.6},{:.6},{:.6},{:.6},{:.6e},{:.1}",
        m.loss, m.top1, m.top5, m.weighted_f1, lr, m.images_per_second
    )
}

/// Model, parameters, optimizer and shuffle state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T: Real = f32> {
    pub model: Classifier,
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Learning rate of the most recent update.
    pub last_lr: f64,
    pub rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: &ModelConfig, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = Classifier::new::<T>(model, config.seed)?;
        let optimizer = OptimizerState::new(&params, config.adamw());
        Ok(Self {
            model,
            params,
            optimizer,
            config: config.clone(),
            epoch: 0,
            last_lr: 0.0,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM),
        })
    }

    pub fn steps_per_epoch(&self, data: &Dataset) -> usize {
        data.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self, data: &Dataset) -> usize {
        self.config.epochs * self.steps_per_epoch(data)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(TensorError::EmptyDataset("train"));
        }
        if data.classes != self.model.config.classes {
            return Err(TensorError::Config(format!(
                "dataset has {} classes but the model expects {}",
                data.classes, self.model.config.classes
            )));
        }
        Ok(())
    }

    /// Forward, backward and one optimizer update; returns the batch loss.
    pub fn step(&mut self, data: &Dataset, indices: &[usize], lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(data.batch::<T>(indices)?);
        let out = self.model.forward(&mut tape, &p, x)?;
        let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
        let loss = tape.cross_entropy(out.logits, &labels)?;
        let value = tape.value(loss).data()[0].f64();
        if !value.is_finite() {
            return Err(TensorError::Diverged {
                epoch: self.epoch + 1,
                step: self.optimizer.step as usize,
                loss: value,
            });
        }
        tape.backward(loss)?;
        self.params.zero_grads();
        self.params.absorb_grads(&tape, &p)?;
        adamw_step(&mut self.params, &mut self.optimizer, lr)?;
        Ok(value)
    }

    /// One shuffled pass followed by a full evaluation on the same data.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        self.check_data(data)?;
        let total = self.total_steps(data);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let start = Instant::now();
        let mut lr = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let step = (self.optimizer.step as usize).min(total);
            lr = one_cycle_cosine_lr(step, total, self.config.peak_lr, self.config.warmup_fraction)?;
            self.step(data, batch, lr)?;
        }
        let seconds = start.elapsed().as_secs_f64();
        self.epoch += 1;
        self.last_lr = lr;
        let mut metrics = self.evaluate(data)?;
        metrics.images_per_second = data.len() as f64 / seconds.max(1e-9);
        Ok(EpochRecord {
            epoch: self.epoch,
            metrics,
            lr,
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn fit(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&Self, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut log = Vec::new();
        while self.epoch < self.config.epochs {
            let record = self.run_epoch(data)?;
            on_epoch(self, &record)?;
            log.push(record);
        }
        Ok(log)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Metrics> {
        evaluate(&self.model, &self.params, data, self.config.batch_size)
    }

    /// Current origins of every ray field, in forward order.
    pub fn origins(&self) -> Vec<Vec<[f64; 2]>> {
        self.model
            .ray_fields()
            .iter()
            .map(|f| f.origin_values(&self.params))
            .collect()
    }
}

/// Mean ‖O_k‖ over every origin of every field.
pub fn mean_origin_radius(origins: &[Vec<[f64; 2]>]) -> Option<f64> {
    let all: Vec<f64> = origins.iter().flatten().map(|o| o[0].hypot(o[1])).collect();
    (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
}

/// Loss and accuracy metrics of `params` on `data`. Per-sample results do
/// not depend on batching, so any batch size gives identical metrics.
pub fn evaluate<T: Real>(
    model: &Classifier,
    params: &ParamStore<T>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Metrics> {
    if data.is_empty() {
        return Err(TensorError::EmptyDataset("evaluate"));
    }
    let classes = model.config.classes;
    if let Some(&label) = data.labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::LabelOutOfRange {
            op: "evaluate",
            label,
            classes,
        });
    }
    let start = Instant::now();
    let mut acc = MetricAccumulator::new(classes);
    let indices: Vec<usize> = (0..data.len()).collect();
    for batch in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let x = tape.constant(data.batch::<T>(batch)?);
        let out = model.forward(&mut tape, &p, x)?;
        let logits = tape.value(out.logits).data();
        for (row, &i) in logits.chunks(classes).zip(batch) {
            let scores: Vec<f64> = row.iter().map(|v| v.f64()).collect();
            acc.add(&scores, data.labels[i]);
        }
    }
    Ok(acc.finish(start.elapsed().as_secs_f64()))
}

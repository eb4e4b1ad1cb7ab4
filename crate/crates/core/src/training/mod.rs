//! Query generation, losses and the optimization loop.

mod losses;
mod queries;

pub use losses::{evaluate_losses, record_losses, LossGraph, LossValues, LossWeights};
pub use queries::{generate_queries, Batch, BatchSampler, OffSurfaceSample, QuerySampleSet};

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Matrix, Tape};
use crate::error::{Error, Result};
use crate::field::{AttentiveField, ImplicitField};

/// Loss values above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub seed: u64,
    pub iterations: u64,
    pub schedule: LrSchedule,
    /// Off-surface rows per batch.
    pub batch_off: usize,
    /// On-surface rows per batch.
    pub batch_on: usize,
    /// Perturbation rounds over the whole cloud.
    pub rounds: usize,
    /// Noise standard deviation as a multiple of the local scale.
    pub dis_scale: f64,
    /// Neighbour rank that defines the local scale.
    pub scale_neighbors: usize,
    /// Larger clouds are randomly subsampled to this size.
    pub point_cap: usize,
    /// Patch sizes for the displacement term.
    pub scales: Vec<usize>,
    pub weights: LossWeights,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 20_000,
            schedule: LrSchedule::default(),
            batch_off: 5_000,
            batch_on: 5_000,
            rounds: 10,
            dis_scale: 0.15,
            scale_neighbors: 50,
            point_cap: 300_000,
            scales: vec![4, 8, 16, 32, 64],
            weights: LossWeights::default(),
            checkpoint_every: 1_000,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_off", self.batch_off),
            ("batch_on", self.batch_on),
            ("rounds", self.rounds),
            ("scale_neighbors", self.scale_neighbors),
            ("point_cap", self.point_cap),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::Config("scales must be a nonempty list of positive sizes".into()));
        }
        if !(self.dis_scale >= 0.0 && self.dis_scale.is_finite()) {
            return Err(Error::Config("dis_scale must be finite and nonnegative".into()));
        }
        self.schedule.validate()?;
        self.weights.validate()
    }
}

/// Linear warmup from zero followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-4,
            warmup: 10_000,
            total: 20_000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base >= 0.0 && self.base.is_finite()) {
            return Err(Error::Config("learning rate must be finite and nonnegative".into()));
        }
        if self.warmup > self.total {
            return Err(Error::Config(format!(
                "warmup ({}) exceeds schedule length ({})",
                self.warmup, self.total
            )));
        }
        Ok(())
    }

    pub fn rate(&self, iteration: u64) -> f64 {
        if iteration < self.warmup {
            return self.base * iteration as f64 / self.warmup as f64;
        }
        if iteration >= self.total {
            return 0.0;
        }
        let span = (self.total - self.warmup) as f64;
        let t = (iteration - self.warmup) as f64 / span;
        self.base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(field: &AttentiveField) -> Self {
        let zeros: Vec<Matrix> = field
            .store()
            .iter()
            .map(|p| Matrix::zeros(p.value.raw_dim()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update from `grads` (one per parameter, in store order).
    pub fn update(&mut self, field: &mut AttentiveField, grads: &[Matrix], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let store = field.store_mut();
        for (slot, g) in grads.iter().enumerate() {
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            let w = store.value_mut(slot);
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *w -= lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: LossValues,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,lr,L,L_alpha,L_beta,L_gamma,L_delta,skipped\n");
        for r in &self.rows {
            let l = &r.loss;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.iteration, r.lr, l.total, l.alpha, l.beta, l.gamma, l.delta, l.skipped
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains `field` in place.
///
/// On divergence the parameters are rolled back to the last finite step,
/// the checkpoint (if any) is rewritten from them and
/// [`Error::Diverged`]/[`Error::NonFiniteLoss`] is returned alongside the
/// log so far.
pub fn train(
    field: &mut AttentiveField,
    samples: &QuerySampleSet,
    cfg: &TrainerConfig,
    checkpoint: Option<&Path>,
    mut progress: impl FnMut(&LogRow),
) -> std::result::Result<TrainingLog, (Error, TrainingLog)> {
    let mut log = TrainingLog::default();
    if let Err(e) = cfg.validate() {
        return Err((e, log));
    }
    let mut adam = Adam::new(field);
    let mut sampler = BatchSampler::new(cfg.seed, cfg.batch_off, cfg.batch_on);
    let start = field.store().iteration;
    let mut last_good = field.store().clone();
    for iteration in start..start + cfg.iterations {
        let batch = sampler.next(samples);
        let lr = cfg.schedule.rate(iteration);
        let step = (|| {
            let tape = Tape::new();
            let params = field.bind(&tape);
            let graph = record_losses(field, &params, &tape, &batch, &cfg.weights)?;
            graph.check_finite(iteration)?;
            let values = graph.values();
            if values.total > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    iteration,
                    loss: values.total,
                });
            }
            debug_assert!(values.components().iter().all(|&c| c >= 0.0));
            let grads = tape.gradients(graph.total, &params)?;
            if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss {
                    component: "gradient",
                    iteration,
                });
            }
            Ok((values, grads))
        })();
        let (values, grads) = match step {
            Ok(v) => v,
            Err(e) => {
                *field.store_mut() = last_good;
                if let Some(path) = checkpoint {
                    if let Err(io) = field.save(path) {
                        return Err((io, log));
                    }
                }
                return Err((e, log));
            }
        };
        last_good = field.store().clone();
        adam.update(field, &grads, lr);
        field.store_mut().iteration = iteration + 1;
        let row = LogRow {
            iteration,
            lr,
            loss: values,
        };
        progress(&row);
        log.rows.push(row);
        if let Some(path) = checkpoint {
            let done = iteration + 1 - start;
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                if let Err(e) = field.save(path) {
                    return Err((e, log));
                }
            }
        }
    }
    if let Some(path) = checkpoint {
        if let Err(e) = field.save(path) {
            return Err((e, log));
        }
    }
    Ok(log)
}

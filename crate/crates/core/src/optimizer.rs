//! Adafactor with an external learning-rate schedule.
//!
//! Matrices keep factored second moments (one accumulator per row and per
//! column); vectors keep a full accumulator. There is no first moment, no
//! relative-step sizing and no parameter-scale multiplier: the caller passes
//! the learning rate for every step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            warmup_steps: 60,
            total_steps: 1000,
        }
    }
}

impl Schedule {
    /// Learning rate at `step`; zero past `total_steps`.
    pub fn lr(&self, step: usize) -> f64 {
        if step > self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak_lr * (step as f64 / self.warmup_steps as f64);
        }
        let decay_len = self.total_steps - self.warmup_steps;
        if decay_len == 0 {
            return self.peak_lr;
        }
        self.peak_lr * ((self.total_steps - step) as f64 / decay_len as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdafactorConfig {
    /// Added to squared gradients before accumulation.
    pub eps: f64,
    /// Updates are rescaled so their RMS does not exceed this.
    pub clip_threshold: f64,
    /// `β₂(t) = 1 - t^(-decay_exponent)`.
    pub decay_exponent: f64,
}

impl Default for AdafactorConfig {
    fn default() -> Self {
        Self {
            eps: 1e-30,
            clip_threshold: 1.0,
            decay_exponent: 0.8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum SecondMoment {
    Factored { row: Vec<f64>, col: Vec<f64> },
    Full(Vec<f64>),
}

#[derive(Clone, Debug, Default)]
pub struct Adafactor {
    config: AdafactorConfig,
    step: u64,
    moments: BTreeMap<String, SecondMoment>,
}

impl Adafactor {
    pub fn new(config: AdafactorConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Row/column (matrix) or full (vector) accumulators for `name`.
    pub fn accumulators(&self, name: &str) -> Option<(Vec<f64>, Option<Vec<f64>>)> {
        self.moments.get(name).map(|m| match m {
            SecondMoment::Factored { row, col } => (row.clone(), Some(col.clone())),
            SecondMoment::Full(v) => (v.clone(), None),
        })
    }

    /// Applies one update to every `(name, param, grad)` triple. Fails on a
    /// shape mismatch or a non-finite gradient before touching any parameter.
    pub fn step<'a, F: Real>(
        &mut self,
        lr: f64,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<F>, &'a Tensor<F>)>,
    ) -> Result<()> {
        let params: Vec<_> = params.into_iter().collect();
        for (name, p, g) in &params {
            if p.shape() != g.shape() {
                return Err(Error::shape("adafactor_step", p.shape(), g.shape()));
            }
            if g.data().iter().any(|x| !x.is_finite()) {
                return Err(Error::NanGradient((*name).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let beta2 = 1.0 - t.powf(-self.config.decay_exponent);
        let eps = self.config.eps;
        for (name, p, g) in params {
            let grad: Vec<f64> = g.data().iter().map(|x| x.to_f64_lossy()).collect();
            let mut update = vec![0.0; grad.len()];
            let moment = self.moments.entry(name.to_string()).or_insert_with(|| {
                if p.rank() == 2 {
                    SecondMoment::Factored {
                        row: vec![0.0; p.rows()],
                        col: vec![0.0; p.cols()],
                    }
                } else {
                    SecondMoment::Full(vec![0.0; p.len()])
                }
            });
            match moment {
                SecondMoment::Factored { row, col } => {
                    let (rows, cols) = (row.len(), col.len());
                    for (r, acc) in row.iter_mut().enumerate() {
                        let mean =
                            grad[r * cols..(r + 1) * cols].iter().map(|x| x * x + eps).sum::<f64>() / cols as f64;
                        *acc = beta2 * *acc + (1.0 - beta2) * mean;
                    }
                    for (c, acc) in col.iter_mut().enumerate() {
                        let mean = (0..rows).map(|r| grad[r * cols + c].powi(2) + eps).sum::<f64>() / rows as f64;
                        *acc = beta2 * *acc + (1.0 - beta2) * mean;
                    }
                    let row_mean = row.iter().sum::<f64>() / rows as f64;
                    for r in 0..rows {
                        let r_factor = (row[r] / row_mean).sqrt().recip();
                        for c in 0..cols {
                            update[r * cols + c] = grad[r * cols + c] * r_factor * col[c].sqrt().recip();
                        }
                    }
                }
                SecondMoment::Full(v) => {
                    for ((acc, u), &gi) in v.iter_mut().zip(update.iter_mut()).zip(&grad) {
                        *acc = beta2 * *acc + (1.0 - beta2) * (gi * gi + eps);
                        *u = gi / acc.sqrt();
                    }
                }
            }
            let rms = (update.iter().map(|u| u * u).sum::<f64>() / update.len() as f64).sqrt();
            let denom = (rms / self.config.clip_threshold).max(1.0);
            for (x, u) in p.data_mut().iter_mut().zip(&update) {
                *x -= F::lit(lr * u / denom);
            }
        }
        Ok(())
    }
}

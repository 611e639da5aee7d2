//! The fine-tuning and adapter pre-training loops.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::tasks::Example;
use super::templates::{apply_random_template, PromptTemplate};
use crate::error::{Error, Result};
use crate::ia3::IA3Adapter;
use crate::model::Model;
use crate::objectives::{batch_loss, CandidateSet, Losses};
use crate::optimizer::{Adafactor, AdafactorConfig, Schedule};
use crate::tensor::{Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Only adapter vectors are updated.
    #[default]
    Adapter,
    /// Every base weight is updated; no adapter.
    FullFinetune,
    /// One shared adapter trained on the multitask mixture.
    PretrainAdapter,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub losses: Losses,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Adapter,
            steps: 1000,
            batch_size: 8,
            peak_lr: 3e-3,
            warmup_steps: 60,
            losses: Losses::ALL,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            mode: TrainMode::PretrainAdapter,
            steps: 2000,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::config("warmup_steps", "cannot exceed steps"));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::config("peak_lr", "must be finite and nonnegative"));
        }
        if !self.losses.lm && !self.losses.ul && !self.losses.ln {
            return Err(Error::config("losses", "at least one loss term must be enabled"));
        }
        Ok(())
    }
}

/// Training examples, each paired with the templates it may be rendered with.
#[derive(Clone, Copy, Debug)]
pub struct TrainSource<'a> {
    pub examples: &'a [Example],
    pub templates: &'a [PromptTemplate],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lm: f64,
    pub ul: f64,
    pub ln: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

pub fn write_metrics_csv<W: Write>(metrics: &[StepMetrics], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

/// Cycles through shuffled passes over the pool of `(source, example)` pairs.
struct Batcher<'a> {
    pool: Vec<(&'a Example, &'a [PromptTemplate])>,
    order: Vec<usize>,
    cursor: usize,
    data_rng: ChaCha8Rng,
    template_rng: ChaCha8Rng,
}

impl<'a> Batcher<'a> {
    fn new(sources: &[TrainSource<'a>], seed: u64) -> Result<Self> {
        let pool: Vec<_> = sources
            .iter()
            .flat_map(|s| s.examples.iter().map(move |e| (e, s.templates)))
            .collect();
        if pool.is_empty() {
            return Err(Error::Contract("no training examples".into()));
        }
        let data_rng = ChaCha8Rng::seed_from_u64(seed);
        // Template choices come from their own stream so that they do not
        // shift the example order.
        let mut template_rng = ChaCha8Rng::seed_from_u64(seed);
        template_rng.set_stream(1);
        Ok(Self {
            order: Vec::new(),
            cursor: 0,
            pool,
            data_rng,
            template_rng,
        })
    }

    fn next_batch(&mut self, size: usize) -> Result<Vec<CandidateSet>> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order = (0..self.pool.len()).collect();
                self.order.shuffle(&mut self.data_rng);
                self.cursor = 0;
            }
            let (ex, templates) = self.pool[self.order[self.cursor]];
            self.cursor += 1;
            out.push(apply_random_template(templates, ex, &mut self.template_rng)?);
        }
        Ok(out)
    }
}

/// Runs `config.steps` optimizer steps. In adapter modes only `adapter` is
/// updated and the checkpoint holds its vectors; in full fine-tuning only
/// `model` is updated, the adapter is not applied, and the checkpoint holds
/// every weight. `on_step` sees each step's metrics as they are produced.
pub fn train<F: Real>(
    model: &mut Model<F>,
    adapter: &mut IA3Adapter<F>,
    sources: &[TrainSource<'_>],
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    let full = config.mode == TrainMode::FullFinetune;
    if !full && adapter.spec() != model.spec() {
        return Err(Error::Contract("adapter was built for a different model spec".into()));
    }
    let schedule = config.schedule();
    let mut batcher = Batcher::new(sources, config.seed)?;
    let mut opt = Adafactor::new(AdafactorConfig::default());
    let mut metrics = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let lr = schedule.lr(step);
        let sets = batcher.next_batch(config.batch_size)?;
        let set_refs: Vec<&CandidateSet> = sets.iter().collect();
        let tape = Tape::new();
        let bound = model.bind(&tape, full);
        let ba = if full { None } else { Some(adapter.bind(&tape, true)?) };
        let slots = vec![ba.as_ref(); sets.len()];
        let loss = batch_loss(&bound, &slots, &set_refs, config.losses)?;
        let b = loss.breakdown;
        if !b.total.is_finite() {
            return Err(Error::NanLoss(step));
        }
        let mut grads = tape.backward(loss.total)?;
        let trainable = if full {
            bound.vars()
        } else {
            ba.as_ref().expect("adapter bound").vars()
        };
        let mut named: BTreeMap<String, Tensor<F>> = BTreeMap::new();
        for (name, &var) in trainable {
            let g = match grads.take(var) {
                Some(g) => g,
                None => Tensor::zeros(var.shape().as_slice())?,
            };
            named.insert(name.clone(), g);
        }
        drop(slots);
        drop(ba);
        drop(bound);
        let params = if full {
            model.weights_mut()
        } else {
            adapter.vectors_mut()
        };
        opt.step(lr, params.iter_mut().map(|(name, p)| (name.as_str(), p, &named[name])))?;
        let m = StepMetrics {
            step,
            lm: b.lm,
            ul: b.ul,
            ln: b.ln,
            total: b.total,
            lr,
        };
        on_step(&m);
        metrics.push(m);
    }

    let checkpoint = if full {
        Checkpoint::from_tensors(model.spec().clone(), model.weights())
    } else {
        Checkpoint::from_tensors(adapter.spec().clone(), adapter.vectors())
    };
    Ok(TrainOutcome { checkpoint, metrics })
}

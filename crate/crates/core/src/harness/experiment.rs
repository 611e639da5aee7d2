//! End-to-end runs: optional adapter pre-training on the mixture, few-shot
//! fine-tuning for every sampling seed, and held-out evaluation.

use serde::{Deserialize, Serialize};

use super::heldout_dataset;
use super::tasks::{generate_task_suite, sample_few_shot, Family, SyntheticTask};
use super::templates::{templates_for, PromptTemplate};
use super::train::{train, StepMetrics, TrainConfig, TrainMode, TrainOutcome, TrainSource};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalConfig, EvalReport};
use crate::ia3::{init_adapter, IA3Adapter};
use crate::model::{build_model, Model, ModelSpec};
use crate::objectives::Losses;
use crate::tensor::Real;

/// One JSON document describing a whole run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub model_seed: u64,
    pub suite_seed: u64,
    pub task: String,
    pub shots: usize,
    /// Start fine-tuning from a mixture-pretrained adapter.
    pub pretrained_init: bool,
    pub train: TrainConfig,
    /// Missing fields fall back to the pre-training recipe, not the fine-tuning one.
    #[serde(deserialize_with = "pretrain_with_defaults")]
    pub pretrain: TrainConfig,
    /// Empty `templates` means every template of the task.
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::toy(),
            model_seed: 0,
            suite_seed: 0,
            task: Family::ParityOfCount.name().to_string(),
            shots: 32,
            pretrained_init: true,
            train: TrainConfig::default(),
            pretrain: TrainConfig::pretrain(),
            eval: EvalConfig::default(),
        }
    }
}

fn pretrain_with_defaults<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    use serde::de::Error as _;
    let patch = serde_json::Value::deserialize(d)?;
    let mut base = serde_json::to_value(TrainConfig::pretrain()).map_err(D::Error::custom)?;
    match (&mut base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => b.extend(p),
        (_, other) => return Err(D::Error::custom(format!("pretrain must be an object, got {other}"))),
    }
    serde_json::from_value(base).map_err(D::Error::custom)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        Family::from_name(&self.task)?;
        self.train.validate()?;
        self.pretrain.validate()?;
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "at least one seed is required"));
        }
        if self.shots == 0 {
            return Err(Error::config("shots", "must be positive"));
        }
        Ok(())
    }

    pub fn with_losses(mut self, losses: Losses) -> Self {
        self.train.losses = losses;
        self
    }

    pub fn family(&self) -> Result<Family> {
        Family::from_name(&self.task)
    }

    pub fn build_model<F: Real>(&self) -> Result<Model<F>> {
        build_model(&self.model, self.model_seed)
    }

    pub fn suite(&self) -> Vec<SyntheticTask> {
        generate_task_suite(self.suite_seed)
    }

    /// The evaluation config with the template list filled in.
    pub fn eval_config(&self, templates: &[PromptTemplate]) -> EvalConfig {
        let mut e = self.eval.clone();
        if e.templates.is_empty() {
            e.templates = templates.iter().map(|t| t.id.clone()).collect();
        }
        e
    }
}

pub fn find_task<'a>(suite: &'a [SyntheticTask], name: &str) -> Result<&'a SyntheticTask> {
    let family = Family::from_name(name)?;
    suite
        .iter()
        .find(|t| t.family == family)
        .ok_or_else(|| Error::UnknownTask(name.to_string()))
}

/// Trains one shared adapter on the training splits of the mixture families.
pub fn pretrain_adapter<F: Real>(
    model: &mut Model<F>,
    suite: &[SyntheticTask],
    config: &TrainConfig,
    on_step: impl FnMut(&StepMetrics),
) -> Result<(IA3Adapter<F>, TrainOutcome)> {
    if config.mode != TrainMode::PretrainAdapter {
        return Err(Error::config("pretrain.mode", "must be pretrain-adapter"));
    }
    let mixture: Vec<&SyntheticTask> = suite.iter().filter(|t| t.family.in_mixture()).collect();
    let templates: Vec<Vec<PromptTemplate>> = mixture.iter().map(|t| templates_for(t.family)).collect();
    let sources: Vec<TrainSource<'_>> = mixture
        .iter()
        .zip(&templates)
        .map(|(t, tpl)| TrainSource {
            examples: &t.train,
            templates: tpl,
        })
        .collect();
    let mut adapter = init_adapter(model.spec())?;
    let outcome = train(model, &mut adapter, &sources, config, on_step)?;
    Ok((adapter, outcome))
}

#[derive(Clone, Debug)]
pub struct SeedRun<F> {
    pub seed: u64,
    pub adapter: IA3Adapter<F>,
    pub outcome: TrainOutcome,
}

#[derive(Clone, Debug)]
pub struct FewShotResult<F> {
    pub runs: Vec<SeedRun<F>>,
    pub report: EvalReport,
}

/// Fine-tunes a fresh copy of `init` on `k` shots for every evaluation seed
/// and evaluates each on the held-out split. The seed picks both the shots
/// and the training order. In full fine-tuning mode every seed starts from
/// `model` and `init` is ignored.
pub fn run_few_shot<F: Real>(
    model: &Model<F>,
    init: &IA3Adapter<F>,
    cfg: &RunConfig,
    mut on_step: impl FnMut(u64, &StepMetrics),
) -> Result<FewShotResult<F>> {
    cfg.validate()?;
    let suite = cfg.suite();
    let task = find_task(&suite, &cfg.task)?;
    let templates = templates_for(task.family);
    let full = cfg.train.mode == TrainMode::FullFinetune;
    let mut runs = Vec::with_capacity(cfg.eval.seeds.len());
    let mut cells = Vec::new();
    for &seed in &cfg.eval.seeds {
        let shots = sample_few_shot(task, cfg.shots, seed)?;
        let mut adapter = init.clone();
        let tc = TrainConfig {
            seed: cfg.train.seed.wrapping_add(seed),
            ..cfg.train.clone()
        };
        let source = TrainSource {
            examples: &shots.examples,
            templates: &templates,
        };
        let mut m = model.clone();
        let outcome = train(&mut m, &mut adapter, &[source], &tc, |s| on_step(seed, s))?;
        if full {
            let one = RunConfig {
                eval: EvalConfig {
                    seeds: vec![seed],
                    ..cfg.eval.clone()
                },
                ..cfg.clone()
            };
            cells.extend(evaluate_task(&m, &[None], task, &one)?.cells);
        }
        runs.push(SeedRun { seed, adapter, outcome });
    }
    let report = if full {
        EvalReport::from_cells(cfg.eval.length_normalize, cells)?
    } else {
        let adapters: Vec<Option<&IA3Adapter<F>>> = runs.iter().map(|r| Some(&r.adapter)).collect();
        evaluate_task(model, &adapters, task, cfg)?
    };
    Ok(FewShotResult { runs, report })
}

/// Held-out evaluation of `task` over every configured template and seed.
pub fn evaluate_task<F: Real>(
    model: &Model<F>,
    adapters: &[Option<&IA3Adapter<F>>],
    task: &SyntheticTask,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let templates = templates_for(task.family);
    let ds = heldout_dataset(task, &templates)?;
    evaluate(model, adapters, &ds, &cfg.eval_config(&templates))
}

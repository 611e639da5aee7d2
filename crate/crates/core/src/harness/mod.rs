//! Synthetic tasks, prompt templates, training loops and checkpoints.

pub mod checkpoint;
pub mod experiment;
pub mod tasks;
pub mod templates;
pub mod train;
pub mod vocab;

use crate::error::Result;
use crate::evaluator::EvalDataset;

pub use checkpoint::{checkpoint_size, load_checkpoint, save_checkpoint, Checkpoint};
pub use experiment::{evaluate_task, find_task, pretrain_adapter, run_few_shot, FewShotResult, RunConfig, SeedRun};
pub use tasks::{generate_task_suite, sample_few_shot, Example, Family, FewShotDataset, SyntheticTask};
pub use templates::{apply_random_template, apply_template, templates_for, PromptTemplate};
pub use train::{train, write_metrics_csv, Precision, StepMetrics, TrainConfig, TrainMode, TrainOutcome, TrainSource};
pub use vocab::{detokenize, tokenize, VOCAB_SIZE};

/// Held-out split of `task` rendered through every template in `templates`.
pub fn heldout_dataset(task: &SyntheticTask, templates: &[PromptTemplate]) -> Result<EvalDataset> {
    let mut ds = EvalDataset::default();
    for t in templates {
        let sets = task
            .heldout
            .iter()
            .map(|ex| apply_template(t, ex))
            .collect::<Result<Vec<_>>>()?;
        ds.by_template.insert(t.id.clone(), sets);
    }
    Ok(ds)
}

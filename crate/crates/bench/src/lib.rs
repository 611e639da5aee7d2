//! Shared fixtures for the benchmarks.

use fewshot_core::harness::{apply_template, generate_task_suite, templates_for, Family};
use fewshot_core::CandidateSet;

/// The first `n` held-out parity examples rendered through template 0.
pub fn parity_sets(n: usize) -> Vec<CandidateSet> {
    let suite = generate_task_suite(0);
    let task = suite
        .iter()
        .find(|t| t.family == Family::ParityOfCount)
        .expect("suite has every family");
    let template = &templates_for(task.family)[0];
    task.heldout[..n]
        .iter()
        .map(|ex| apply_template(template, ex).expect("built-in template applies"))
        .collect()
}

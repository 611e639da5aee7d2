//! Few-shot parameter-efficient fine-tuning on a toy encoder-decoder
//! transformer: activation-rescaling adapters, unlikelihood and
//! length-normalized losses, rank classification, Adafactor, and an analytic
//! FLOPs/storage cost model.

pub mod costs;
pub mod error;
pub mod evaluator;
pub mod harness;
pub mod ia3;
pub mod model;
pub mod objectives;
pub mod optimizer;
pub mod tensor;

pub use costs::{table1_report, table1_scenarios, CostReport, CostScenario};
pub use error::{CheckpointError, Error, Result};
pub use evaluator::{
    accuracy, evaluate, rank_classify, score_candidates, EvalCell, EvalConfig, EvalDataset, EvalReport,
};
pub use ia3::{
    adapter_shapes, ia3_param_count, init_adapter, merge, select_for_batch, AdapterStore, BatchAdapters, BoundAdapter,
    IA3Adapter,
};
pub use model::{
    attention, build_model, ffn, Activation, BoundModel, DecodeSegment, Model, ModelSpec, PackedLogits, DECODER_START,
};
pub use objectives::{
    batch_loss, length_normalized_logprob, lm_loss, ln_loss, token_logprobs, total_loss, ul_loss, BatchLoss,
    CandidateSet, LossBreakdown, Losses,
};
pub use optimizer::{Adafactor, AdafactorConfig, Schedule};
pub use tensor::{Gradients, Real, Tape, Tensor, Var};

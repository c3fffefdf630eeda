//! Optimizer, nested objective, training loop and the prune-and-continue driver.

mod objective;
mod optimizer;
mod prune;
mod trainer;

pub use objective::{
    accumulate_nested_gradients, add_decay_gradient, decay_term, level_gradients, nested_loss, BatchResult,
};
pub use optimizer::{lr_at, sgd_step, LevelMode, LrSchedule, OptimizerState, TrainConfig};
pub use prune::{iterative_prune, pruned_positions_are_zero, PruneDriverConfig, PruneReport};
pub use trainer::{
    collect_logits, evaluate, run_phase, score, train, EvalResult, Hooks, MetricRow, MetricSink, Phase, PhaseReport,
    TsvLog,
};

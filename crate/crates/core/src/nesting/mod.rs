//! Masks, schedules and the nesting modes built from them.

mod extract;
mod mask;
mod schedule;
mod strategy;

pub use extract::extract_standalone;
pub(crate) use mask::project_in_place;
pub use mask::{
    approx_step, approx_step_tensor, binarize, compute_soft_mask, project, validate_nesting, BinaryMask, MaskHierarchy,
    NestingReport,
};
pub use schedule::{
    build_channel_schedule, build_combined_schedule, build_layer_schedule, hierarchy_density, leading_mask,
    schedule_to_masks, LayerDims, LevelSchedule, WeightBlock,
};
pub use strategy::{
    infer_mode, NestingParams, NestingStrategy, StrategyFactory, StrategyRegistry, DEFAULT_CUTOFF, DEFAULT_GAMMA,
};

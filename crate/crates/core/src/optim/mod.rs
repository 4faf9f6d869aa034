//! AdamW, the one-cycle policy, discriminative layer-group rates, the
//! learning-rate range test and the staged training loop.

mod adamw;
mod schedule;
mod train;

pub use adamw::{adamw_step, AdamW, AdamWConfig, ParamGroup};
pub use range_test::{lr_range_test, LrRangeResult, QuadraticBowl, RangePoint, RangeTestConfig, RangeTestSubject};
pub use schedule::{discriminative_groups, one_cycle_at, stage_rates, LrPolicy, OneCycleSchedule};
pub use train::{
    collect_grads, default_stages, evaluate_with_loss, log_csv, parse_log_csv, steps_per_epoch, train, CnnRangeSubject,
    LogRow, Stage, TrainConfig, TrainReport,
};

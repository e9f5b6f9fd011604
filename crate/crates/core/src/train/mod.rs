//! Optimization and evaluation.

mod eval;
mod sgd;
mod trainer;

pub use eval::{
    evaluate_single_scale, multi_scale_eval, multi_scale_probabilities, sliding_window_predict, sliding_window_scheduled,
    tile_starts, tiles, EvalConfig, EvalReport,
};
pub use sgd::{poly_lr, sgd_step, sgd_update, SgdState, DEFAULT_MOMENTUM, POLY_POWER};
pub use trainer::{batch_gradients, batch_indices, log_csv, train, LogRow, TrainConfig, TrainOutcome, LOG_HEADER};

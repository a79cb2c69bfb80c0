//! Training loop, validation, and the gradient, NFE and stability experiments.

mod config;
mod gradcheck;
mod optim;
mod report;
mod stability;
mod train;

pub use config::{LrSchedule, TrainConfig};
pub use gradcheck::{frozen_schedule_gradient, grad_check_suite, random_ode_function, GradCheckCell, GradCheckConfig};
pub use optim::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use report::{bucket_by_mode, nfe_difficulty_report, step_mode, Bucket, NfeReport, NfeRow, NFE_REPORT_FILE};
pub use stability::{run_scenario, stability_bench, Scenario, StabilityRow, StabilityTable, STABILITY_FILE};
pub use train::{
    bicubic_baseline, train, validate, EpochMetrics, ImageEval, NfeStats, TrainOutcome, ValidationStats,
    BEST_CHECKPOINT, GRAD_REPORTS_FILE, LAST_CHECKPOINT, METRICS_FILE,
};

/// Shortest decimal form of `v` rounded to 9 significant digits.
pub fn fmt_sig(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let rounded: f64 = format!("{v:.8e}").parse().unwrap_or(v);
    rounded.to_string()
}

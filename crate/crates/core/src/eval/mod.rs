//! Metrics, localization and reports.

mod ap;
pub mod plot;
mod pointing;
mod report;

pub use ap::{average_precision, average_precision_scores, mean_defined, pr_curve, rank, Ranked};
pub use pointing::{argmax, pointing_localize, upscale_bilinear, Point, Pointing, PointingTally};
pub use report::{
    class_aps, evaluate, evaluate_model, pointing, score_records, EvalReport, LevelEntry,
    PointingEntry, Scores,
};

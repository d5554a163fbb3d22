//! Evaluation: per-class and macro F1, results-table rendering, and
//! stitching per-clip predictions into activity timelines.

mod metrics;
mod timeline;

pub use metrics::{
    evaluate_method, format_score, macro_f1, macro_f1_from_pairs, macro_f1_with_missing,
    per_class_f1, render_results_table, round_table, ClassF1, ClipPrediction, EvalExtras,
    MetricsReport, PerClassScores, PredictionSet,
};
pub use timeline::{
    rewindow, stitch_timeline, timeline_to_csv, timeline_to_svg, ExclusionViolation, Timeline,
    TimelineSegment,
};

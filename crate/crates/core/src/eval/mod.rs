//! Statistics and experiment drivers over generation traces.

pub mod stats;
pub mod sweep;

pub use stats::{
    bootstrap_ci, clopper_pearson, format_p, mcnemar, mcnemar_with, roc_auc, Confusion, ConfusionMetrics,
    MatchedPairs, McNemar,
};
pub use sweep::{
    grid_search, group_by_tag, layer_sweep, problem_confusion, rollback_stats, step_confusion, summarize, GridCell,
    GridRow, GridSpec, LayerRecord, RollbackStats, RunSummary,
};

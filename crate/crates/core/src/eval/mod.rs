//! Metrics and the continual evaluation protocol.

mod continual;
mod metrics;

pub use continual::{
    evaluate_manifest, load_test_set, run_continual, train_continual, write_outcome, write_report,
    write_traces, BenchConfig, BenchmarkReport, ContinualOutcome, ForgettingReport, MetricSet, TaskReport,
    TestSample, METRICS,
};
pub use metrics::{
    aupr, auroc, forgetting_measure, pro, BinaryMask, FmNormalization, TaskResultMatrix, DEFAULT_FPR_CAP,
};

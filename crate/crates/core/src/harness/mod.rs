//! Metrics and the transfer-experiment protocol.

mod experiment;
pub mod metrics;
mod plots;
mod report;

pub use experiment::{
    ablation_configs, dataset_id, evaluate_model, median, run_ablation, run_transfer_experiment, AttackTrace,
    CellStats, Experiment, SeedOutcome, TracePoint, TransferRecord, TransferReport,
};
pub use metrics::{miou, ConfusionMatrix};
pub use plots::{bar_chart_svg, emit_plots, trace_svg};
pub use report::{format_csv, format_report, parse_report, read_report, write_csv, write_report, CSV_HEADER};

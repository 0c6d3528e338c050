//! Run configuration, cached artifacts, multi-run studies, reports and
//! self-tests behind the `cvs` command line.

mod config;
mod plot;
mod report;
mod run;
mod selftest;
mod study;

pub use config::{lambda_label, value_key, DataConfig, RunConfig};
pub use plot::{category_plot, gray_svg};
pub use report::{build_report, collect_records, write_report};
pub use run::{
    dataset_dir, ensure_dataset, ensure_teacher, file_checksum, run_dir, run_many, short_key, split, teacher_dir, train_run, RunRecord,
    RunSpec, StudyInputs, TeacherArtifacts,
};
pub use selftest::{checks_text, contract_smoke, selftest, smoke_config};
pub use study::{
    ablation_specs, comparison_specs, default_lambdas, mean, run_specs, seeds_from, spread, sweep_specs, zero_lambda_mismatches,
    AblationRow, AblationTable, Aggregate, ComparisonTable, SimilarityRowSummary, SimilarityTable, StudyRuns, SweepRow, SweepTable,
};

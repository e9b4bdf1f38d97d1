//! Orchestration around the compression library: end-to-end pipelines,
//! grid search, evaluation records, reports and an inference benchmark.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod config;
pub mod pipeline;
pub mod record;
pub mod report;
pub mod search;

pub use bench::{cmd_bench, BenchReport, BenchSample};
pub use config::{BenchSection, CorpusSpec, HarnessConfig, PruneSection, SampleSpec};
pub use pipeline::{cmd_pipeline, is_unstable, run_pipeline};
pub use record::{recovery_percent, reduction_percent, Direction, ExperimentRecord, Status};
pub use report::{cmd_report, parse_report, Report};
pub use search::{cmd_search, rank};

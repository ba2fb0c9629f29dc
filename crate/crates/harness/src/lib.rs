//! Experiment orchestration: the family × variant × noise × seed matrix,
//! repeated inference, reports and human-annotation ingestion.

pub mod annotate;
pub mod config;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod report;

pub use annotate::{ingest, ingest_annotations, AnnotationLine, HumanEval, IngestReport};
pub use config::{EntryKey, ExperimentConfig, FamilySettings, DEFAULT_OUT, OUT_ENV};
pub use error::{HarnessError, Result};
pub use experiment::{
    run_experiment, AttentionSummary, CorrelationOutcome, EntryRecord, EntryStatus, Experiment, RunRecord,
    SplitAnalysis, SplitResult,
};
pub use inference::{
    decode_run, evaluate_runs, repeated_inference, AveragedScores, ItemJudgment, JudgmentTally, PredictionRecord,
    Scores, SplitEval,
};
pub use report::{build_table, emit_all, emit_report, Cell, ReportKind, ReportTable};

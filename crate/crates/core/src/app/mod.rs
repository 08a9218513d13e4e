//! Command-line application and the knowledgebase it writes to.

pub mod cli;
pub mod knowledge;

pub use knowledge::{ingest_and_classify, IngestReport, KnowledgeBase, KnowledgeRecord, LabelNames, NewRecord, Query};

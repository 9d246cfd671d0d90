//! Concept-level auditing of text-to-image model outputs.
//!
//! A run is described by prompts and, per generated image, the concepts a
//! visual-grounding detector found in it. From that corpus this crate
//! computes concept frequencies, per-prompt conditionals, stability across
//! prompts, pairwise co-occurrence rules, reverse lookups from concepts to
//! prompts, and serializable audit reports.

pub mod ingest;
pub mod metrics;
pub mod mining;
pub mod model;
pub mod numeric;
pub mod prompt_spec;
pub mod report;

pub use ingest::{load_corpus, parse_records, write_corpus, AliasMap, IngestError, IngestOptions, RecordIngester};
pub use metrics::{
    concept_frequency, concept_stability, conditional_frequency, subsample_ci, Classification, FrequencyTable,
    IntervalEstimate, MetricsError, StabilityTable,
};
pub use mining::{cooccurrence, reverse_index, top_cooccurring, watchlist_scan, CoocTable, RankMetric};
pub use model::{normalize_label, AuditCorpus, BoundingBox, ConceptLabel, Detection, ImageRecord, PromptRecord};
pub use report::{build_report, compare_runs, suggest_negative_prompts, AuditReport, ReportParams, RunDiff};

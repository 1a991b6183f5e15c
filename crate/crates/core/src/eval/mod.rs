// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dataset ingestion, prompt templates, splits and accuracy metrics.

mod dataset;
mod metrics;
mod report;
mod split;

pub use dataset::{
    continuation_ids, continuation_text, load_dataset, parse_dataset, Content, QASample, Template,
};
pub use metrics::{
    classification_accuracy, evaluate_sample, generation_accuracy, generation_matches,
    topk_accuracy, ClassificationOutcome, EvalConfig, GenerationOutcome, Metric, SampleRecord,
    DEFAULT_GENERATION_TOKENS,
};
pub use report::{evaluate, score_samples, Aggregates, EvalReport, ReportMetadata};
pub use split::{split, validation_size, DatasetSplit, MIN_SPLIT_SIZE};

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{LaserError, Result};
use crate::eval::dataset::QASample;
use crate::eval::metrics::{evaluate_sample, EvalConfig, SampleRecord};
use crate::laser::InterventionPlan;
use crate::parallel::*;
use crate::transformer::TransformerModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk_k: Option<usize>,
    /// Over samples with a one-token answer only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk_n: Option<usize>,
    /// Over samples that have paraphrases.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase_robustness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
}

impl Aggregates {
    pub fn from_records(records: &[SampleRecord], cfg: &EvalConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(LaserError::invalid("cannot aggregate an empty evaluation"));
        }
        let n = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let topk: Vec<bool> = records.iter().filter_map(|r| r.topk_correct).collect();
        let robust: Vec<bool> = records.iter().filter_map(|r| r.robust).collect();
        let fraction = |v: &[bool]| {
            (!v.is_empty()).then(|| v.iter().filter(|&&b| b).count() as f64 / v.len() as f64)
        };
        let topk_k = match cfg.metric {
            crate::eval::Metric::TopK { k } => Some(k),
            _ => cfg.topk,
        };
        Ok(Self {
            n,
            correct,
            accuracy: correct as f64 / n as f64,
            mean_loss: records.iter().map(|r| r.loss).sum::<f64>() / n as f64,
            topk_k: topk_k.filter(|_| !topk.is_empty()),
            topk_accuracy: fraction(&topk),
            topk_n: (!topk.is_empty()).then_some(topk.len()),
            paraphrase_robustness: fraction(&robust),
            perplexity: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub plan: InterventionPlan,
    /// Content hash of the unmodified checkpoint.
    pub model_hash: String,
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Run seed, when the caller has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub aggregates: Aggregates,
    /// Sorted by sample id.
    pub samples: Vec<SampleRecord>,
}

/// Evaluates every sample (in parallel) and returns records sorted by id.
pub fn score_samples(
    model: &TransformerModel,
    samples: &[QASample],
    cfg: &EvalConfig,
) -> Result<Vec<SampleRecord>> {
    let mut records = samples
        .par_iter()
        .map(|s| evaluate_sample(model, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

/// Evaluates `model` on `samples`. The plan recorded in the metadata is
/// empty; callers that applied one should set it.
pub fn evaluate(
    model: &TransformerModel,
    samples: &[QASample],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let records = score_samples(model, samples, cfg)?;
    Ok(EvalReport {
        metadata: ReportMetadata {
            plan: InterventionPlan::empty(),
            model_hash: model.baseline().content_hash(),
            eval: *cfg,
            split: None,
            split_seed: None,
            config_hash: None,
            seed: None,
        },
        aggregates: Aggregates::from_records(&records, cfg)?,
        samples: records,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    /// Long-format rows `(metric, group, value)`: aggregates under group
    /// `all`, then per-sample correctness and loss grouped by id.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut row = |metric: &str, group: &str, value: String| {
            w.write_record([metric, group, value.as_str()])
                .expect("in-memory csv");
        };
        row("metric", "group", "value".into());
        let m = &self.metadata;
        row("meta", "model_hash", m.model_hash.clone());
        if let Some(h) = &m.config_hash {
            row("meta", "config_hash", h.clone());
        }
        if let Some(seed) = m.seed {
            row("meta", "seed", seed.to_string());
        }
        if let Some(seed) = m.split_seed {
            row("meta", "split_seed", seed.to_string());
        }
        row("meta", "plan", m.plan.to_json());
        let a = &self.aggregates;
        row("n", "all", a.n.to_string());
        row("accuracy", "all", a.accuracy.to_string());
        row("mean_loss", "all", a.mean_loss.to_string());
        if let (Some(k), Some(acc)) = (a.topk_k, a.topk_accuracy) {
            row("topk_accuracy", &format!("k={k}"), acc.to_string());
        }
        if let Some(r) = a.paraphrase_robustness {
            row("paraphrase_robustness", "all", r.to_string());
        }
        if let Some(p) = a.perplexity {
            row("perplexity", "all", p.to_string());
        }
        for s in &self.samples {
            row("correct", &s.id, u8::from(s.correct).to_string());
            row("loss", &s.id, s.loss.to_string());
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }

    /// Writes `<stem>.json` and `<stem>.csv` atomically.
    pub fn write(&self, json_path: &Path) -> Result<()> {
        write_atomic(json_path, self.to_json().as_bytes())?;
        write_atomic(&json_path.with_extension("csv"), self.to_csv().as_bytes())
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnostics over evaluation reports: flip sets, monotonicity, corpus
//! co-occurrence, frequency binning, higher-order components and sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LaserError, Result};
use crate::eval::{score_samples, Aggregates, EvalConfig, EvalReport, QASample};
use crate::laser::{
    apply_plan_cached, FactorCache, InterventionPlan, InterventionSpec, Objective, SearchConfig,
};
use crate::parallel::*;
use crate::tensor::{cosine_similarity, high_order_from, svd};
use crate::transformer::{
    argmax_token, next_token_log_probs, ByteTokenizer, Slot, TokenId, TransformerModel,
};

pub const DEFAULT_FRACTIONS: [f64; 6] = [0.0, 0.5, 0.8, 0.9, 0.95, 0.99];
pub const DEFAULT_GENERIC_TOKENS: usize = 20;

/// Partition of sample ids by correctness before and after an intervention.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipSets {
    /// Correct before and after.
    pub originally_correct: BTreeSet<String>,
    /// Wrong before, correct after.
    pub answer_corrected: BTreeSet<String>,
    /// Correct before, wrong after.
    pub answer_broken: BTreeSet<String>,
    /// Wrong before and after.
    pub never_correct: BTreeSet<String>,
}

fn correctness(report: &EvalReport) -> BTreeMap<&str, bool> {
    report
        .samples
        .iter()
        .map(|s| (s.id.as_str(), s.correct))
        .collect()
}

pub fn flip_sets(baseline: &EvalReport, intervened: &EvalReport) -> Result<FlipSets> {
    let before = correctness(baseline);
    let after = correctness(intervened);
    if before.len() != baseline.samples.len() || after.len() != intervened.samples.len() {
        return Err(LaserError::invalid("report contains duplicate sample ids"));
    }
    if !before.keys().eq(after.keys()) {
        return Err(LaserError::invalid("reports cover different sample ids"));
    }
    let mut sets = FlipSets::default();
    for (id, &b) in &before {
        let target = match (b, after[id]) {
            (true, true) => &mut sets.originally_correct,
            (false, true) => &mut sets.answer_corrected,
            (true, false) => &mut sets.answer_broken,
            (false, false) => &mut sets.never_correct,
        };
        target.insert(id.to_string());
    }
    Ok(sets)
}

/// Number of adjacent steps at which a correct flag turns incorrect.
pub fn count_violations(flags: &[bool]) -> usize {
    flags.windows(2).filter(|w| w[0] && !w[1]).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// Ordered from weakest to strongest reduction.
    pub family: Vec<InterventionSpec>,
    pub accuracy: Vec<f64>,
    /// `(sample, step)` pairs where a sample correct at the previous step
    /// is wrong at this one.
    pub violations: usize,
    /// Samples with at least one violation, with their counts.
    pub violating_samples: BTreeMap<String, usize>,
}

/// Counts violations in per-step correctness maps (all over the same ids).
pub fn monotonicity_from_flags(
    steps: &[BTreeMap<String, bool>],
) -> Result<(usize, BTreeMap<String, usize>)> {
    let Some(first) = steps.first() else {
        return Err(LaserError::invalid("empty family"));
    };
    if steps.iter().any(|s| !s.keys().eq(first.keys())) {
        return Err(LaserError::invalid("steps cover different sample ids"));
    }
    let mut per_sample = BTreeMap::new();
    let mut total = 0;
    for id in first.keys() {
        let flags: Vec<bool> = steps.iter().map(|s| s[id]).collect();
        let v = count_violations(&flags);
        if v > 0 {
            per_sample.insert(id.clone(), v);
            total += v;
        }
    }
    Ok((total, per_sample))
}

/// Evaluates a family of interventions on one slot, ordered by strictly
/// decreasing rho, and counts correct-to-wrong transitions between steps.
pub fn monotonicity_audit(
    model: &TransformerModel,
    samples: &[QASample],
    family: &[InterventionSpec],
    eval: &EvalConfig,
) -> Result<MonotonicityReport> {
    let Some(first) = family.first() else {
        return Err(LaserError::invalid("empty family"));
    };
    for pair in family.windows(2) {
        if pair[1].slot() != first.slot() || pair[1].method != first.method {
            return Err(LaserError::invalid(
                "family must target a single slot with one method",
            ));
        }
        if pair[1].rho >= pair[0].rho {
            return Err(LaserError::invalid(
                "family must be ordered by strictly decreasing rho",
            ));
        }
    }
    let slot = first.slot();
    let cache = FactorCache::build(model, &[slot], first.method)?;
    let reports = family
        .par_iter()
        .map(|spec| {
            let plan = InterventionPlan { steps: vec![*spec] };
            score_samples(
                &apply_plan_cached(model, &plan, Some(&cache))?,
                samples,
                eval,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let steps: Vec<BTreeMap<String, bool>> = reports
        .iter()
        .map(|r| r.iter().map(|s| (s.id.clone(), s.correct)).collect())
        .collect();
    let (violations, violating_samples) = monotonicity_from_flags(&steps)?;
    Ok(MonotonicityReport {
        family: family.to_vec(),
        accuracy: reports
            .iter()
            .map(|r| r.iter().filter(|s| s.correct).count() as f64 / r.len().max(1) as f64)
            .collect(),
        violations,
        violating_samples,
    })
}

/// Loads a corpus: every file of a directory (sorted by name) is one
/// document; a `.jsonl` file contributes one document per line's `text`
/// field; any other file is a single document.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| LaserError::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| LaserError::io(path, err)))
            .collect::<Result<_>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        let mut docs = Vec::new();
        for f in files {
            docs.extend(load_corpus(&f)?);
        }
        return Ok(docs);
    }
    let text = std::fs::read_to_string(path).map_err(|e| LaserError::io(path, e))?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        #[derive(Deserialize)]
        struct Doc {
            text: String,
        }
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str::<Doc>(l)
                    .map(|d| d.text)
                    .map_err(|e| LaserError::Dataset {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: e.to_string(),
                    })
            })
            .collect()
    } else {
        Ok(vec![text])
    }
}

/// Byte tokens of the corpus, documents separated by newlines.
pub fn corpus_tokens(docs: &[String]) -> Vec<TokenId> {
    ByteTokenizer.encode(&docs.join("\n"))
}

/// The `n` most frequent tokens, ties broken towards lower ids.
pub fn most_frequent_tokens(tokens: &[TokenId], n: usize) -> Vec<TokenId> {
    let mut counts: BTreeMap<TokenId, usize> = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut ranked: Vec<(TokenId, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(n).map(|(t, _)| t).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cooccurrence {
    pub counts: BTreeMap<String, u64>,
    /// Samples without a subject or answer text.
    pub skipped: Vec<String>,
}

/// Per sample, the number of documents that contain both the subject and
/// the answer text (case-insensitive substring match).
pub fn corpus_cooccurrence(docs: &[String], samples: &[QASample]) -> Cooccurrence {
    let lowered: Vec<String> = docs.par_iter().map(|d| d.to_lowercase()).collect();
    let results: Vec<(String, Option<u64>)> = samples
        .par_iter()
        .map(|s| {
            let (Some(subject), Some(answer)) = (&s.subject, &s.answer_text) else {
                return (s.id.clone(), None);
            };
            let (subject, answer) = (subject.to_lowercase(), answer.to_lowercase());
            let n = lowered
                .iter()
                .filter(|d| d.contains(&subject) && d.contains(&answer))
                .count();
            (s.id.clone(), Some(n as u64))
        })
        .collect();
    let mut out = Cooccurrence::default();
    for (id, count) in results {
        match count {
            Some(c) => {
                out.counts.insert(id, c);
            }
            None => {
                log::warn!("sample {id}: no subject/answer text, skipped in co-occurrence count");
                out.skipped.push(id);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBin {
    pub lower: u64,
    /// Exclusive; `None` for the open last bin.
    pub upper: Option<u64>,
    pub n_samples: usize,
    pub baseline_accuracy: Option<f64>,
    pub intervened_accuracy: Option<f64>,
    pub boost: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativePoint {
    pub frequency: u64,
    pub n_samples: usize,
    pub baseline_accuracy: f64,
    pub intervened_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBinReport {
    pub edges: Vec<u64>,
    pub bins: Vec<FrequencyBin>,
    /// Accuracy over samples with frequency at most each observed value.
    pub cumulative: Vec<CumulativePoint>,
}

/// `0, 1, 2, 5, 10, 20, 50, ...` up to `max`.
pub fn default_bin_edges(max: u64) -> Vec<u64> {
    let mut edges = vec![0];
    let mut scale = 1u64;
    'outer: loop {
        for m in [1, 2, 5] {
            let Some(e) = scale.checked_mul(m) else {
                break 'outer;
            };
            if e > max {
                break 'outer;
            }
            edges.push(e);
        }
        match scale.checked_mul(10) {
            Some(s) => scale = s,
            None => break,
        }
    }
    edges
}

/// Bins `[e_i, e_{i+1})` plus a final `[e_last, ∞)` bin.
pub fn frequency_binned_boost(
    baseline: &EvalReport,
    intervened: &EvalReport,
    frequencies: &BTreeMap<String, u64>,
    edges: &[u64],
) -> Result<FrequencyBinReport> {
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LaserError::invalid(
            "bin edges must be nonempty and strictly increasing",
        ));
    }
    let before = correctness(baseline);
    let after = correctness(intervened);
    if !before.keys().eq(after.keys()) {
        return Err(LaserError::invalid("reports cover different sample ids"));
    }
    let mut rows = Vec::with_capacity(before.len());
    for (id, &b) in &before {
        let f = *frequencies
            .get(*id)
            .ok_or_else(|| LaserError::invalid(format!("no frequency for sample {id}")))?;
        if f < edges[0] {
            return Err(LaserError::invalid(format!(
                "sample {id} has frequency {f} below the first edge {}",
                edges[0]
            )));
        }
        rows.push((f, b, after[id]));
    }
    let acc = |sel: &[&(u64, bool, bool)], pick: fn(&(u64, bool, bool)) -> bool| {
        sel.iter().filter(|r| pick(r)).count() as f64 / sel.len() as f64
    };
    let bins = edges
        .iter()
        .enumerate()
        .map(|(i, &lower)| {
            let upper = edges.get(i + 1).copied();
            let sel: Vec<_> = rows
                .iter()
                .filter(|(f, _, _)| *f >= lower && upper.is_none_or(|u| *f < u))
                .collect();
            let (b, a) = if sel.is_empty() {
                (None, None)
            } else {
                (Some(acc(&sel, |r| r.1)), Some(acc(&sel, |r| r.2)))
            };
            FrequencyBin {
                lower,
                upper,
                n_samples: sel.len(),
                baseline_accuracy: b,
                intervened_accuracy: a,
                boost: b.zip(a).map(|(b, a)| a - b),
            }
        })
        .collect();
    let values: BTreeSet<u64> = rows.iter().map(|r| r.0).collect();
    let cumulative = values
        .into_iter()
        .map(|f| {
            let sel: Vec<_> = rows.iter().filter(|r| r.0 <= f).collect();
            CumulativePoint {
                frequency: f,
                n_samples: sel.len(),
                baseline_accuracy: acc(&sel, |r| r.1),
                intervened_accuracy: acc(&sel, |r| r.2),
            }
        })
        .collect();
    Ok(FrequencyBinReport {
        edges: edges.to_vec(),
        bins,
        cumulative,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HigherOrderSample {
    pub id: String,
    pub true_token: TokenId,
    pub predicted: TokenId,
    pub generic: bool,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HigherOrderPoint {
    /// Fraction of components removed from the top of the spectrum.
    pub fraction: f64,
    pub removed: usize,
    pub mean_similarity: f64,
    pub generic_fraction: f64,
    pub top1_accuracy: f64,
    pub samples: Vec<HigherOrderSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HigherOrderStudy {
    pub slot: Slot,
    pub generic_tokens: Vec<TokenId>,
    /// How `similarity` should be read.
    pub similarity_convention: String,
    pub points: Vec<HigherOrderPoint>,
}

/// Replaces the slot's matrix with only its higher-order components (the
/// top `⌊fraction · min(m,n)⌋` removed) and records, per sample, the top-1
/// next token and its input-embedding cosine similarity to the first
/// answer token. Fraction 0 uses the unmodified matrix.
pub fn higher_order_study(
    model: &TransformerModel,
    samples: &[QASample],
    slot: Slot,
    fractions: &[f64],
    generic_tokens: &[TokenId],
) -> Result<HigherOrderStudy> {
    if samples.is_empty() {
        return Err(LaserError::invalid(
            "higher-order study needs at least one sample",
        ));
    }
    if fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(LaserError::invalid("fractions must lie in [0, 1)"));
    }
    let w = model.weight(slot)?;
    let factors = svd(w)?;
    let embedding = &model.base().embedding;
    let generic: BTreeSet<TokenId> = generic_tokens.iter().copied().collect();
    let points = fractions
        .iter()
        .map(|&fraction| {
            let removed = crate::laser::target_rank(w.shape(), fraction)?;
            let view = if removed == 0 {
                model.clone()
            } else {
                model.with_override(slot, high_order_from(&factors, removed)?)?
            };
            let per_sample = samples
                .par_iter()
                .map(|s| {
                    let inner = || -> Result<HigherOrderSample> {
                        let truth = *s
                            .answer_ids()
                            .first()
                            .ok_or_else(|| LaserError::invalid("empty answer"))?;
                        let predicted =
                            argmax_token(&next_token_log_probs(&view, &s.prompt_ids())?);
                        let similarity = cosine_similarity(
                            embedding.row(predicted as usize),
                            embedding.row(truth as usize),
                        )?;
                        Ok(HigherOrderSample {
                            id: s.id.clone(),
                            true_token: truth,
                            predicted,
                            generic: generic.contains(&predicted),
                            similarity,
                        })
                    };
                    inner().map_err(|e| e.in_sample(&s.id))
                })
                .collect::<Result<Vec<_>>>()?;
            let n = per_sample.len() as f64;
            Ok(HigherOrderPoint {
                fraction,
                removed,
                mean_similarity: per_sample.iter().map(|s| s.similarity).sum::<f64>() / n,
                generic_fraction: per_sample.iter().filter(|s| s.generic).count() as f64 / n,
                top1_accuracy: per_sample
                    .iter()
                    .filter(|s| s.predicted == s.true_token)
                    .count() as f64
                    / n,
                samples: per_sample,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HigherOrderStudy {
        slot,
        generic_tokens: generic_tokens.to_vec(),
        similarity_convention: "cosine similarity of input-embedding rows; 1 means identical direction, cosine distance is 1 - similarity".into(),
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub spec: InterventionSpec,
    pub objective: f64,
    pub accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSweep {
    pub objective: Objective,
    pub num_layers: usize,
    pub baseline: SweepCell,
    pub cells: Vec<SweepCell>,
}

fn sweep_cell(spec: InterventionSpec, agg: &Aggregates, objective: Objective) -> SweepCell {
    SweepCell {
        spec,
        objective: objective.of(agg),
        accuracy: agg.accuracy,
        mean_loss: agg.mean_loss,
    }
}

/// Evaluates every `(tau, layer, rho)` of `cfg` independently, plus the
/// baseline (stored with `rho = 1`).
pub fn layer_sweep(
    model: &TransformerModel,
    samples: &[QASample],
    cfg: &SearchConfig,
    eval: &EvalConfig,
) -> Result<LayerSweep> {
    let num_layers = model.config().num_layers;
    cfg.validate(num_layers)?;
    let specs = cfg.candidates(num_layers);
    let slots: Vec<Slot> = specs.iter().map(InterventionSpec::slot).collect();
    let cache = FactorCache::build(model, &slots, cfg.method)?;
    let base_records = score_samples(model, samples, eval)?;
    let base = Aggregates::from_records(&base_records, eval)?;
    let cells = specs
        .par_iter()
        .map(|spec| {
            let plan = InterventionPlan { steps: vec![*spec] };
            let view = apply_plan_cached(model, &plan, Some(&cache))?;
            let agg = Aggregates::from_records(&score_samples(&view, samples, eval)?, eval)?;
            Ok(sweep_cell(*spec, &agg, cfg.objective))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut baseline_spec = specs[0];
    baseline_spec.rho = 1.0;
    Ok(LayerSweep {
        objective: cfg.objective,
        num_layers,
        baseline: sweep_cell(baseline_spec, &base, cfg.objective),
        cells,
    })
}

impl LayerSweep {
    /// Columns `series, tau, layer, rho, objective, accuracy, mean_loss`;
    /// the baseline appears once per layer as series `baseline`.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut put = |fields: [String; 7]| w.write_record(&fields).expect("in-memory csv");
        put([
            "series",
            "tau",
            "layer",
            "rho",
            "objective",
            "accuracy",
            "mean_loss",
        ]
        .map(String::from));
        for layer in 0..self.num_layers {
            let b = &self.baseline;
            put([
                "baseline".into(),
                String::new(),
                layer.to_string(),
                String::new(),
                b.objective.to_string(),
                b.accuracy.to_string(),
                b.mean_loss.to_string(),
            ]);
        }
        let mut cells: Vec<&SweepCell> = self.cells.iter().collect();
        cells.sort_by(|a, b| {
            (a.spec.tau, a.spec.layer)
                .cmp(&(b.spec.tau, b.spec.layer))
                .then(b.spec.rho.total_cmp(&a.spec.rho))
        });
        for c in cells {
            put([
                "intervened".into(),
                c.spec.tau.to_string(),
                c.spec.layer.to_string(),
                c.spec.rho.to_string(),
                c.objective.to_string(),
                c.accuracy.to_string(),
                c.mean_loss.to_string(),
            ]);
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

impl FrequencyBinReport {
    /// Bin rows then cumulative rows in one long-format table.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "kind",
            "lower",
            "upper",
            "n_samples",
            "baseline_accuracy",
            "intervened_accuracy",
            "boost",
        ])
        .expect("in-memory csv");
        for b in &self.bins {
            w.write_record([
                "bin".to_string(),
                b.lower.to_string(),
                b.upper.map(|u| u.to_string()).unwrap_or_default(),
                b.n_samples.to_string(),
                opt(b.baseline_accuracy),
                opt(b.intervened_accuracy),
                opt(b.boost),
            ])
            .expect("in-memory csv");
        }
        for c in &self.cumulative {
            w.write_record([
                "cumulative".to_string(),
                String::new(),
                c.frequency.to_string(),
                c.n_samples.to_string(),
                c.baseline_accuracy.to_string(),
                c.intervened_accuracy.to_string(),
                (c.intervened_accuracy - c.baseline_accuracy).to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

impl HigherOrderStudy {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "fraction",
            "removed",
            "mean_similarity",
            "generic_fraction",
            "top1_accuracy",
        ])
        .expect("in-memory csv");
        for p in &self.points {
            w.write_record([
                p.fraction.to_string(),
                p.removed.to_string(),
                p.mean_similarity.to_string(),
                p.generic_fraction.to_string(),
                p.top1_accuracy.to_string(),
            ])
            .expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
    }
}

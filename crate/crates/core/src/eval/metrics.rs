// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-sample metrics. Each function takes token ids and a model view;
//! [`evaluate_sample`] combines them with a single prompt prefill.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LaserError, Result};
use crate::eval::dataset::{continuation_ids, Content, QASample};
use crate::transformer::{
    greedy_extend, prefill, score_continuation, topk_indices, ByteTokenizer, DecodeState, TokenId,
    TransformerModel,
};

pub const DEFAULT_GENERATION_TOKENS: usize = 10;

/// Primary correctness criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metric {
    /// Greedy generation of up to `max_tokens` tokens must contain the answer.
    Generation { max_tokens: usize },
    /// The gold candidate must score strictly highest.
    Classification,
    /// The single-token answer must be among the `k` most likely next tokens.
    TopK { k: usize },
}

impl Default for Metric {
    fn default() -> Self {
        Metric::Generation {
            max_tokens: DEFAULT_GENERATION_TOKENS,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Generation { max_tokens } => write!(f, "generation:{max_tokens}"),
            Metric::Classification => f.write_str("classification"),
            Metric::TopK { k } => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = LaserError;

    /// `generation[:N]`, `classification`, `topk:K`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.trim().split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s.trim(), None),
        };
        let num = |a: Option<&str>, default: Option<usize>| -> Result<usize> {
            match a {
                Some(a) => a
                    .trim()
                    .parse()
                    .map_err(|_| LaserError::invalid(format!("bad metric argument in {s:?}"))),
                None => default.ok_or_else(|| {
                    LaserError::invalid(format!("{name} needs an argument, e.g. {name}:10"))
                }),
            }
        };
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "generation" | "gen" => Ok(Metric::Generation {
                max_tokens: num(arg, Some(DEFAULT_GENERATION_TOKENS))?,
            }),
            "classification" | "cls" => Ok(Metric::Classification),
            "topk" | "top_k" => Ok(Metric::TopK { k: num(arg, None)? }),
            _ => Err(LaserError::invalid(format!(
                "unknown metric {s:?} (expected generation[:N], classification or topk:K)"
            ))),
        }
    }
}

/// Metric settings shared by every sample of an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalConfig {
    pub metric: Metric,
    /// Also report top-k accuracy for samples whose answer is one token.
    #[serde(default)]
    pub topk: Option<usize>,
    /// Score every paraphrase with the primary metric.
    #[serde(default)]
    pub paraphrases: bool,
    /// Divide candidate scores by their token count.
    #[serde(default)]
    pub length_normalize: bool,
}

impl EvalConfig {
    pub fn new(metric: Metric) -> Self {
        Self {
            metric,
            ..Self::default()
        }
    }
}

/// Whether greedy output contains the answer: a case-insensitive substring
/// test on trimmed text, or a contiguous-subsequence test on ids.
pub fn generation_matches(answer: &Content, generated: &[TokenId]) -> bool {
    match answer {
        Content::Text(a) => {
            let needle = a.trim().to_lowercase();
            ByteTokenizer
                .decode(generated)
                .to_lowercase()
                .contains(&needle)
        }
        Content::Ids(a) => a.is_empty() || generated.windows(a.len()).any(|w| w == a.as_slice()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationOutcome {
    pub correct: bool,
    pub tokens: Vec<TokenId>,
}

/// Greedily generates after `prompt` and checks for `answer`. Generation
/// stops early if it would exceed the model's context.
pub fn generation_accuracy(
    model: &TransformerModel,
    prompt: &[TokenId],
    answer: &Content,
    max_tokens: usize,
) -> Result<GenerationOutcome> {
    if prompt.is_empty() {
        return Err(LaserError::invalid("prompt must be nonempty"));
    }
    let (state, dist) = prefill(model, prompt)?;
    generate_from(model, state, dist, prompt.len(), answer, max_tokens)
}

fn generate_from(
    model: &TransformerModel,
    state: DecodeState<'_>,
    dist: Vec<f64>,
    prompt_len: usize,
    answer: &Content,
    max_tokens: usize,
) -> Result<GenerationOutcome> {
    let room = model.config().max_context + 1 - prompt_len;
    let tokens = greedy_extend(state, dist, max_tokens.min(room))?;
    Ok(GenerationOutcome {
        correct: generation_matches(answer, &tokens),
        tokens,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationOutcome {
    pub correct: bool,
    /// Index of the highest-scoring candidate (lowest index on ties).
    pub predicted: usize,
    /// One score per candidate.
    pub scores: Vec<f64>,
}

/// Scores each candidate continuation by summed (or length-normalized)
/// log-probability. Correct only if the gold candidate is strictly best.
pub fn classification_accuracy(
    model: &TransformerModel,
    prompt: &[TokenId],
    candidates: &[Vec<TokenId>],
    gold: usize,
    length_normalize: bool,
) -> Result<ClassificationOutcome> {
    if prompt.is_empty() {
        return Err(LaserError::invalid("prompt must be nonempty"));
    }
    let (state, dist) = prefill(model, prompt)?;
    classify_from(&state, &dist, candidates, gold, length_normalize)
}

fn classify_from(
    state: &DecodeState<'_>,
    dist: &[f64],
    candidates: &[Vec<TokenId>],
    gold: usize,
    length_normalize: bool,
) -> Result<ClassificationOutcome> {
    if candidates.len() < 2 {
        return Err(LaserError::invalid(
            "classification needs at least two candidates",
        ));
    }
    if gold >= candidates.len() {
        return Err(LaserError::invalid(format!(
            "gold index {gold} out of range for {} candidates",
            candidates.len()
        )));
    }
    let scores = candidates
        .iter()
        .map(|c| {
            if c.is_empty() {
                return Err(LaserError::invalid("empty candidate"));
            }
            let total: f64 = score_continuation(state.clone(), dist.to_vec(), c)?
                .iter()
                .sum();
            Ok(if length_normalize {
                total / c.len() as f64
            } else {
                total
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut predicted = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[predicted] {
            predicted = i;
        }
    }
    let correct = scores
        .iter()
        .enumerate()
        .all(|(i, s)| i == gold || scores[gold] > *s);
    Ok(ClassificationOutcome {
        correct,
        predicted,
        scores,
    })
}

/// The `k` most likely next tokens and whether the one-token `answer` is
/// among them.
pub fn topk_accuracy(
    model: &TransformerModel,
    prompt: &[TokenId],
    answer: &[TokenId],
    k: usize,
) -> Result<(bool, Vec<TokenId>)> {
    if prompt.is_empty() {
        return Err(LaserError::invalid("prompt must be nonempty"));
    }
    check_single_token(answer)?;
    check_k(model, k)?;
    let (_, dist) = prefill(model, prompt)?;
    Ok(topk_from(&dist, answer[0], k))
}

fn check_single_token(answer: &[TokenId]) -> Result<()> {
    if answer.len() != 1 {
        return Err(LaserError::invalid(format!(
            "top-k accuracy needs a single-token answer, got {} tokens; use generation accuracy instead",
            answer.len()
        )));
    }
    Ok(())
}

fn check_k(model: &TransformerModel, k: usize) -> Result<()> {
    let v = model.config().vocab_size;
    if k == 0 || k > v {
        return Err(LaserError::invalid(format!("k = {k} must be in 1..={v}")));
    }
    Ok(())
}

fn topk_from(dist: &[f64], answer: TokenId, k: usize) -> (bool, Vec<TokenId>) {
    let top = topk_indices(dist, k);
    (top.contains(&answer), top)
}

/// Everything recorded about one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub correct: bool,
    /// Mean negative log-probability of the gold answer tokens.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_ids: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paraphrase_correct: Option<Vec<bool>>,
    /// Correct on the original prompt and on every paraphrase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub robust: Option<bool>,
}

struct PromptResult {
    correct: bool,
    generated: Option<Vec<TokenId>>,
    predicted: Option<usize>,
    scores: Option<Vec<f64>>,
    topk: Option<Vec<TokenId>>,
}

fn judge_prompt(
    model: &TransformerModel,
    sample: &QASample,
    prompt: &Content,
    cfg: &EvalConfig,
    want_loss: bool,
) -> Result<(PromptResult, Option<f64>)> {
    let prompt_ids = prompt.prompt_ids();
    if prompt_ids.is_empty() {
        return Err(LaserError::invalid("prompt must be nonempty"));
    }
    let answer = continuation_ids(prompt, &sample.answer);
    let (state, dist) = prefill(model, &prompt_ids)?;
    let loss = if want_loss {
        let lps = score_continuation(state.clone(), dist.clone(), &answer)?;
        Some(-lps.iter().sum::<f64>() / lps.len() as f64)
    } else {
        None
    };
    let result = match cfg.metric {
        Metric::Generation { max_tokens } => {
            let out = generate_from(
                model,
                state,
                dist,
                prompt_ids.len(),
                &sample.answer,
                max_tokens,
            )?;
            PromptResult {
                correct: out.correct,
                generated: Some(out.tokens),
                predicted: None,
                scores: None,
                topk: None,
            }
        }
        Metric::Classification => {
            let gold = sample.answer_index().ok_or_else(|| {
                LaserError::invalid("classification sample has no matching candidate")
            })?;
            let candidates: Vec<Vec<TokenId>> = sample
                .candidates
                .iter()
                .map(|c| continuation_ids(prompt, c))
                .collect();
            let out = classify_from(&state, &dist, &candidates, gold, cfg.length_normalize)?;
            PromptResult {
                correct: out.correct,
                generated: None,
                predicted: Some(out.predicted),
                scores: Some(out.scores),
                topk: None,
            }
        }
        Metric::TopK { k } => {
            check_single_token(&answer)?;
            check_k(model, k)?;
            let (correct, top) = topk_from(&dist, answer[0], k);
            PromptResult {
                correct,
                generated: None,
                predicted: None,
                scores: None,
                topk: Some(top),
            }
        }
    };
    Ok((result, loss))
}

/// Evaluates one sample: loss, primary metric, optional top-k and
/// paraphrase robustness.
pub fn evaluate_sample(
    model: &TransformerModel,
    sample: &QASample,
    cfg: &EvalConfig,
) -> Result<SampleRecord> {
    let inner = || -> Result<SampleRecord> {
        let (main, loss) = judge_prompt(model, sample, &sample.prompt, cfg, true)?;
        let mut record = SampleRecord {
            id: sample.id.clone(),
            correct: main.correct,
            loss: loss.expect("loss requested"),
            generated: match (&sample.prompt, &main.generated) {
                (Content::Text(_), Some(g)) => Some(ByteTokenizer.decode(g)),
                _ => None,
            },
            generated_ids: main.generated,
            predicted: main.predicted,
            scores: main.scores,
            topk: main.topk,
            topk_correct: None,
            paraphrase_correct: None,
            robust: None,
        };
        if let Metric::TopK { .. } = cfg.metric {
            record.topk_correct = Some(record.correct);
        } else if let Some(k) = cfg.topk {
            let answer = sample.answer_ids();
            if answer.len() == 1 {
                let (ok, top) = topk_accuracy(model, &sample.prompt_ids(), &answer, k)?;
                record.topk_correct = Some(ok);
                record.topk = Some(top);
            }
        }
        if cfg.paraphrases && !sample.paraphrases.is_empty() {
            let flags = sample
                .paraphrases
                .iter()
                .map(|p| Ok(judge_prompt(model, sample, p, cfg, false)?.0.correct))
                .collect::<Result<Vec<bool>>>()?;
            record.robust = Some(record.correct && flags.iter().all(|&f| f));
            record.paraphrase_correct = Some(flags);
        }
        Ok(record)
    };
    inner().map_err(|e| e.in_sample(&sample.id))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{Activation, ModelConfig, NormKind};

    fn model() -> TransformerModel {
        TransformerModel::random(
            ModelConfig {
                num_layers: 1,
                hidden_dim: 8,
                num_heads: 2,
                mlp_hidden_dim: 16,
                vocab_size: 12,
                max_context: 10,
                activation: Activation::Relu,
                use_bias: true,
                norm_kind: NormKind::PreLayernorm,
                layer_norm_eps: 1e-5,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn metric_parsing() {
        assert_eq!(
            "generation".parse::<Metric>().unwrap(),
            Metric::Generation { max_tokens: 10 }
        );
        assert_eq!(
            "generation:3".parse::<Metric>().unwrap(),
            Metric::Generation { max_tokens: 3 }
        );
        assert_eq!("topk:5".parse::<Metric>().unwrap(), Metric::TopK { k: 5 });
        assert_eq!(
            "classification".parse::<Metric>().unwrap(),
            Metric::Classification
        );
        assert!("topk".parse::<Metric>().is_err());
        assert!("bleu".parse::<Metric>().is_err());
        let m = Metric::TopK { k: 5 };
        assert_eq!(m.to_string().parse::<Metric>().unwrap(), m);
    }

    #[test]
    fn matching_rules() {
        let gen = ByteTokenizer.encode("  The CAPITAL is Quell.");
        assert!(generation_matches(&Content::Text(" quell ".into()), &gen));
        assert!(!generation_matches(&Content::Text("Paris".into()), &gen));
        assert!(generation_matches(&Content::Ids(vec![2, 3]), &[1, 2, 3, 4]));
        assert!(!generation_matches(
            &Content::Ids(vec![2, 4]),
            &[1, 2, 3, 4]
        ));
    }

    #[test]
    fn topk_and_classification_contracts() {
        let m = model();
        assert!(topk_accuracy(&m, &[1, 2], &[3, 4], 5).is_err());
        let (ok, top) = topk_accuracy(&m, &[1, 2], &[3], 12).unwrap();
        assert!(ok);
        assert_eq!(top.len(), 12);
        // duplicated gold candidate ties with itself, so never correct
        let out = classification_accuracy(&m, &[1, 2], &[vec![3], vec![3]], 0, false).unwrap();
        assert!(!out.correct);
        assert_eq!(out.predicted, 0);
        assert_eq!(out.scores.len(), 2);
    }

    #[test]
    fn generation_respects_context() {
        let m = model();
        let out = generation_accuracy(&m, &[1; 8], &Content::Ids(vec![99]), 10).unwrap();
        assert_eq!(out.tokens.len(), 3);
        assert!(!out.correct);
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSONL question-answer datasets and prompt templates.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LaserError, Result};
use crate::transformer::{ByteTokenizer, TokenId};

/// Text to be tokenized, or token ids supplied directly by an exporter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Content {
    Text(String),
    Ids(Vec<TokenId>),
}

impl Content {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            Content::Text(t) => Some(t),
            Content::Ids(_) => None,
        }
    }

    /// Model input for a prompt: `BOS` + bytes for text, verbatim for ids.
    pub fn prompt_ids(&self) -> Vec<TokenId> {
        match self {
            Content::Text(t) => ByteTokenizer.encode_prompt(t),
            Content::Ids(ids) => ids.clone(),
        }
    }
}

/// Token ids of `answer` as a continuation of `prompt`. A text answer that
/// would otherwise run straight into the last word of the prompt gets a
/// separating space.
pub fn continuation_ids(prompt: &Content, answer: &Content) -> Vec<TokenId> {
    match (prompt, answer) {
        (_, Content::Ids(ids)) => ids.clone(),
        (Content::Text(p), Content::Text(a)) => ByteTokenizer.encode(&continuation_text(p, a)),
        (Content::Ids(_), Content::Text(a)) => ByteTokenizer.encode(a),
    }
}

pub fn continuation_text(prompt: &str, answer: &str) -> String {
    let joined = prompt.is_empty()
        || prompt.ends_with(char::is_whitespace)
        || answer.starts_with(char::is_whitespace);
    if joined {
        answer.to_owned()
    } else {
        format!(" {answer}")
    }
}

/// One evaluation item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub id: String,
    pub prompt: Content,
    pub answer: Content,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paraphrases: Vec<Content>,
    /// Answer options for classification; empty for free generation.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<Content>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    /// Surface form of the answer used for corpus statistics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_text: Option<String>,
}

impl QASample {
    pub fn is_classification(&self) -> bool {
        !self.candidates.is_empty()
    }

    pub fn prompt_ids(&self) -> Vec<TokenId> {
        self.prompt.prompt_ids()
    }

    pub fn answer_ids(&self) -> Vec<TokenId> {
        continuation_ids(&self.prompt, &self.answer)
    }

    /// Index of the gold answer among the candidates.
    pub fn answer_index(&self) -> Option<usize> {
        self.candidates.iter().position(|c| c == &self.answer)
    }
}

/// Prompt construction applied while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    #[default]
    Raw,
    Counterfact,
    Hotpot,
    Fever,
    BiosGender,
    BiosProfession,
    Epistemic,
    Truthfulqa,
    WikidataQa,
}

const PROFESSIONS: [&str; 8] = [
    "journalist",
    "poet",
    "composer",
    "model",
    "teacher",
    "architect",
    "painter",
    "professor",
];

impl Template {
    pub const ALL: [Template; 9] = [
        Template::Raw,
        Template::Counterfact,
        Template::Hotpot,
        Template::Fever,
        Template::BiosGender,
        Template::BiosProfession,
        Template::Epistemic,
        Template::Truthfulqa,
        Template::WikidataQa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Template::Raw => "raw",
            Template::Counterfact => "counterfact",
            Template::Hotpot => "hotpot",
            Template::Fever => "fever",
            Template::BiosGender => "bios_gender",
            Template::BiosProfession => "bios_profession",
            Template::Epistemic => "epistemic",
            Template::Truthfulqa => "truthfulqa",
            Template::WikidataQa => "wikidata_qa",
        }
    }

    /// Candidates used when a record does not list its own.
    pub fn default_candidates(self) -> Vec<String> {
        let list: &[&str] = match self {
            Template::Fever | Template::Truthfulqa => &["true", "false"],
            Template::BiosGender => &["male", "female"],
            Template::BiosProfession => &PROFESSIONS,
            Template::Epistemic => &["entailment", "non-entailment"],
            _ => &[],
        };
        list.iter().map(|s| s.to_string()).collect()
    }

    /// Wraps a raw question (and, for truthfulqa, a statement) into a prompt.
    pub fn render(self, text: &str, statement: Option<&str>) -> Result<String> {
        Ok(match self {
            Template::Raw | Template::Counterfact | Template::Epistemic | Template::WikidataQa => {
                text.to_owned()
            }
            Template::Hotpot => {
                let t = text.trim_end();
                if t.ends_with('?') || t.ends_with('.') {
                    format!("{t} The answer is")
                } else {
                    format!("{t}? The answer is")
                }
            }
            Template::Fever => {
                format!("Consider the following claim: {text}. Is this claim true or false. The claim is")
            }
            Template::BiosGender => format!(
                "Consider the following text: {text}. Is the person in this text male or female? The person is"
            ),
            Template::BiosProfession => format!(
                "Consider the following text: {text}. What is the profession of the person in this text? The profession of this person is"
            ),
            Template::Truthfulqa => {
                let s = statement
                    .ok_or_else(|| LaserError::invalid("truthfulqa records need a \"statement\" field"))?
                    .trim_end();
                let stop = if s.ends_with('.') { "" } else { "." };
                format!("{text} {s}{stop} Is this statement true or false. This statement is")
            }
        })
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Template {
    type Err = LaserError;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Template::ALL
            .into_iter()
            .find(|t| t.as_str() == key)
            .ok_or_else(|| {
                let names: Vec<_> = Template::ALL.iter().map(|t| t.as_str()).collect();
                LaserError::invalid(format!(
                    "unknown template {s:?} (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<Value>,
    #[serde(
        default,
        alias = "question",
        alias = "claim",
        alias = "bio",
        alias = "text"
    )]
    prompt: Option<String>,
    #[serde(default)]
    statement: Option<String>,
    #[serde(default, alias = "label", alias = "target")]
    answer: Option<Value>,
    #[serde(default)]
    paraphrases: Vec<String>,
    #[serde(default)]
    candidates: Option<Vec<Value>>,
    #[serde(default)]
    frequency: Option<u64>,
    #[serde(default)]
    subject: Option<String>,
    #[serde(default)]
    answer_text: Option<String>,
    #[serde(default)]
    prompt_ids: Option<Vec<TokenId>>,
    #[serde(default)]
    answer_ids: Option<Vec<TokenId>>,
    #[serde(default)]
    paraphrases_ids: Vec<Vec<TokenId>>,
    #[serde(default)]
    candidates_ids: Option<Vec<Vec<TokenId>>>,
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn build_sample(
    raw: RawRecord,
    line: usize,
    template: Template,
) -> std::result::Result<QASample, String> {
    let id = match &raw.id {
        None => format!("{line:06}"),
        Some(v) => scalar_text(v).ok_or("id must be a string or number")?,
    };
    if let Some(prompt_ids) = raw.prompt_ids {
        let answer_ids = raw
            .answer_ids
            .ok_or("ids-mode record is missing \"answer_ids\"")?;
        if prompt_ids.is_empty() || answer_ids.is_empty() {
            return Err("prompt_ids and answer_ids must be nonempty".into());
        }
        let sample = QASample {
            id,
            prompt: Content::Ids(prompt_ids),
            answer: Content::Ids(answer_ids),
            paraphrases: raw.paraphrases_ids.into_iter().map(Content::Ids).collect(),
            candidates: raw
                .candidates_ids
                .unwrap_or_default()
                .into_iter()
                .map(Content::Ids)
                .collect(),
            frequency: raw.frequency,
            subject: raw.subject,
            answer_text: raw.answer_text,
        };
        return check_candidates(sample);
    }
    let prompt = raw
        .prompt
        .ok_or("record has neither \"prompt\" nor \"prompt_ids\"")?;
    let answer = raw
        .answer
        .as_ref()
        .and_then(scalar_text)
        .ok_or("record is missing a string \"answer\"")?;
    if answer.trim().is_empty() {
        return Err("answer is empty".into());
    }
    let render = |t: &str| {
        template
            .render(t, raw.statement.as_deref())
            .map_err(|e| e.to_string())
    };
    let candidates = match raw.candidates {
        Some(list) => list
            .iter()
            .map(|v| scalar_text(v).ok_or("candidates must be strings"))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        None => template.default_candidates(),
    };
    let answer = if candidates.is_empty() {
        answer
    } else {
        // class labels compare case-insensitively against the candidate list
        candidates
            .iter()
            .find(|c| c.trim().eq_ignore_ascii_case(answer.trim()))
            .cloned()
            .unwrap_or(answer)
    };
    let sample = QASample {
        id,
        prompt: Content::Text(render(&prompt)?),
        answer_text: raw.answer_text.or_else(|| Some(answer.clone())),
        answer: Content::Text(answer),
        paraphrases: raw
            .paraphrases
            .iter()
            .map(|p| render(p).map(Content::Text))
            .collect::<std::result::Result<_, _>>()?,
        candidates: candidates.into_iter().map(Content::Text).collect(),
        frequency: raw.frequency,
        subject: raw.subject,
    };
    check_candidates(sample)
}

fn check_candidates(sample: QASample) -> std::result::Result<QASample, String> {
    if sample.is_classification() && sample.answer_index().is_none() {
        return Err("answer is not among the candidates".into());
    }
    Ok(sample)
}

/// Parses JSONL text. `source` is only used in error messages.
pub fn parse_dataset(text: &str, template: Template, source: &Path) -> Result<Vec<QASample>> {
    let err = |line: usize, message: String| LaserError::Dataset {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut samples = Vec::new();
    let mut claims: BTreeMap<String, (Vec<usize>, Vec<String>)> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(lineno, e.to_string()))?;
        let claim = raw.prompt.clone();
        let sample = build_sample(raw, lineno, template).map_err(|m| err(lineno, m))?;
        if let (Template::Fever, Some(claim), Content::Text(label)) =
            (template, claim, &sample.answer)
        {
            let entry = claims.entry(claim).or_default();
            entry.0.push(samples.len());
            entry.1.push(label.trim().to_lowercase());
        }
        samples.push(sample);
    }
    if template == Template::Fever {
        // a claim listed with contradicting labels is dropped entirely
        let mut drop = vec![false; samples.len()];
        for (indices, labels) in claims.values() {
            if labels.iter().any(|l| l != &labels[0]) {
                indices.iter().for_each(|&i| drop[i] = true);
            }
        }
        let mut keep = drop.iter().map(|d| !d);
        samples.retain(|_| keep.next().unwrap());
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &samples {
        if !seen.insert(s.id.as_str()) {
            return Err(LaserError::Dataset {
                path: source.to_path_buf(),
                line: 0,
                message: format!("duplicate sample id {:?}", s.id),
            });
        }
    }
    Ok(samples)
}

pub fn load_dataset(path: impl AsRef<Path>, template: Template) -> Result<Vec<QASample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| LaserError::io(path, e))?;
    parse_dataset(&text, template, path)
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: a JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use laser_core::eval::{EvalConfig, Metric, Template};
use laser_core::laser::{Method, Objective, SearchConfig, DEFAULT_RHO_GRID};
use laser_core::transformer::MatrixType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Settings shared by every subcommand. Anything left unset falls back to
/// the `--config` file, then to built-in defaults.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// LTC checkpoint.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// JSONL dataset.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Prompt template applied while loading the dataset.
    #[arg(long)]
    #[serde(with = "opt_from_str")]
    pub template: Option<Template>,
    /// generation[:N], classification or topk:K.
    #[arg(long)]
    pub metric: Option<String>,
    /// Also report top-k accuracy for one-token answers.
    #[arg(long)]
    pub topk: Option<usize>,
    /// Score paraphrases and report robustness.
    #[arg(long)]
    pub paraphrases: Option<bool>,
    /// Length-normalize classification scores.
    #[arg(long)]
    pub length_normalize: Option<bool>,
    /// Comma-separated retained-rank fractions.
    #[arg(long, value_delimiter = ',')]
    pub rho_grid: Option<Vec<f64>>,
    /// Comma-separated matrix types (wq, wk, wv, wo, u_in, u_out).
    #[arg(long, value_delimiter = ',', value_parser = parse_tau)]
    pub tau_set: Option<Vec<MatrixType>>,
    /// Comma-separated layers or ranges such as `0-3`.
    #[arg(long, value_parser = parse_layers)]
    #[serde(with = "opt_layers")]
    pub layers: Option<Layers>,
    /// accuracy or neg_loss.
    #[arg(long)]
    #[serde(with = "opt_from_str")]
    pub objective: Option<Objective>,
    /// svd_truncate, high_order_keep, magnitude_prune or remove_layer.
    #[arg(long)]
    #[serde(with = "opt_from_str")]
    pub method: Option<Method>,
    /// Split seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Corpus (directory of text files or JSONL with a `text` field).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Sliding-window stride for corpus perplexity.
    #[arg(long)]
    pub perplexity_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layers(pub Vec<usize>);

fn parse_tau(s: &str) -> Result<MatrixType, String> {
    s.parse().map_err(|e: laser_core::LaserError| e.to_string())
}

fn parse_layers(s: &str) -> Result<Layers, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad layer {t:?}"))
        };
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty layer range {part}"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    Ok(Layers(out))
}

mod opt_from_str {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<T: Serialize, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
        v.serialize(s)
    }

    /// Accepts the serde form or any spelling understood by `FromStr`.
    pub fn deserialize<'de, T, D>(d: D) -> Result<Option<T>, D::Error>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
        D: Deserializer<'de>,
    {
        Option::<String>::deserialize(d)?
            .map(|s| s.parse().map_err(serde::de::Error::custom))
            .transpose()
    }
}

mod opt_layers {
    use super::Layers;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Layers>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(l) => s.collect_seq(&l.0),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Layers>, D::Error> {
        Ok(Option::<Vec<usize>>::deserialize(d)?.map(Layers))
    }
}

macro_rules! overlay {
    ($dst:expr, $src:expr; $($f:ident),*) => {
        $( if $dst.$f.is_none() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    /// Flags take precedence over the file.
    pub fn resolve(mut self, file: Option<&Path>) -> Result<Self> {
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let from_file: RunConfig = serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?;
            overlay!(self, from_file; model, dataset, template, metric, topk, paraphrases,
                length_normalize, rho_grid, tau_set, layers, objective, method, seed, threads,
                out, corpus, perplexity_stride);
        }
        Ok(self)
    }

    pub fn model(&self) -> Result<&Path> {
        existing(self.model.as_deref(), "--model")
    }

    pub fn dataset(&self) -> Result<&Path> {
        existing(self.dataset.as_deref(), "--dataset")
    }

    pub fn corpus(&self) -> Result<Option<&Path>> {
        self.corpus
            .as_deref()
            .map(|p| existing(Some(p), "--corpus"))
            .transpose()
    }

    pub fn out(&self) -> Result<&Path> {
        self.out.as_deref().context("missing --out")
    }

    pub fn template(&self) -> Template {
        self.template.unwrap_or_default()
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn threads(&self) -> usize {
        self.threads.unwrap_or(0)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        let metric: Metric = match &self.metric {
            Some(m) => m.parse()?,
            None => Metric::default(),
        };
        Ok(EvalConfig {
            metric,
            topk: self.topk,
            paraphrases: self.paraphrases.unwrap_or(false),
            length_normalize: self.length_normalize.unwrap_or(false),
        })
    }

    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            rho_grid: self
                .rho_grid
                .clone()
                .unwrap_or_else(|| DEFAULT_RHO_GRID.to_vec()),
            tau_set: self
                .tau_set
                .clone()
                .unwrap_or_else(|| vec![MatrixType::Uin, MatrixType::Uout]),
            layers: self.layers.as_ref().map(|l| l.0.clone()),
            objective: self.objective.unwrap_or_default(),
            method: self.method.unwrap_or_default(),
        }
    }

    /// SHA-256 over every setting that can change results. Paths, the
    /// output directory and the thread count are excluded.
    pub fn hash(&self, extra: &serde_json::Value) -> Result<String> {
        let canonical = serde_json::json!({
            "template": self.template(),
            "eval": self.eval()?,
            "search": self.search(),
            "seed": self.seed(),
            "perplexity_stride": self.perplexity_stride,
            "extra": extra,
        });
        Ok(hex::encode(Sha256::digest(
            canonical.to_string().as_bytes(),
        )))
    }
}

fn existing<'a>(path: Option<&'a Path>, flag: &str) -> Result<&'a Path> {
    let path = path.with_context(|| format!("missing {flag}"))?;
    if !path.exists() {
        bail!("{flag} {} does not exist", path.display());
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_ranges() {
        assert_eq!(parse_layers("0-2,5").unwrap(), Layers(vec![0, 1, 2, 5]));
        assert!(parse_layers("3-1").is_err());
        assert!(parse_layers("x").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.json");
        std::fs::write(
            &file,
            r#"{"seed": 4, "metric": "topk:3", "tau_set": ["u_in"], "template": "fever", "layers": [1]}"#,
        )
        .unwrap();
        let flags = RunConfig {
            seed: Some(9),
            ..RunConfig::default()
        };
        let cfg = flags.resolve(Some(&file)).unwrap();
        assert_eq!(cfg.seed(), 9);
        assert_eq!(cfg.eval().unwrap().metric, Metric::TopK { k: 3 });
        assert_eq!(cfg.template(), Template::Fever);
        assert_eq!(cfg.search().tau_set, vec![MatrixType::Uin]);
        assert_eq!(cfg.search().layers, Some(vec![1]));
        std::fs::write(&file, r#"{"sed": 4}"#).unwrap();
        assert!(RunConfig::default().resolve(Some(&file)).is_err());
    }

    #[test]
    fn hash_ignores_paths_and_threads() {
        let a = RunConfig::default();
        let b = RunConfig {
            model: Some("x.ltc".into()),
            threads: Some(8),
            out: Some("o".into()),
            ..RunConfig::default()
        };
        let extra = serde_json::Value::Null;
        assert_eq!(a.hash(&extra).unwrap(), b.hash(&extra).unwrap());
        let c = RunConfig {
            seed: Some(1),
            ..RunConfig::default()
        };
        assert_ne!(a.hash(&extra).unwrap(), c.hash(&extra).unwrap());
    }
}

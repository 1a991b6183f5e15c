// SPDX-License-Identifier: MIT OR Apache-2.0

//! Output files. Every file carries the run's config hash, model hash and
//! seed, and is written to a temporary name then renamed.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use laser_core::container::write_atomic;
use laser_core::eval::EvalReport;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct RunInfo {
    pub command: &'static str,
    pub version: &'static str,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_hash: Option<String>,
    pub seed: u64,
}

pub struct Outputs {
    dir: PathBuf,
    pub run: RunInfo,
}

#[derive(Serialize)]
struct Wrapped<'a, T: Serialize> {
    run: &'a RunInfo,
    result: &'a T,
}

impl Outputs {
    pub fn new(dir: &Path, run: RunInfo) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            run,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn bytes(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(())
    }

    /// `{"run": ..., "result": value}`, pretty-printed.
    pub fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&Wrapped {
            run: &self.run,
            result: value,
        })?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    /// CSV body preceded by `# key=value` provenance lines.
    pub fn csv(&self, name: &str, body: &str) -> Result<()> {
        let mut text = format!(
            "# config_hash={}\n# model_hash={}\n# seed={}\n",
            self.run.config_hash,
            self.run.model_hash.as_deref().unwrap_or(""),
            self.run.seed
        );
        text.push_str(body);
        self.bytes(name, text.as_bytes())
    }

    /// `<stem>.json` and `<stem>.csv`, stamped with this run's hashes.
    pub fn report(&self, stem: &str, report: &mut EvalReport) -> Result<()> {
        report.metadata.config_hash = Some(self.run.config_hash.clone());
        report.metadata.seed = Some(self.run.seed);
        self.bytes(&format!("{stem}.json"), report.to_json().as_bytes())?;
        self.bytes(&format!("{stem}.csv"), report.to_csv().as_bytes())
    }
}

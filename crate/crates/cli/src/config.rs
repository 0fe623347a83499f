//! Experiment configuration and run manifests.
//!
//! One TOML file describes a whole experiment: the `[dataset]` section feeds
//! `generate`, the `[train]` section is the core training configuration used
//! verbatim by `train` and `ablate`. Every command that produces artifacts
//! drops a `manifest.json` into its output directory *before* doing any long
//! computation, so an interrupted run can always be identified and re-run; the
//! manifest records the resolved configuration, the dataset fingerprint, and
//! the source revision, which together pin the outputs under fixed seeds.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use cycden_core::trainer::TrainConfig;
use cycden_core::{DoseFraction, Error, Result};
use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;

/// What `generate` builds: case count, split sizes, geometry, dose levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_cases: usize,
    /// Cases held out for validation (taken after the training block).
    pub n_val: usize,
    /// Cases held out for testing (taken from the end).
    pub n_test: usize,
    /// Volume shape `(nz, ny, nx)`.
    pub shape: [usize; 3],
    /// Dose levels to simulate, e.g. `["1/4", "1/10"]`.
    pub fractions: Vec<String>,
    /// Expected counts per unit activity at full dose.
    pub counts_per_unit: f64,
    pub tumors_per_case: usize,
    pub tumor_contrast: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_cases: 12,
            n_val: 2,
            n_test: 2,
            shape: [32, 64, 64],
            fractions: vec!["1/4".to_string()],
            counts_per_unit: 60.0,
            tumors_per_case: 2,
            tumor_contrast: 2.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    /// Checks counts and split arithmetic; parses every dose label.
    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::InvalidArgument("n_cases must be positive".into()));
        }
        if self.n_val + self.n_test > self.n_cases {
            return Err(Error::InvalidArgument(format!(
                "splits need n_val + n_test <= n_cases, got {} + {} > {}",
                self.n_val, self.n_test, self.n_cases
            )));
        }
        if self.shape.iter().any(|&d| d < 8) {
            return Err(Error::InvalidArgument(format!(
                "volume shape {:?} has a dimension below 8",
                self.shape
            )));
        }
        if self.fractions.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one dose fraction is required".into(),
            ));
        }
        for f in &self.fractions {
            DoseFraction::parse(f)?;
        }
        if !(self.counts_per_unit > 0.0) || !self.counts_per_unit.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "counts_per_unit {} must be positive",
                self.counts_per_unit
            )));
        }
        if !(self.tumor_contrast > 0.0) || !self.tumor_contrast.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "tumor_contrast {} must be positive",
                self.tumor_contrast
            )));
        }
        Ok(())
    }

    /// Parsed dose levels in declaration order.
    pub fn parsed_fractions(&self) -> Result<Vec<DoseFraction>> {
        self.fractions.iter().map(|f| DoseFraction::parse(f)).collect()
    }

    /// Split of case index `i`: the leading block trains, then val, then test.
    pub fn split_of(&self, i: usize) -> Split {
        let n_train = self.n_cases - self.n_val - self.n_test;
        if i < n_train {
            Split::Train
        } else if i < n_train + self.n_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Dataset split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// Top-level experiment description; all sections have working defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Experiment identifier; derived from the command and seed when empty.
    pub id: String,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    /// Loads a TOML file, or returns defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<ExperimentConfig> {
        let Some(path) = path else {
            return Ok(ExperimentConfig::default());
        };
        if !path.is_file() {
            return Err(Error::InvalidArgument(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| {
            Error::InvalidArgument(format!("config {}: {e}", path.display()))
        })
    }

    /// The effective experiment id for a given command.
    pub fn resolved_id(&self, command: &str, seed: u64) -> String {
        if self.id.is_empty() {
            format!("{command}-seed{seed}")
        } else {
            self.id.clone()
        }
    }
}

/// Provenance record written into every output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub format: String,
    pub id: String,
    pub command: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Source revision the binary was run from, or `"unknown"`.
    pub revision: String,
    /// Content hash of the dataset the command consumed or produced.
    pub dataset_fingerprint: Option<String>,
    /// Resolved training configuration, for commands that train.
    pub train: Option<TrainConfig>,
    /// Logical name -> path relative to the manifest's directory.
    pub layout: BTreeMap<String, String>,
}

pub const MANIFEST_FORMAT: &str = "cycden-manifest-v1";

impl ExperimentManifest {
    pub fn new(id: String, command: &str, seed: u64, deterministic: bool) -> ExperimentManifest {
        ExperimentManifest {
            format: MANIFEST_FORMAT.to_string(),
            id,
            command: command.to_string(),
            seed,
            deterministic,
            revision: source_revision(),
            dataset_fingerprint: None,
            train: None,
            layout: BTreeMap::new(),
        }
    }

    /// Writes `manifest.json` under `dir` (atomically).
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))?;
        text.push('\n');
        write_atomic(&dir.join("manifest.json"), text.as_bytes())
    }
}

/// Best-effort source revision: `CYCDEN_REVISION` env, then `git rev-parse`.
pub fn source_revision() -> String {
    if let Ok(rev) = std::env::var("CYCDEN_REVISION") {
        if !rev.trim().is_empty() {
            return rev.trim().to_string();
        }
    }
    let out = Command::new("git")
        .args(["rev-parse", "--short=12", "HEAD"])
        .output();
    match out {
        Ok(o) if o.status.success() => String::from_utf8_lossy(&o.stdout).trim().to_string(),
        _ => "unknown".to_string(),
    }
}

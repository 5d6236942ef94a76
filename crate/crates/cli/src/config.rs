use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pamsurv::deepnet::TrainConfig;
use pamsurv::pam::{SmoothBasis, StructuredSpec};
use pamsurv::ped::CutStrategy;
use pamsurv::synth::SimConfig;
use pamsurv::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Km,
    PamBaseline,
    PamCorrect,
    Deeppam,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::Km,
        ModelKind::PamBaseline,
        ModelKind::PamCorrect,
        ModelKind::Deeppam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Km => "km",
            ModelKind::PamBaseline => "pam_baseline",
            ModelKind::PamCorrect => "pam_correct",
            ModelKind::Deeppam => "deeppam",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model '{s}'")))
    }
}

fn default_spec() -> StructuredSpec {
    StructuredSpec::with_baseline(SmoothBasis::default())
        .linear("x1")
        .linear("x2")
}

/// Everything needed to run the benchmark. Every field has a default, so a
/// config file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub train: TrainConfig,
    /// Structured part shared by `pam_baseline` and `deeppam`; `pam_correct` adds the class dummies.
    pub spec: StructuredSpec,
    pub cuts: CutStrategy<f64>,
    pub n_replicates: usize,
    pub output_dir: PathBuf,
    pub models: Vec<ModelKind>,
    /// Also write each replicate's simulated dataset (clouds included) to disk.
    pub save_datasets: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            spec: default_spec(),
            cuts: CutStrategy::EventTimes,
            n_replicates: 10,
            output_dir: PathBuf::from("results"),
            models: ModelKind::ALL.to_vec(),
            save_datasets: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_replicates == 0 {
            return Err(Error::Config("n_replicates must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(Error::Config("no models selected".into()));
        }
        self.sim.validate()?;
        self.train.validate()?;
        self.spec.validate()
    }

    /// Model list in canonical order without duplicates.
    pub fn model_list(&self) -> Vec<ModelKind> {
        let mut m = self.models.clone();
        m.sort();
        m.dedup();
        m
    }
}

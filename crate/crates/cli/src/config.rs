//! Experiment configuration documents.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fgdi_core::evalkit::Protocol;
use fgdi_core::losses::ApnVariant;
use fgdi_core::pipeline::ablation::AblationArm;
use fgdi_core::pipeline::{StagePlan, TrainConfig};
use fgdi_core::synthdata::DataConfig;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Overrides applied on top of `train` before any sweep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToggleOverrides {
    pub three_stage: Option<bool>,
    pub domain_prompts: Option<bool>,
    pub grl: Option<bool>,
    pub apn: Option<bool>,
    pub apn_variant: Option<ApnVariant>,
    pub beta: Option<f64>,
    pub init_epochs: Option<usize>,
}

impl ToggleOverrides {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        if self.three_stage == Some(false) {
            cfg.plan.initial_epochs = 0;
        }
        if self.domain_prompts == Some(false) {
            cfg.plan.domain_token_epochs = 0;
            cfg.weights.alpha = 0.0;
            cfg.grl = false;
        }
        if let Some(g) = self.grl {
            cfg.grl = g;
        }
        if let Some(v) = self.apn_variant {
            cfg.weights.apn_variant = v;
        }
        if let Some(b) = self.beta {
            cfg.weights.beta = b;
        }
        if self.apn == Some(false) {
            cfg.weights.beta = 0.0;
            if cfg.weights.apn_variant == ApnVariant::Apnce {
                cfg.weights.apn_variant = ApnVariant::Euclidean;
            }
        }
        if let Some(e) = self.init_epochs {
            cfg.plan.initial_epochs = e;
        }
    }
}

/// Which grids `ablate` runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub arms: Vec<AblationArm>,
    pub betas: Vec<f64>,
    pub init_epochs: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            arms: AblationArm::ALL.to_vec(),
            betas: Vec::new(),
            init_epochs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_protocol")]
    pub protocol: Protocol,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Each seed drives both the synthetic family and training.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub toggles: ToggleOverrides,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_protocol() -> Protocol {
    Protocol::P1
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            protocol: default_protocol(),
            out_dir: None,
            seeds: default_seeds(),
            toggles: ToggleOverrides::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// A malformed or invalid configuration document.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(ConfigError(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            bail!(ConfigError("seeds must not be empty".into()));
        }
        self.data.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.resolved_train(self.seeds[0])
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        for &b in &self.sweep.betas {
            if !(0.0..=1.0).contains(&b) {
                bail!(ConfigError(format!("sweep beta {b} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Applies command-line overrides.
    pub fn with_flags(mut self, seed: Option<u64>, full_epochs: bool) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if full_epochs {
            self.train.plan = StagePlan::default();
        }
        self
    }

    /// Training config for one seed with the toggles applied.
    pub fn resolved_train(&self, seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = seed;
        self.toggles.apply(&mut cfg);
        cfg
    }

    pub fn data_for(&self, seed: u64) -> DataConfig {
        DataConfig {
            seed,
            ..self.data.clone()
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

//! Three-stage training: image-encoder warm-up, prompt learning (identity
//! tokens, then domain tokens) and image-encoder fine-tuning guided by the
//! learned prompts.

pub mod ablation;
pub mod checkpoint;
mod stages;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoders::{EncoderConfig, EncoderError, Model, ParamGroup};
use crate::losses::{LossError, LossWeights};
use crate::optim::AdamConfig;
use crate::rng;
use crate::synthdata::{DataError, DatasetSplit, LabelSpace};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use stages::{run_stage_finetune, run_stage_initial, run_stage_prompt};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("non-finite {component} in stage {stage} phase {phase} epoch {epoch}")]
    NonFinite {
        stage: &'static str,
        phase: &'static str,
        epoch: usize,
        component: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Epoch budget per stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub initial_epochs: usize,
    pub id_token_epochs: usize,
    pub domain_token_epochs: usize,
    pub finetune_epochs: usize,
}

impl StagePlan {
    /// The full-length schedule.
    pub const PAPER: StagePlan = StagePlan {
        initial_epochs: 3,
        id_token_epochs: 120,
        domain_token_epochs: 30,
        finetune_epochs: 60,
    };
    /// Proportionally shortened schedule for quick runs.
    pub const DESK: StagePlan = StagePlan {
        initial_epochs: 3,
        id_token_epochs: 40,
        domain_token_epochs: 10,
        finetune_epochs: 20,
    };
    /// Full-length schedule with the initial epochs taken out of the other stages.
    pub const BALANCED: StagePlan = StagePlan {
        initial_epochs: 3,
        id_token_epochs: 96,
        domain_token_epochs: 24,
        finetune_epochs: 57,
    };

    /// Stages with a nonzero budget, joined as in [`TrainedModel::stage_label`].
    pub fn label(&self) -> String {
        StageTag::ALL
            .iter()
            .filter(|t| t.epochs(self) > 0)
            .map(|t| t.key())
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn total(&self) -> usize {
        self.initial_epochs + self.id_token_epochs + self.domain_token_epochs + self.finetune_epochs
    }
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::PAPER
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub plan: StagePlan,
    pub weights: LossWeights,
    /// Identities per batch.
    pub p: usize,
    /// Images per identity in a batch.
    pub k: usize,
    /// Step size for the image encoder.
    pub lr_encoder: f64,
    /// Step size for the freshly initialized identity classifier.
    pub lr_id_head: f64,
    /// Step size for identity and domain tokens.
    pub lr_prompt: f64,
    pub lr_domain_head: f64,
    /// Final step size as a fraction of the initial one.
    pub lr_floor: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Route identity-prompt features through gradient reversal before the
    /// domain classifier.
    pub grl: bool,
    pub grl_lambda: f64,
    /// Include the domain cross-entropy while learning domain tokens.
    pub domain_loss_on_domain_tokens: bool,
    /// Let the inverse temperature train along with the image encoder.
    pub train_scale: bool,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            plan: StagePlan::DESK,
            weights: LossWeights::default(),
            p: 8,
            k: 4,
            lr_encoder: 5e-5,
            lr_id_head: 5e-4,
            lr_prompt: 3e-4,
            lr_domain_head: 3e-4,
            lr_floor: 0.01,
            adam: AdamConfig::default(),
            seed: 0,
            grl: true,
            grl_lambda: 1.0,
            domain_loss_on_domain_tokens: true,
            train_scale: false,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.encoder.validate()?;
        if self.p < 2 || self.k < 2 {
            return Err(PipelineError::Config(format!(
                "P and K must both be at least 2, got P={} K={}",
                self.p, self.k
            )));
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_id_head", self.lr_id_head),
            ("lr_prompt", self.lr_prompt),
            ("lr_domain_head", self.lr_domain_head),
            ("grl_lambda", self.grl_lambda),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(PipelineError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(PipelineError::Config("lr_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Training stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Initial,
    PromptIds,
    PromptDomains,
    Finetune,
}

impl StageTag {
    pub const ALL: [StageTag; 4] = [
        StageTag::Initial,
        StageTag::PromptIds,
        StageTag::PromptDomains,
        StageTag::Finetune,
    ];

    /// Parameter groups the stage is allowed to change.
    pub fn update_groups(self) -> &'static [ParamGroup] {
        match self {
            StageTag::Initial | StageTag::Finetune => &[ParamGroup::ImageEncoder, ParamGroup::IdHead],
            StageTag::PromptIds => &[ParamGroup::IdTokens, ParamGroup::DomainClassifier],
            StageTag::PromptDomains => &[ParamGroup::DomainTokens, ParamGroup::DomainClassifier],
        }
    }

    pub fn epochs(self, plan: &StagePlan) -> usize {
        match self {
            StageTag::Initial => plan.initial_epochs,
            StageTag::PromptIds => plan.id_token_epochs,
            StageTag::PromptDomains => plan.domain_token_epochs,
            StageTag::Finetune => plan.finetune_epochs,
        }
    }

    /// Identifier used in labels and file names.
    pub fn key(self) -> &'static str {
        match self {
            StageTag::Initial => "initial",
            StageTag::PromptIds => "prompt_ids",
            StageTag::PromptDomains => "prompt_domains",
            StageTag::Finetune => "finetune",
        }
    }

    pub fn stage_name(self) -> &'static str {
        match self {
            StageTag::Initial => "initial",
            StageTag::PromptIds | StageTag::PromptDomains => "prompt",
            StageTag::Finetune => "finetune",
        }
    }

    pub fn phase_name(self) -> &'static str {
        match self {
            StageTag::PromptIds => "A",
            StageTag::PromptDomains => "B",
            _ => "-",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageTag,
    pub epochs: usize,
    pub config_hash: String,
}

/// Model parameters plus the label space they were trained on and the stages
/// that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub labels: LabelSpace,
    pub provenance: Vec<StageRecord>,
}

impl TrainedModel {
    /// Fresh parameters for the label space of `data`.
    pub fn init(cfg: &TrainConfig, data: &DatasetSplit) -> Result<Self> {
        let labels = data.label_space();
        if labels.num_domains() == 0 || labels.num_pids() < 2 {
            return Err(PipelineError::Config(
                "training needs at least two identities and one source domain".into(),
            ));
        }
        let mut r = rng::stream(cfg.seed, &[rng::tag("init")]);
        let model = Model::init(cfg.encoder, labels.num_pids(), labels.num_domains(), &mut r)?;
        Ok(Self {
            model,
            labels,
            provenance: Vec::new(),
        })
    }

    pub fn last_stage(&self) -> Option<StageTag> {
        self.provenance.iter().map(|r| r.stage).max()
    }

    pub fn has_stage(&self, stage: StageTag) -> bool {
        self.provenance.iter().any(|r| r.stage == stage)
    }

    /// Human-readable summary of the stages that ran, e.g. `initial+prompt_ids+finetune`.
    pub fn stage_label(&self) -> String {
        if self.provenance.is_empty() {
            return "untrained".into();
        }
        self.provenance
            .iter()
            .map(|r| r.stage.key())
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Errors unless `data` has the label space this model was built for.
    pub fn check_compatible(&self, data: &DatasetSplit) -> Result<()> {
        let labels = data.label_space();
        if labels.pids != self.labels.pids {
            return Err(PipelineError::Checkpoint(format!(
                "model has {} identity classes, dataset has {}",
                self.labels.num_pids(),
                labels.num_pids()
            )));
        }
        if labels.domain_class != self.labels.domain_class
            || labels.home_domain_class != self.labels.home_domain_class
        {
            return Err(PipelineError::Checkpoint(
                "dataset source domains differ from the model's".into(),
            ));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub stage: String,
    pub phase: String,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_components: BTreeMap<String, f64>,
    pub lr: f64,
    pub seed: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<MetricRecord>,
}

impl MetricLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| PipelineError::Config(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn final_record(&self, stage: &str) -> Option<&MetricRecord> {
        self.records.iter().rev().find(|r| r.stage == stage)
    }
}

/// Runtime options that do not affect the numerical result.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Record elapsed milliseconds per epoch; zero is written otherwise.
    pub record_wall_time: bool,
    /// Called after every epoch.
    pub on_epoch: Option<&'a mut dyn FnMut(&MetricRecord)>,
    /// Called after every completed stage with the model as it stands.
    pub on_stage: Option<&'a mut dyn FnMut(StageTag, &TrainedModel) -> Result<()>>,
}

/// Shared per-epoch bookkeeping for the stage loops.
pub(crate) struct EpochMeter {
    start: Option<Instant>,
    sums: BTreeMap<String, f64>,
    total: f64,
    batches: usize,
}

impl EpochMeter {
    pub(crate) fn new(record_wall_time: bool) -> Self {
        Self {
            start: record_wall_time.then(Instant::now),
            sums: BTreeMap::new(),
            total: 0.0,
            batches: 0,
        }
    }

    pub(crate) fn add(
        &mut self,
        tag: StageTag,
        epoch: usize,
        total: f64,
        parts: &[(&str, f64)],
    ) -> Result<()> {
        for &(name, v) in parts.iter().chain(&[("total", total)]) {
            if !v.is_finite() {
                return Err(PipelineError::NonFinite {
                    stage: tag.stage_name(),
                    phase: tag.phase_name(),
                    epoch,
                    component: format!("loss {name}"),
                });
            }
        }
        for &(name, v) in parts {
            *self.sums.entry(name.to_string()).or_insert(0.0) += v;
        }
        self.total += total;
        self.batches += 1;
        Ok(())
    }

    pub(crate) fn finish(self, tag: StageTag, epoch: usize, lr: f64, seed: u64) -> MetricRecord {
        let n = self.batches.max(1) as f64;
        MetricRecord {
            stage: tag.stage_name().into(),
            phase: tag.phase_name().into(),
            epoch,
            loss_total: self.total / n,
            loss_components: self.sums.into_iter().map(|(k, v)| (k, v / n)).collect(),
            lr,
            seed,
            wall_ms: self.start.map_or(0, |s| s.elapsed().as_millis() as u64),
        }
    }
}

/// Runs every stage with a nonzero budget on fresh parameters.
pub fn train(cfg: &TrainConfig, data: &DatasetSplit, opts: RunOptions<'_>) -> Result<(TrainedModel, MetricLog)> {
    cfg.validate()?;
    let model = TrainedModel::init(cfg, data)?;
    resume(cfg, data, model, opts)
}

/// Runs the stages that come after the last one recorded in `model`'s provenance.
pub fn resume(
    cfg: &TrainConfig,
    data: &DatasetSplit,
    mut model: TrainedModel,
    mut opts: RunOptions<'_>,
) -> Result<(TrainedModel, MetricLog)> {
    cfg.validate()?;
    model.check_compatible(data)?;
    if model.model.config != cfg.encoder {
        return Err(PipelineError::Checkpoint(
            "encoder configuration differs from the checkpoint".into(),
        ));
    }
    let mut log = MetricLog::default();
    let done = model.last_stage();
    for tag in StageTag::ALL {
        if done.is_some_and(|d| tag <= d) || tag.epochs(&cfg.plan) == 0 {
            continue;
        }
        match tag {
            StageTag::Initial => run_stage_initial(cfg, &mut model, data, &mut log, &mut opts)?,
            StageTag::PromptIds | StageTag::PromptDomains => {
                run_stage_prompt(cfg, &mut model, data, tag, &mut log, &mut opts)?
            }
            StageTag::Finetune => run_stage_finetune(cfg, &mut model, data, &mut log, &mut opts)?,
        }
        if let Some(f) = opts.on_stage.as_mut() {
            f(tag, &model)?;
        }
    }
    Ok((model, log))
}

/// Names of parameters whose values differ bitwise between two models.
pub fn changed_params(before: &Model, after: &Model) -> Vec<String> {
    before
        .named_params()
        .into_iter()
        .zip(after.named_params())
        .filter(|((_, _, a), (_, _, b))| {
            a.shape() != b.shape() || a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .map(|((n, _, _), _)| n)
        .collect()
}

#[cfg(test)]
mod tests;

//! Image tower, text tower, prompt bank, classification heads and gradient
//! reversal, all recorded on an [`autodiff::Tape`](crate::autodiff::Tape).

pub mod heads;
pub mod image;
pub mod text;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Mat;
use crate::synthdata::Geometry;

pub use heads::{domain_classify, grl, id_classify, LinearHead};
pub use image::{encode_images, patchify, ImageEncoderParams, ImageVars};
pub use text::{encode_prompts, PromptBank, PromptSequence, TextEncoderParams, TokenSlot, VOCAB};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("empty prompt batch or prompt")]
    EmptyPrompt,
    #[error("invalid encoder config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub geometry: Geometry,
    pub patch: usize,
    pub patch_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub text_layers: usize,
    pub text_mlp_ratio: usize,
    /// Learnable identity tokens per prompt.
    pub id_tokens: usize,
    /// Learnable domain tokens per prompt.
    pub domain_tokens: usize,
    pub init_inverse_temperature: f64,
    pub text_pooling: TextPooling,
}

/// How a prompt's token outputs are reduced to one feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextPooling {
    /// Output at the final token of the prompt.
    LastToken,
    /// Average over the prompt's tokens.
    #[default]
    Mean,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            geometry: Geometry::default(),
            patch: 4,
            patch_dim: 16,
            hidden_dim: 128,
            embed_dim: 32,
            token_dim: 32,
            text_layers: 2,
            text_mlp_ratio: 2,
            id_tokens: 4,
            domain_tokens: 1,
            init_inverse_temperature: 14.0,
            text_pooling: TextPooling::default(),
        }
    }
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        (self.geometry.height / self.patch) * (self.geometry.width / self.patch)
    }

    pub fn patch_input(&self) -> usize {
        self.patch * self.patch * self.geometry.channels
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let g = self.geometry;
        if self.patch == 0 || g.height % self.patch != 0 || g.width % self.patch != 0 {
            return Err(EncoderError::Config(format!(
                "patch {} does not tile {}x{}",
                self.patch, g.height, g.width
            )));
        }
        for (name, v) in [
            ("patch_dim", self.patch_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("token_dim", self.token_dim),
            ("text_mlp_ratio", self.text_mlp_ratio),
            ("id_tokens", self.id_tokens),
            ("domain_tokens", self.domain_tokens),
        ] {
            if v == 0 {
                return Err(EncoderError::Config(format!("{name} must be positive")));
            }
        }
        let longest = 4 + self.id_tokens + 2 + self.domain_tokens + 2;
        if longest > text::MAX_PROMPT_LEN {
            return Err(EncoderError::Config(format!(
                "prompts of {longest} tokens exceed the positional table"
            )));
        }
        if !(self.init_inverse_temperature.is_finite() && self.init_inverse_temperature > 0.0) {
            return Err(EncoderError::Config(
                "init_inverse_temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Which part of the model a parameter belongs to; stages select what to update by group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    ImageEncoder,
    IdHead,
    TextEncoder,
    IdTokens,
    DomainTokens,
    DomainClassifier,
}

pub type ParamList<'a> = Vec<(&'static str, ParamGroup, &'a Mat)>;
pub type ParamListMut<'a> = Vec<(&'static str, ParamGroup, &'a mut Mat)>;

/// Weight matrix `fan_in × fan_out` with entries from N(0, 1/fan_in).
pub fn init_linear<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Mat {
    let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
    Mat::from_shape_fn((fan_in, fan_out), |_| normal.sample(rng))
}

/// Every learnable tensor of the method.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub image: ImageEncoderParams,
    pub id_head: LinearHead,
    pub text: TextEncoderParams,
    pub bank: PromptBank,
    pub domain_head: LinearHead,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(
        config: EncoderConfig,
        num_pids: usize,
        num_domains: usize,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        if num_pids == 0 || num_domains == 0 {
            return Err(EncoderError::Config(
                "need at least one identity and one domain".into(),
            ));
        }
        let image = ImageEncoderParams::init(&config, rng);
        let id_head = LinearHead::init(config.embed_dim, num_pids, rng);
        let text = TextEncoderParams::init(&config, rng);
        let bank = PromptBank::init(&config, num_pids, num_domains, rng);
        let domain_head = LinearHead::init(config.embed_dim, num_domains, rng);
        Ok(Self {
            config,
            image,
            id_head,
            text,
            bank,
            domain_head,
        })
    }

    pub fn num_pids(&self) -> usize {
        self.bank.num_pids()
    }

    pub fn num_domains(&self) -> usize {
        self.bank.num_domains()
    }

    /// All parameters with stable names, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, ParamGroup, &Mat)> {
        let mut out: Vec<(String, ParamGroup, &Mat)> = Vec::new();
        out.extend(self.image.params().into_iter().map(|(n, g, m)| (n.to_string(), g, m)));
        out.extend(
            self.id_head
                .params("id_head", ParamGroup::IdHead)
                .into_iter()
                .map(|(n, g, m)| (n.to_string(), g, m)),
        );
        out.extend(
            self.text
                .param_names()
                .into_iter()
                .zip(self.text.param_values())
                .map(|(n, m)| (n, ParamGroup::TextEncoder, m)),
        );
        out.extend(self.bank.params().into_iter().map(|(n, g, m)| (n.to_string(), g, m)));
        out.extend(
            self.domain_head
                .params("domain_head", ParamGroup::DomainClassifier)
                .into_iter()
                .map(|(n, g, m)| (n.to_string(), g, m)),
        );
        out
    }

    /// Mutable counterpart of [`named_params`](Self::named_params), same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, ParamGroup, &mut Mat)> {
        let text_names = self.text.param_names();
        let mut out: Vec<(String, ParamGroup, &mut Mat)> = Vec::new();
        out.extend(
            self.image
                .params_mut()
                .into_iter()
                .map(|(n, g, m)| (n.to_string(), g, m)),
        );
        out.extend(
            self.id_head
                .params_mut("id_head", ParamGroup::IdHead)
                .into_iter()
                .map(|(n, g, m)| (n.to_string(), g, m)),
        );
        out.extend(
            text_names
                .into_iter()
                .zip(self.text.param_values_mut())
                .map(|(n, m)| (n, ParamGroup::TextEncoder, m)),
        );
        out.extend(
            self.bank
                .params_mut()
                .into_iter()
                .map(|(n, g, m)| (n.to_string(), g, m)),
        );
        out.extend(
            self.domain_head
                .params_mut("domain_head", ParamGroup::DomainClassifier)
                .into_iter()
                .map(|(n, g, m)| (n.to_string(), g, m)),
        );
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, m)| m.len()).sum()
    }
}

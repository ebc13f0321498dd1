//! Named configurations for component ablations and parameter sweeps.
//!
//! Components: A = the initial image-encoder stage, B = domain-aware prompts
//! (domain tokens, domain classifier with gradient reversal) and C = the
//! guiding term in the fine-tuning objective.

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::losses::ApnVariant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationArm {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "+A")]
    PlusA,
    #[serde(rename = "+B")]
    PlusB,
    #[serde(rename = "+A+B w/o C")]
    PlusABWithoutApn,
    #[serde(rename = "+A+B")]
    PlusAB,
}

impl AblationArm {
    pub const ALL: [AblationArm; 5] = [
        AblationArm::Baseline,
        AblationArm::PlusA,
        AblationArm::PlusB,
        AblationArm::PlusABWithoutApn,
        AblationArm::PlusAB,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationArm::Baseline => "baseline",
            AblationArm::PlusA => "+A",
            AblationArm::PlusB => "+B",
            AblationArm::PlusABWithoutApn => "+A+B w/o C",
            AblationArm::PlusAB => "+A+B",
        }
    }

    pub fn toggles(self) -> Toggles {
        let (a, b, c) = match self {
            AblationArm::Baseline => (false, false, false),
            AblationArm::PlusA => (true, false, false),
            AblationArm::PlusB => (false, true, true),
            AblationArm::PlusABWithoutApn => (true, true, false),
            AblationArm::PlusAB => (true, true, true),
        };
        Toggles {
            three_stage: a,
            domain_prompts: b,
            apn: c,
        }
    }

    /// `full` with this arm's components switched off.
    pub fn apply(self, full: &TrainConfig) -> TrainConfig {
        self.toggles().apply(full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub three_stage: bool,
    pub domain_prompts: bool,
    pub apn: bool,
}

impl Toggles {
    pub fn apply(self, full: &TrainConfig) -> TrainConfig {
        let mut cfg = full.clone();
        if !self.three_stage {
            cfg.plan.initial_epochs = 0;
        }
        if !self.domain_prompts {
            cfg.plan.domain_token_epochs = 0;
            cfg.weights.alpha = 0.0;
            cfg.grl = false;
        }
        if !self.apn {
            cfg.weights.beta = 0.0;
            if cfg.weights.apn_variant == ApnVariant::Apnce {
                cfg.weights.apn_variant = ApnVariant::Euclidean;
            }
        }
        cfg
    }
}

/// Values of the guiding weight swept by default.
pub const BETA_GRID: [f64; 5] = [0.0, 0.1, 0.3, 0.5, 1.0];

/// Initial-stage lengths swept by default.
pub const INIT_EPOCH_GRID: [usize; 11] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10];

pub fn with_beta(full: &TrainConfig, beta: f64) -> TrainConfig {
    let mut cfg = full.clone();
    cfg.weights.beta = beta;
    cfg
}

pub fn with_init_epochs(full: &TrainConfig, epochs: usize) -> TrainConfig {
    let mut cfg = full.clone();
    cfg.plan.initial_epochs = epochs;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arms_switch_the_expected_components() {
        let full = TrainConfig::default();
        let base = AblationArm::Baseline.apply(&full);
        assert_eq!(base.plan.initial_epochs, 0);
        assert_eq!(base.plan.domain_token_epochs, 0);
        assert_eq!(base.weights.alpha, 0.0);
        assert_eq!(base.weights.beta, 0.0);
        assert!(!base.grl);

        let a = AblationArm::PlusA.apply(&full);
        assert_eq!(a.plan.initial_epochs, full.plan.initial_epochs);
        assert_eq!(a.weights.beta, 0.0);

        let no_c = AblationArm::PlusABWithoutApn.apply(&full);
        assert!(no_c.grl);
        assert_eq!(no_c.weights.beta, 0.0);
        assert_eq!(no_c.weights.alpha, full.weights.alpha);

        assert_eq!(AblationArm::PlusAB.apply(&full), full);
    }

    #[test]
    fn every_arm_differs_from_baseline_by_its_toggles() {
        let full = TrainConfig::default();
        let hashes: std::collections::BTreeSet<String> = AblationArm::ALL
            .iter()
            .map(|a| a.apply(&full).hash())
            .collect();
        assert_eq!(hashes.len(), 5);
    }
}

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalError, EvalReport, Result};
use crate::pipeline::{train, RunOptions, TrainConfig, TrainedModel};
use crate::synthdata::{build_dataset, DataConfig, DatasetSplit};

/// Cross-domain evaluation protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    /// Train once on the configured sources; evaluate on every other domain.
    P1,
    /// Leave one domain out, training on the others' training pools.
    P2,
    /// As `P2`, with the sources' test pools merged into training.
    P3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRun {
    pub held_out_domain: usize,
    pub source_domains: Vec<usize>,
    pub train_images: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub seed: u64,
    pub runs: Vec<ProtocolRun>,
    pub average_map: f64,
    pub average_cmc: Vec<f64>,
}

fn average(runs: &[ProtocolRun]) -> (f64, Vec<f64>) {
    let n = runs.len() as f64;
    let map = runs.iter().map(|r| r.report.map).sum::<f64>() / n;
    let width = runs[0].report.cmc.len();
    let cmc = (0..width)
        .map(|k| runs.iter().map(|r| r.report.cmc[k]).sum::<f64>() / n)
        .collect();
    (map, cmc)
}

/// Evaluates a model trained on `split` (built from `data`) on every domain
/// outside its sources, as in [`Protocol::P1`].
pub fn evaluate_targets(
    model: &TrainedModel,
    data: &DataConfig,
    split: &DatasetSplit,
    seed: u64,
) -> Result<ProtocolReport> {
    let mut runs = Vec::new();
    for target in (0..data.num_domains).filter(|d| !data.source_domains.contains(d)) {
        let eval_split = if target == data.held_out_domain {
            split.clone()
        } else {
            build_dataset(&DataConfig {
                held_out_domain: target,
                ..data.clone()
            })?
        };
        runs.push(ProtocolRun {
            held_out_domain: target,
            source_domains: data.source_domains.clone(),
            train_images: split.train.len(),
            report: evaluate(model, &eval_split.query, &eval_split.gallery)?,
        });
    }
    finish(Protocol::P1, seed, runs)
}

fn finish(protocol: Protocol, seed: u64, runs: Vec<ProtocolRun>) -> Result<ProtocolReport> {
    if runs.is_empty() {
        return Err(EvalError::NoValidQueries);
    }
    let (average_map, average_cmc) = average(&runs);
    Ok(ProtocolReport {
        protocol,
        seed,
        runs,
        average_map,
        average_cmc,
    })
}

/// Trains and evaluates under `protocol` on the family described by `data`.
pub fn run_protocol(cfg: &TrainConfig, data: &DataConfig, protocol: Protocol) -> Result<ProtocolReport> {
    if data.num_domains < 2 {
        return Err(EvalError::TooFewDomains(data.num_domains));
    }
    let mut runs = Vec::new();
    match protocol {
        Protocol::P1 => {
            let split = build_dataset(data)?;
            let (model, _) = train(cfg, &split, RunOptions::default())?;
            return evaluate_targets(&model, data, &split, cfg.seed);
        }
        Protocol::P2 | Protocol::P3 => {
            for target in 0..data.num_domains {
                let sources: Vec<usize> = (0..data.num_domains).filter(|&d| d != target).collect();
                let split = build_dataset(&DataConfig {
                    source_domains: sources.clone(),
                    held_out_domain: target,
                    include_source_test: protocol == Protocol::P3,
                    ..data.clone()
                })?;
                let (model, _) = train(cfg, &split, RunOptions::default())?;
                runs.push(ProtocolRun {
                    held_out_domain: target,
                    source_domains: sources,
                    train_images: split.train.len(),
                    report: evaluate(&model, &split.query, &split.gallery)?,
                });
            }
        }
    }
    finish(protocol, cfg.seed, runs)
}

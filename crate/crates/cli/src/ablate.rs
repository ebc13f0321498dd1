//! Component ablations and parameter sweeps.

use std::path::Path;

use anyhow::Result;
use clap::ValueEnum;
use fgdi_core::evalkit::{evaluate_targets, run_protocol, Protocol, ProtocolReport};
use fgdi_core::losses::ApnVariant;
use fgdi_core::pipeline::ablation::{with_beta, with_init_epochs, AblationArm, BETA_GRID, INIT_EPOCH_GRID};
use fgdi_core::pipeline::{train, MetricLog, RunOptions, TrainConfig};
use fgdi_core::synthdata::{build_dataset, DataConfig};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::commands::{check_budget, estimate_minutes, CONFIG_FILE, METRICS_FILE, REPORT_FILE};
use crate::config::ExperimentConfig;
use crate::manifest::{deterministic, prepare_run_dir, relative, seed_dir, write_json, write_text, RunManifest};

pub const CSV_FILE: &str = "ablation.csv";
pub const PLOT_FILE: &str = "ablation_plot.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    Arms,
    Beta,
    InitEpochs,
}

impl Grid {
    fn name(self) -> &'static str {
        match self {
            Grid::Arms => "arms",
            Grid::Beta => "beta",
            Grid::InitEpochs => "init_epochs",
        }
    }
}

struct Point {
    grid: Grid,
    slug: String,
    label: String,
    x: Value,
    delta: String,
    apply: Box<dyn Fn(&TrainConfig) -> TrainConfig + Send + Sync>,
}

fn arm_slug(arm: AblationArm) -> &'static str {
    match arm {
        AblationArm::Baseline => "baseline",
        AblationArm::PlusA => "plus_a",
        AblationArm::PlusB => "plus_b",
        AblationArm::PlusABWithoutApn => "plus_ab_wo_c",
        AblationArm::PlusAB => "plus_ab",
    }
}

fn arm_delta(arm: AblationArm) -> String {
    let t = arm.toggles();
    let on: Vec<&str> = [
        (t.three_stage, "three_stage"),
        (t.domain_prompts, "domain_prompts"),
        (t.apn, "apn"),
    ]
    .into_iter()
    .filter_map(|(b, n)| b.then_some(n))
    .collect();
    if on.is_empty() {
        "-".into()
    } else {
        format!("+{}", on.join("+"))
    }
}

fn points(cfg: &ExperimentConfig, grids: &[Grid]) -> Vec<Point> {
    let mut out = Vec::new();
    for &grid in grids {
        match grid {
            Grid::Arms => {
                for &arm in &cfg.sweep.arms {
                    out.push(Point {
                        grid,
                        slug: arm_slug(arm).into(),
                        label: arm.label().into(),
                        x: json!(arm.label()),
                        delta: arm_delta(arm),
                        apply: Box::new(move |c| arm.apply(c)),
                    });
                }
            }
            Grid::Beta => {
                let betas = if cfg.sweep.betas.is_empty() {
                    BETA_GRID.to_vec()
                } else {
                    cfg.sweep.betas.clone()
                };
                for b in betas {
                    out.push(Point {
                        grid,
                        slug: format!("beta_{b}"),
                        label: format!("beta={b}"),
                        x: json!(b),
                        delta: format!("beta={b}"),
                        apply: Box::new(move |c| with_beta(c, b)),
                    });
                }
            }
            Grid::InitEpochs => {
                let epochs = if cfg.sweep.init_epochs.is_empty() {
                    INIT_EPOCH_GRID.to_vec()
                } else {
                    cfg.sweep.init_epochs.clone()
                };
                for e in epochs {
                    out.push(Point {
                        grid,
                        slug: format!("init_epochs_{e}"),
                        label: format!("init_epochs={e}"),
                        x: json!(e),
                        delta: format!("init_epochs={e}"),
                        apply: Box::new(move |c| with_init_epochs(c, e)),
                    });
                }
            }
        }
    }
    out
}

/// One CSV line: a grid point evaluated for one seed.
#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub grid: &'static str,
    pub point: String,
    pub seed: u64,
    pub stages: String,
    pub map: f64,
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub three_stage: bool,
    pub domain_prompts: bool,
    pub apn: bool,
    pub beta: f64,
    pub init_epochs: usize,
    pub delta: String,
    pub config_hash: String,
}

/// Trains and evaluates one configuration; the log is returned for single-model protocols.
pub fn run_one(
    cfg: &TrainConfig,
    data: &DataConfig,
    protocol: Protocol,
) -> Result<(ProtocolReport, Option<MetricLog>)> {
    Ok(match protocol {
        Protocol::P1 => {
            let split = build_dataset(data)?;
            let (model, log) = train(cfg, &split, RunOptions::default())?;
            (evaluate_targets(&model, data, &split, cfg.seed)?, Some(log))
        }
        p => (run_protocol(cfg, data, p)?, None),
    })
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    grids: &[Grid],
    out: &Path,
    budget_minutes: Option<f64>,
) -> Result<Vec<Row>> {
    let grids: Vec<Grid> = if grids.is_empty() {
        let mut g = Vec::new();
        if !cfg.sweep.arms.is_empty() {
            g.push(Grid::Arms);
        }
        if !cfg.sweep.betas.is_empty() {
            g.push(Grid::Beta);
        }
        if !cfg.sweep.init_epochs.is_empty() {
            g.push(Grid::InitEpochs);
        }
        g
    } else {
        grids.to_vec()
    };
    let points = points(cfg, &grids);
    let jobs: Vec<(usize, u64, TrainConfig)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            cfg.seeds
                .iter()
                .map(move |&s| (i, s, (p.apply)(&cfg.resolved_train(s))))
        })
        .collect();
    let all: Vec<TrainConfig> = jobs.iter().map(|j| j.2.clone()).collect();
    check_budget(
        budget_minutes,
        estimate_minutes(&all, &cfg.data, cfg.protocol),
        jobs.len(),
    )?;

    prepare_run_dir(out, false)?;
    let config_json = cfg.to_pretty_json();
    write_text(&out.join(CONFIG_FILE), &config_json)?;
    let top = RunManifest::begin("ablate", &config_json, "ablation", &cfg.seeds);
    top.write(out)?;
    let mut point_manifests = Vec::new();
    for p in &points {
        let dir = out.join(p.grid.name()).join(&p.slug);
        std::fs::create_dir_all(&dir)?;
        let m = RunManifest::begin("ablate", &config_json, &p.label, &cfg.seeds);
        m.write(&dir)?;
        point_manifests.push(m);
    }

    let run = |&(i, seed, ref train_cfg): &(usize, u64, TrainConfig)| -> Result<(Row, Vec<String>)> {
        let p = &points[i];
        let dir = seed_dir(&out.join(p.grid.name()).join(&p.slug), seed);
        let (report, log) = run_one(train_cfg, &cfg.data_for(seed), cfg.protocol)?;
        let mut files = Vec::new();
        let cfg_path = dir.join("train_config.json");
        write_json(&cfg_path, train_cfg)?;
        files.push(cfg_path);
        if let Some(log) = log {
            let path = dir.join(METRICS_FILE);
            log.write(&path)?;
            files.push(path);
        }
        let report_path = dir.join(REPORT_FILE);
        write_json(&report_path, &report)?;
        files.push(report_path);
        let cmc = &report.average_cmc;
        let row = Row {
            grid: p.grid.name(),
            point: p.label.clone(),
            seed,
            stages: report.runs[0].report.stages.clone(),
            map: report.average_map,
            rank1: cmc.first().copied().unwrap_or(0.0),
            rank5: cmc.get(1).copied().unwrap_or(0.0),
            rank10: cmc.get(2).copied().unwrap_or(0.0),
            three_stage: train_cfg.plan.initial_epochs > 0,
            domain_prompts: train_cfg.plan.domain_token_epochs > 0,
            apn: train_cfg.weights.beta > 0.0 || train_cfg.weights.apn_variant == ApnVariant::Apnce,
            beta: train_cfg.weights.beta,
            init_epochs: train_cfg.plan.initial_epochs,
            delta: p.delta.clone(),
            config_hash: train_cfg.hash(),
        };
        eprintln!("{} seed {seed}: mAP {:.4} rank-1 {:.4}", p.label, row.map, row.rank1);
        Ok((row, files.iter().map(|f| relative(out, f)).collect()))
    };
    let results: Vec<(Row, Vec<String>)> = if deterministic() {
        jobs.iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    };

    for (i, (p, m)) in points.iter().zip(point_manifests).enumerate() {
        let dir = out.join(p.grid.name()).join(&p.slug);
        let files: Vec<String> = jobs
            .iter()
            .zip(&results)
            .filter(|(j, _)| j.0 == i)
            .flat_map(|(_, (_, f))| f.iter().map(|s| relative(&dir, &out.join(s))))
            .collect();
        m.finish(&dir, files)?;
    }
    let rows: Vec<Row> = results.into_iter().map(|(r, _)| r).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    write_text(&out.join(CSV_FILE), &String::from_utf8(w.into_inner()?)?)?;
    write_json(&out.join(PLOT_FILE), &plot_data(&points, &rows, &grids))?;
    let mut artifacts = vec![CONFIG_FILE.to_string(), CSV_FILE.to_string(), PLOT_FILE.to_string()];
    artifacts.extend(
        points
            .iter()
            .map(|p| format!("{}/{}/{}", p.grid.name(), p.slug, crate::manifest::MANIFEST_FILE)),
    );
    top.finish(out, artifacts)?;
    Ok(rows)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Per-grid x/y series of seed-averaged metrics.
fn plot_data(points: &[Point], rows: &[Row], grids: &[Grid]) -> Value {
    let series = grids
        .iter()
        .map(|&g| {
            let pts: Vec<&Point> = points.iter().filter(|p| p.grid == g).collect();
            let metric = |f: fn(&Row) -> f64| -> Vec<f64> {
                pts.iter()
                    .map(|p| {
                        let v: Vec<f64> = rows
                            .iter()
                            .filter(|r| r.grid == g.name() && r.point == p.label)
                            .map(f)
                            .collect();
                        mean(&v)
                    })
                    .collect()
            };
            json!({
                "grid": g.name(),
                "x_label": g.name(),
                "x": pts.iter().map(|p| p.x.clone()).collect::<Vec<_>>(),
                "series": [
                    {"name": "mAP", "y": metric(|r| r.map)},
                    {"name": "rank1", "y": metric(|r| r.rank1)},
                    {"name": "rank5", "y": metric(|r| r.rank5)},
                    {"name": "rank10", "y": metric(|r| r.rank10)},
                ],
            })
        })
        .collect::<Vec<_>>();
    json!({ "grids": series })
}

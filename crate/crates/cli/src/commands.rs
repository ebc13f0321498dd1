//! `synth`, `train` and `eval`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fgdi_core::evalkit::{
    evaluate, evaluate_targets, extract_features, metas, run_protocol, write_feature_dump, EvalReport,
    Protocol, ProtocolReport,
};
use fgdi_core::pipeline::{
    load_checkpoint, resume, save_checkpoint, train, RunOptions, StageTag, TrainConfig, TrainedModel,
};
use fgdi_core::synthdata::{build_dataset, load_dataset, save_dataset, DataConfig};

use crate::config::{ConfigError, ExperimentConfig};
use crate::manifest::{prepare_run_dir, relative, seed_dir, write_json, write_text, RunManifest};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Seconds per training image per epoch on a release build.
const SECONDS_PER_IMAGE_EPOCH: f64 = 1.5e-4;

pub fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| ConfigError("no output directory: pass --out or set out_dir".into()).into())
}

fn train_images(data: &DataConfig, protocol: Protocol) -> usize {
    let per_domain = data.pids_per_domain * data.images_per_pid
        + if data.include_source_test || protocol == Protocol::P3 {
            data.test_pids * data.test_images_per_pid
        } else {
            0
        };
    match protocol {
        Protocol::P1 => data.source_domains.len() * per_domain,
        Protocol::P2 | Protocol::P3 => data.num_domains * (data.num_domains - 1) * per_domain,
    }
}

/// Rough wall-clock estimate in minutes for training `cfgs` on `data`.
pub fn estimate_minutes(cfgs: &[TrainConfig], data: &DataConfig, protocol: Protocol) -> f64 {
    let scale = if cfg!(debug_assertions) { 5.0 } else { 1.0 };
    let images = train_images(data, protocol) as f64;
    cfgs.iter()
        .map(|c| c.plan.total() as f64 * images * SECONDS_PER_IMAGE_EPOCH * scale)
        .sum::<f64>()
        / 60.0
}

pub fn check_budget(budget: Option<f64>, estimate: f64, runs: usize) -> Result<()> {
    if let Some(b) = budget {
        if estimate > b {
            bail!(ConfigError(format!(
                "{runs} runs are estimated at {estimate:.1} min, over the {b} min budget"
            )));
        }
    }
    Ok(())
}

pub fn cmd_synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    prepare_run_dir(out, true)?;
    let config_json = cfg.to_pretty_json();
    write_text(&out.join(CONFIG_FILE), &config_json)?;
    let manifest = RunManifest::begin("synth", &config_json, "dataset", &cfg.seeds);
    manifest.write(out)?;
    let mut artifacts = vec![CONFIG_FILE.to_string()];
    for &seed in &cfg.seeds {
        let data = cfg.data_for(seed);
        let split = build_dataset(&data)?;
        let dir = seed_dir(out, seed);
        save_dataset(&split, Some(&data), &dir)?;
        eprintln!(
            "seed {seed}: {} train, {} query, {} gallery -> {}",
            split.train.len(),
            split.query.len(),
            split.gallery.len(),
            dir.display()
        );
        artifacts.push(relative(out, &dir));
    }
    manifest.finish(out, artifacts)?;
    Ok(())
}

pub struct TrainArgs<'a> {
    pub out: &'a Path,
    pub resume_from: Option<&'a Path>,
    pub budget_minutes: Option<f64>,
}

/// Trains one seed with per-stage checkpoints and evaluates it.
fn train_seed(
    cfg: &TrainConfig,
    data_cfg: &DataConfig,
    dir: &Path,
    start: Option<TrainedModel>,
    artifacts: &mut Vec<String>,
) -> Result<ProtocolReport> {
    let split = build_dataset(data_cfg)?;
    let ckpt_dir = dir.join("checkpoints");
    let mut saved = Vec::new();
    let mut on_stage = |tag: StageTag, model: &TrainedModel| {
        let path = ckpt_dir.join(format!("{}.ckpt", tag.key()));
        save_checkpoint(model, &path)?;
        saved.push(path);
        Ok(())
    };
    let opts = RunOptions {
        record_wall_time: false,
        on_epoch: None,
        on_stage: Some(&mut on_stage),
    };
    std::fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    let (model, log) = match start {
        Some(m) => resume(cfg, &split, m, opts)?,
        None => train(cfg, &split, opts)?,
    };
    let metrics = dir.join(METRICS_FILE);
    log.write(&metrics)?;
    artifacts.push(metrics.display().to_string());
    artifacts.extend(saved.iter().map(|p| p.display().to_string()));
    Ok(evaluate_targets(&model, data_cfg, &split, cfg.seed)?)
}

pub fn cmd_train(cfg: &ExperimentConfig, args: TrainArgs<'_>) -> Result<()> {
    let out = args.out;
    if args.resume_from.is_some() && cfg.seeds.len() != 1 {
        bail!(ConfigError("--resume needs exactly one seed (use --seed)".into()));
    }
    if args.resume_from.is_some() && cfg.protocol != Protocol::P1 {
        bail!(ConfigError("--resume is only supported with protocol P1".into()));
    }
    let cfgs: Vec<TrainConfig> = cfg.seeds.iter().map(|&s| cfg.resolved_train(s)).collect();
    check_budget(
        args.budget_minutes,
        estimate_minutes(&cfgs, &cfg.data, cfg.protocol),
        cfgs.len(),
    )?;
    let start = args.resume_from.map(load_checkpoint).transpose()?;
    prepare_run_dir(out, start.is_some())?;
    let config_json = cfg.to_pretty_json();
    write_text(&out.join(CONFIG_FILE), &config_json)?;
    let label = cfgs[0].plan.label();
    let manifest = RunManifest::begin("train", &config_json, &label, &cfg.seeds);
    manifest.write(out)?;

    let mut artifacts = vec![CONFIG_FILE.to_string()];
    for (train_cfg, &seed) in cfgs.iter().zip(&cfg.seeds) {
        let dir = seed_dir(out, seed);
        let data_cfg = cfg.data_for(seed);
        let mut written = Vec::new();
        let report = match cfg.protocol {
            Protocol::P1 => train_seed(train_cfg, &data_cfg, &dir, start.clone(), &mut written)?,
            p => run_protocol(train_cfg, &data_cfg, p)?,
        };
        let report_path = dir.join(REPORT_FILE);
        write_json(&report_path, &report)?;
        written.push(report_path.display().to_string());
        artifacts.extend(written.iter().map(|p| relative(out, Path::new(p))));
        eprintln!(
            "seed {seed} [{label}]: mAP {:.4} rank-1 {:.4}",
            report.average_map,
            report.average_cmc.first().copied().unwrap_or(0.0)
        );
    }
    manifest.finish(out, artifacts)?;
    Ok(())
}

pub struct EvalArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub out: Option<&'a Path>,
    pub features: Option<&'a Path>,
}

pub fn cmd_eval(args: EvalArgs<'_>) -> Result<EvalReport> {
    let model = load_checkpoint(args.checkpoint)?;
    let (split, _) = load_dataset(args.dataset)?;
    model
        .check_compatible(&split)
        .with_context(|| format!("{} does not match {}", args.checkpoint.display(), args.dataset.display()))?;
    let report = evaluate(&model, &split.query, &split.gallery)?;
    if let Some(dir) = args.features {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (name, samples) in [("query", &split.query), ("gallery", &split.gallery)] {
            let f = extract_features(&model, samples)?;
            write_feature_dump(
                &f,
                &metas(samples),
                &dir.join(format!("{name}.bin")),
                &dir.join(format!("{name}.json")),
            )?;
        }
    }
    if let Some(path) = args.out {
        write_json(path, &report)?;
    }
    Ok(report)
}

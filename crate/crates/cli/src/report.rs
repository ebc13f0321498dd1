//! Seed aggregation over a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fgdi_core::evalkit::ProtocolReport;
use serde::Serialize;
use walkdir::WalkDir;

use crate::commands::REPORT_FILE;
use crate::manifest::{relative, write_json, write_text};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Stat {
    fn of(v: &[f64]) -> Self {
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub run: String,
    pub stages: String,
    pub seeds: Vec<u64>,
    pub map: Stat,
    pub rank1: Stat,
    pub rank5: Stat,
    pub rank10: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub groups: Vec<GroupSummary>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    stages: &'a str,
    run: &'a str,
    seeds: usize,
    metric: &'a str,
    mean: f64,
    min: f64,
    max: f64,
}

/// Collects every seed report under `dir`, grouped by run and stage label.
pub fn summarize(dir: &Path) -> Result<Summary> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut groups: BTreeMap<(String, String), Vec<ProtocolReport>> = BTreeMap::new();
    let walker = WalkDir::new(dir).sort_by_file_name();
    for entry in walker {
        let entry = entry.with_context(|| format!("scanning {}", dir.display()))?;
        if entry.file_name() != REPORT_FILE {
            continue;
        }
        let path = entry.path();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: ProtocolReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let seed_dir = path.parent().unwrap_or(dir);
        let run = match seed_dir.parent() {
            Some(p) if p != dir && p.starts_with(dir) => relative(dir, p),
            _ => ".".to_string(),
        };
        let stages = report
            .runs
            .first()
            .map(|r| r.report.stages.clone())
            .unwrap_or_default();
        groups.entry((stages, run)).or_default().push(report);
    }
    if groups.is_empty() {
        bail!("no {REPORT_FILE} found under {}", dir.display());
    }
    let groups = groups
        .into_iter()
        .map(|((stages, run), mut reports)| {
            reports.sort_by_key(|r| r.seed);
            let pick = |k: usize| -> Vec<f64> {
                reports
                    .iter()
                    .map(|r| r.average_cmc.get(k).copied().unwrap_or(f64::NAN))
                    .collect()
            };
            GroupSummary {
                run,
                stages,
                seeds: reports.iter().map(|r| r.seed).collect(),
                map: Stat::of(&reports.iter().map(|r| r.average_map).collect::<Vec<_>>()),
                rank1: Stat::of(&pick(0)),
                rank5: Stat::of(&pick(1)),
                rank10: Stat::of(&pick(2)),
            }
        })
        .collect();
    Ok(Summary { groups })
}

fn cell(s: Stat) -> String {
    format!(
        "{:6.2} [{:6.2},{:6.2}]",
        100.0 * s.mean,
        100.0 * s.min,
        100.0 * s.max
    )
}

/// Text table, one section per stage label.
pub fn render(summary: &Summary) -> String {
    let width = summary.groups.iter().map(|g| g.run.len()).max().unwrap_or(3).max(3);
    let mut out = String::new();
    let mut section = None;
    for g in &summary.groups {
        if section != Some(&g.stages) {
            if section.is_some() {
                out.push('\n');
            }
            let _ = writeln!(out, "stages: {}", g.stages);
            let _ = writeln!(
                out,
                "{:width$}  {:>5}  {:^22}  {:^22}  {:^22}  {:^22}",
                "run", "seeds", "mAP", "Rank-1", "Rank-5", "Rank-10"
            );
            section = Some(&g.stages);
        }
        let _ = writeln!(
            out,
            "{:width$}  {:>5}  {}  {}  {}  {}",
            g.run,
            g.seeds.len(),
            cell(g.map),
            cell(g.rank1),
            cell(g.rank5),
            cell(g.rank10)
        );
    }
    out
}

/// Summarizes `dir`, writes the CSV and JSON summaries next to the runs and returns the table.
pub fn cmd_report(dir: &Path) -> Result<String> {
    let summary = summarize(dir)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for g in &summary.groups {
        for (metric, s) in [("map", g.map), ("rank1", g.rank1), ("rank5", g.rank5), ("rank10", g.rank10)] {
            w.serialize(CsvRow {
                stages: &g.stages,
                run: &g.run,
                seeds: g.seeds.len(),
                metric,
                mean: s.mean,
                min: s.min,
                max: s.max,
            })?;
        }
    }
    write_text(&dir.join(SUMMARY_CSV), &String::from_utf8(w.into_inner()?)?)?;
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    Ok(render(&summary))
}

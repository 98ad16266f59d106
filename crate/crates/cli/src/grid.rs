//! Expands a config into grid cells, runs them, and aggregates the summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use cil_core::distill::KdScope;
use cil_core::frontend::{load_fsc, FeatureCache};
use cil_core::scenario::{build_cil_scenario, synthetic_scenario, Scenario, SplitSamples};
use cil_core::trainer::run_experiment;

use crate::config::{Dataset, ExperimentConfig, KdCell, SeedPair, StrategyName};

/// Result file written into every finished cell directory.
pub const CELL_RESULT: &str = "result.json";
pub const SUMMARY: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: StrategyName,
    pub kd: KdCell,
    pub memory: usize,
    pub seed: SeedPair,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!(
            "{}_feat-{}_pred-{}_m{}_o{}-t{}",
            self.strategy,
            self.kd.feature.label(),
            self.kd.pred.label(),
            self.memory,
            self.seed.order,
            self.seed.train
        )
    }
}

/// Every run of the grid, in strategy × KD × memory × seed order. Strategies
/// without memory run once at memory 0; the offline baseline ignores KD.
pub fn expand(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &strategy in &cfg.strategies {
        let kds: Vec<KdCell> = if strategy == StrategyName::Offline {
            vec![KdCell::default()]
        } else {
            cfg.kd_configs.clone()
        };
        let memories: Vec<usize> = if strategy.uses_memory() {
            cfg.memory_sizes.clone()
        } else {
            vec![0]
        };
        for &kd in &kds {
            for &memory in &memories {
                for &seed in &cfg.seeds {
                    let cell = Cell {
                        strategy,
                        kd,
                        memory,
                        seed,
                    };
                    if !cells.contains(&cell) {
                        cells.push(cell);
                    }
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub strategy: StrategyName,
    pub feat_kd_scope: KdScope,
    pub pred_kd_scope: KdScope,
    pub memory: usize,
    pub order_seed: u64,
    pub train_seed: u64,
    pub last_acc: f64,
    pub avg_acc: f64,
}

impl CellResult {
    pub fn group(&self) -> (StrategyName, &'static str, &'static str, usize) {
        (
            self.strategy,
            self.feat_kd_scope.label(),
            self.pred_kd_scope.label(),
            self.memory,
        )
    }
}

fn load_split(cfg: &ExperimentConfig) -> Result<(SplitSamples, Vec<usize>)> {
    match &cfg.dataset {
        Dataset::Synthetic(d) => {
            let sc = synthetic_scenario(&d.generator, d.data_seed)?;
            let sizes = vec![d.generator.classes_per_task; d.generator.n_tasks];
            Ok((sc.split_samples()?, sizes))
        }
        Dataset::Fsc(d) => {
            let cache = FeatureCache::new(&d.cache_dir)?;
            let (split, _) = load_fsc(&d.root, &d.frontend, &cache)
                .with_context(|| format!("loading FSC data from {}", d.root.display()))?;
            Ok((split, d.task_sizes.clone()))
        }
    }
}

fn run_cell(cfg: &ExperimentConfig, scenario: &Scenario, cell: &Cell, out: &Path, overrides: &[String]) -> Result<CellResult> {
    let train = cfg.train_config(cell.strategy, cell.kd, cell.memory, cell.seed.train);
    let joint;
    let scenario = if cell.strategy == StrategyName::Offline {
        joint = scenario.joint()?;
        &joint
    } else {
        scenario
    };
    let result = run_experiment(scenario, &train, &cfg.model)
        .with_context(|| format!("run {}", cell.dir_name()))?;
    let summary = CellResult {
        strategy: cell.strategy,
        feat_kd_scope: cell.kd.feature,
        pred_kd_scope: cell.kd.pred,
        memory: cell.memory,
        order_seed: cell.seed.order,
        train_seed: cell.seed.train,
        last_acc: result.last_acc,
        avg_acc: result.avg_acc,
    };
    let dir = out.join(cell.dir_name());
    let extra = json!({
        "cell": cell,
        "experiment": cfg,
        "overrides": overrides,
    });
    result.write_dir(&dir, Some(&extra))?;
    fs::write(dir.join(CELL_RESULT), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Runs the whole grid into `out`, one subdirectory per cell, then writes
/// `summary.csv`. Cells run in parallel; results do not depend on scheduling.
pub fn run_grid(cfg: &ExperimentConfig, overrides: &[String], out: &Path) -> Result<Vec<CellResult>> {
    let cells = expand(cfg);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(
        out.join("experiment.json"),
        serde_json::to_string_pretty(&json!({ "config": cfg, "overrides": overrides }))?,
    )?;

    let (split, sizes) = load_split(cfg)?;
    let mut scenarios = BTreeMap::new();
    for cell in &cells {
        if !scenarios.contains_key(&cell.seed.order) {
            let sc = build_cil_scenario(split.clone(), &sizes, cell.seed.order)?;
            scenarios.insert(cell.seed.order, sc);
        }
    }
    drop(split);

    let results = cells
        .par_iter()
        .map(|cell| run_cell(cfg, &scenarios[&cell.seed.order], cell, out, overrides))
        .collect::<Result<Vec<_>>>()?;
    fs::write(out.join(SUMMARY), summary_csv(&results))?;
    Ok(results)
}

/// `strategy,feat_kd_scope,pred_kd_scope,memory,seed,last_acc,avg_acc,order_seed`:
/// one row per run (`seed` = training seed) followed by one `mean` row per
/// configuration, in first-appearance order.
pub fn summary_csv(results: &[CellResult]) -> String {
    let mut out = String::from("strategy,feat_kd_scope,pred_kd_scope,memory,seed,last_acc,avg_acc,order_seed\n");
    for r in results {
        let (s, f, p, m) = r.group();
        let _ = writeln!(
            out,
            "{s},{f},{p},{m},{},{:.6},{:.6},{}",
            r.train_seed, r.last_acc, r.avg_acc, r.order_seed
        );
    }
    for (group, members) in group_results(results) {
        let (s, f, p, m) = group;
        let n = members.len() as f64;
        let last = members.iter().map(|r| r.last_acc).sum::<f64>() / n;
        let avg = members.iter().map(|r| r.avg_acc).sum::<f64>() / n;
        let _ = writeln!(out, "{s},{f},{p},{m},mean,{last:.6},{avg:.6},");
    }
    out
}

type Group = (StrategyName, &'static str, &'static str, usize);

/// Runs grouped by configuration, preserving first-appearance order.
pub fn group_results(results: &[CellResult]) -> Vec<(Group, Vec<&CellResult>)> {
    let mut groups: Vec<(Group, Vec<&CellResult>)> = Vec::new();
    for r in results {
        let key = r.group();
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, members)) => members.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
}

/// Directories at or directly under each path holding `file`, sorted.
pub fn find_dirs_with(paths: &[PathBuf], file: &str) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    for path in paths {
        if !path.is_dir() {
            bail!("{} is not a directory", path.display());
        }
        if path.join(file).is_file() {
            found.push(path.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join(file).is_file())
            .collect();
        children.sort();
        found.extend(children);
    }
    Ok(found)
}

pub fn read_cell_results(paths: &[PathBuf]) -> Result<Vec<CellResult>> {
    let dirs = find_dirs_with(paths, CELL_RESULT)?;
    if dirs.is_empty() {
        bail!("no finished runs (no {CELL_RESULT}) found in the given results");
    }
    dirs.iter()
        .map(|d| {
            let path = d.join(CELL_RESULT);
            let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
        })
        .collect()
}

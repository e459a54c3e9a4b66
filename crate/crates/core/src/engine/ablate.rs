//! Grid sweeps over variants and hyperparameters.
//!
//! A sweep file uses the config syntax with comma-separated value lists:
//!
//! ```text
//! variant = mrn, mrn_zero
//! k = 5, 10, 20
//! eval_depth = 1, 2, 3
//! seeds = 0, 1, 2
//! ```
//!
//! The grid is the cartesian product of every listed key except `seeds`,
//! which replaces the base config's seed list. Cells that differ only in
//! evaluation-time keys (`eval_k`, `eval_depth`, `eval_lambda`, ...) share one
//! trained backbone per seed.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{parse_kv, RunConfig};
use super::eval::evaluate;
use super::train::train;
use crate::episodes::Dataset;
use crate::error::{Error, Result};
use crate::numerics::ParamStore;

const LIST_KEYS: &[&str] = &["input_shape", "mlp_dims"];

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    /// Swept keys with their values, in file order.
    pub axes: Vec<(String, Vec<String>)>,
    pub seeds: Option<Vec<u64>>,
}

impl Sweep {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        let mut seeds = None;
        for (k, v) in parse_kv(text)? {
            let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
            if k == "seeds" {
                let parsed = values
                    .iter()
                    .map(|s| {
                        s.parse()
                            .map_err(|_| Error::Config(format!("seeds: cannot parse `{s}`")))
                    })
                    .collect::<Result<Vec<u64>>>()?;
                seeds = Some(parsed);
                continue;
            }
            if LIST_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("`{k}` cannot be swept")));
            }
            if axes.iter().any(|(a, _)| *a == k) {
                return Err(Error::Config(format!("`{k}` listed twice in sweep")));
            }
            axes.push((k, values));
        }
        Ok(Self { axes, seeds })
    }

    /// One config per grid cell, in row-major order of the axes.
    pub fn cells(&self, base: &RunConfig) -> Result<Vec<RunConfig>> {
        let mut cells = vec![base.clone()];
        for (key, values) in &self.axes {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for v in values {
                    let mut c = cell.clone();
                    c.set(key, v)?;
                    next.push(c);
                }
            }
            cells = next;
        }
        for c in &cells {
            c.validate()?;
        }
        Ok(cells)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    #[serde(rename = "C")]
    pub ways: usize,
    #[serde(rename = "K")]
    pub shots: usize,
    pub k: usize,
    pub d: usize,
    pub lambda: f64,
    pub strategy: String,
    #[serde(rename = "metric_DG")]
    pub metric_dg: String,
    pub seed: u64,
    pub episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
}

/// Train what the grid needs, evaluate every (cell, seed) pair and write the
/// results table. Rows come out cell-major, seeds inner.
pub fn ablate(
    base: &RunConfig,
    sweep: &Sweep,
    dataset: &Dataset,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    let cells = sweep.cells(base)?;
    let seeds = sweep.seeds.clone().unwrap_or_else(|| base.seeds.clone());
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();

    let mut slot_of: HashMap<(String, u64), usize> = HashMap::new();
    let mut to_train: Vec<(usize, u64)> = Vec::new();
    let job_slot: Vec<usize> = jobs
        .iter()
        .map(|&(c, s)| {
            *slot_of
                .entry((cells[c].training_key(), s))
                .or_insert_with(|| {
                    to_train.push((c, s));
                    to_train.len() - 1
                })
        })
        .collect();
    let trained: Vec<ParamStore> = to_train
        .par_iter()
        .map(|&(c, s)| train(&cells[c], dataset, s).map(|o| o.params))
        .collect::<Result<_>>()?;

    let rows = jobs
        .par_iter()
        .zip(&job_slot)
        .map(|(&(c, seed), &slot)| {
            let cfg = &cells[c];
            let report = evaluate(cfg, &trained[slot], dataset, cfg.eval_episodes, seed)?;
            let p = cfg.eval_propagation();
            Ok(AblationRow {
                variant: cfg.variant.to_string(),
                ways: cfg.ways,
                shots: cfg.shots,
                k: p.k,
                d: p.depth,
                lambda: p.lambda,
                strategy: p.strategy.to_string(),
                metric_dg: p.metric.to_string(),
                seed,
                episodes: report.episodes,
                mean_acc: report.mean_accuracy,
                ci95: report.ci95,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut w = csv::Writer::from_path(out)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

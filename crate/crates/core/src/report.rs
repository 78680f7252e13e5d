//! Summaries of a rollout log: best model, top-k, fraction above
//! threshold and progress curves, plus their file formats.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::search::RolloutRecord;

pub const TOP_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub architecture: String,
    pub reward: f64,
    /// Rollout that first evaluated the architecture.
    pub rollout_index: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub models: Vec<Ranked>,
    pub mean_reward: Option<f64>,
}

/// Distinct evaluated architectures in order of first evaluation.
pub fn distinct(records: &[RolloutRecord]) -> Vec<Ranked> {
    let mut seen = HashSet::new();
    records
        .iter()
        .filter(|r| seen.insert(r.architecture.as_str()))
        .map(|r| Ranked {
            architecture: r.architecture.clone(),
            reward: r.reward,
            rollout_index: r.index,
        })
        .collect()
}

/// Highest reward; the earliest rollout wins ties.
pub fn best(records: &[RolloutRecord]) -> Option<Ranked> {
    top_k(records, 1).models.into_iter().next()
}

/// The `k` best distinct architectures, best first; ties go to the
/// earlier rollout.
pub fn top_k(records: &[RolloutRecord], k: usize) -> TopK {
    let mut models = distinct(records);
    models.sort_by(|a, b| {
        b.reward
            .total_cmp(&a.reward)
            .then(a.rollout_index.cmp(&b.rollout_index))
    });
    models.truncate(k);
    let mean_reward = (!models.is_empty())
        .then(|| models.iter().map(|m| m.reward).sum::<f64>() / models.len() as f64);
    TopK { k, models, mean_reward }
}

/// Thresholds `0.00, 0.01, …, 1.00`.
pub fn threshold_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Fraction of distinct evaluated models with reward at or above each
/// threshold. Empty logs give all zeros.
pub fn threshold_fractions(records: &[RolloutRecord], thresholds: &[f64]) -> Vec<f64> {
    let rewards: Vec<f64> = distinct(records).into_iter().map(|m| m.reward).collect();
    thresholds
        .iter()
        .map(|&t| {
            if rewards.is_empty() {
                0.0
            } else {
                rewards.iter().filter(|&&r| r >= t).count() as f64 / rewards.len() as f64
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rollout: u64,
    pub cumulative_cost: f64,
    pub best_so_far: f64,
    pub top5_mean: f64,
}

/// Best-so-far and top-5 mean after each completed rollout.
pub fn curve(records: &[RolloutRecord]) -> Vec<CurvePoint> {
    let mut seen = HashSet::new();
    let mut top: Vec<f64> = Vec::with_capacity(TOP_K + 1);
    let mut cost = 0.0;
    records
        .iter()
        .map(|r| {
            cost += r.cost_units;
            if seen.insert(r.architecture.as_str()) {
                top.push(r.reward);
                top.sort_by(|a, b| b.total_cmp(a));
                top.truncate(TOP_K);
            }
            CurvePoint {
                rollout: r.index,
                cumulative_cost: cost,
                best_so_far: top[0],
                top5_mean: top.iter().sum::<f64>() / top.len() as f64,
            }
        })
        .collect()
}

pub fn write_rollouts<W: Write>(out: W, records: &[RolloutRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record([
            "index",
            "architecture",
            "reward",
            "cost_units",
            "cache_hit",
            "donor_distance",
            "max_depth_at_rollout",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rollouts<R: std::io::Read>(input: R) -> csv::Result<Vec<RolloutRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn write_thresholds<W: Write>(out: W, records: &[RolloutRecord]) -> csv::Result<()> {
    let grid = threshold_grid();
    let fractions = threshold_fractions(records, &grid);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["threshold", "fraction"])?;
    for (t, f) in grid.iter().zip(fractions) {
        w.write_record([format!("{t:.2}"), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    let Some(m) = mean(xs) else { return 0.0 };
    if xs.len() < 2 {
        return 0.0;
    }
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    sample_std(xs) / (xs.len() as f64).sqrt()
}

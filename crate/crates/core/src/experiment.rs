//! Complete runs: configuration, evaluator construction, artifacts, and
//! multi-seed policy comparisons.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::SpaceConfig;
use crate::crp_model::CrpConfig;
use crate::eval::protocol::{ProtocolError, PROTOCOL_VERSION};
use crate::eval::surrogate::SURROGATE_VERSION;
use crate::eval::{
    Backend, EvaluationService, ExternalBackend, SurrogateBackend, SurrogateConfig, TabularBackend, TabularError,
};
use crate::policy::{CrpPolicy, Policy, RandomPolicy, Rave4nnPolicy, RaveWeighting, UctPolicy};
use crate::report;
use crate::search::{ConfigError, RolloutFailure, RolloutRecord, Search, SearchConfig, SearchError};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Random,
    Uct,
    Rave4nn,
    Crp,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::Random, PolicyKind::Uct, PolicyKind::Rave4nn, PolicyKind::Crp];
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Random => "random",
            PolicyKind::Uct => "uct",
            PolicyKind::Rave4nn => "rave4nn",
            PolicyKind::Crp => "crp",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| format!("unknown policy `{s}` (expected random, uct, rave4nn or crp)"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EvaluatorSpec {
    Surrogate,
    Tabular { path: PathBuf },
    External { command: String },
}

impl fmt::Display for EvaluatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvaluatorSpec::Surrogate => f.write_str("surrogate"),
            EvaluatorSpec::Tabular { path } => write!(f, "tabular:{}", path.display()),
            EvaluatorSpec::External { command } => write!(f, "external:{command}"),
        }
    }
}

impl FromStr for EvaluatorSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "surrogate" {
            return Ok(EvaluatorSpec::Surrogate);
        }
        match s.split_once(':') {
            Some(("tabular", path)) if !path.is_empty() => Ok(EvaluatorSpec::Tabular { path: path.into() }),
            Some(("external", cmd)) if !cmd.trim().is_empty() => Ok(EvaluatorSpec::External { command: cmd.into() }),
            _ => Err(format!(
                "bad evaluator `{s}` (expected surrogate, tabular:<path> or external:<command>)"
            )),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub policy: PolicyKind,
    pub evaluator: EvaluatorSpec,
    pub rollouts: Option<u64>,
    pub cost_budget: Option<f64>,
    pub seed: u64,
    pub c: f64,
    pub rave_k: f64,
    pub gamma: f64,
    pub initial_max_depth: usize,
    pub depth_increase_every: usize,
    pub noise_std: f64,
    pub min_convs_before_pool: usize,
    pub ramp_min_depth_every: Option<usize>,
    /// Fall back to the surrogate for architectures missing from a table.
    pub tabular_fallback: bool,
    pub external_timeout_secs: f64,
    pub dump_crp: bool,
    pub space: SpaceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Uct,
            evaluator: EvaluatorSpec::Surrogate,
            rollouts: None,
            cost_budget: None,
            seed: 0,
            c: 0.5,
            rave_k: 250.0,
            gamma: 1.0,
            initial_max_depth: 3,
            depth_increase_every: 50,
            noise_std: 0.0,
            min_convs_before_pool: 0,
            ramp_min_depth_every: None,
            tabular_fallback: false,
            external_timeout_secs: 3600.0,
            dump_crp: false,
            space: SpaceConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Search(#[from] ConfigError),
    #[error("cannot load table: {0}")]
    Tabular(#[from] TabularError),
    #[error("cannot start external evaluator: {0}")]
    External(#[from] ProtocolError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl RunConfig {
    pub fn search_config(&self) -> SearchConfig<Real> {
        SearchConfig {
            gamma: self.gamma,
            initial_max_depth: self.initial_max_depth,
            depth_increase_every: self.depth_increase_every,
            rollout_budget: self.rollouts,
            cost_budget: self.cost_budget,
            seed: self.seed,
            min_convs_before_pool: self.min_convs_before_pool,
            ramp_min_depth_every: self.ramp_min_depth_every,
            ..SearchConfig::default()
        }
    }

    pub fn surrogate_config(&self) -> SurrogateConfig {
        SurrogateConfig {
            noise_std: self.noise_std,
            seed: self.seed,
            ..SurrogateConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.search_config().validate()?;
        let bad = |m: String| Err(ExperimentError::Config(m));
        if !(self.c.is_finite() && self.c >= 0.0) {
            return bad(format!("exploration constant must be non-negative, got {}", self.c));
        }
        if !(self.rave_k.is_finite() && self.rave_k > 0.0) {
            return bad(format!("RAVE k must be positive, got {}", self.rave_k));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!("noise std must be non-negative, got {}", self.noise_std));
        }
        if !(self.external_timeout_secs.is_finite() && self.external_timeout_secs > 0.0) {
            return bad(format!("timeout must be positive, got {}", self.external_timeout_secs));
        }
        Ok(())
    }

    fn backend(&self) -> Result<Box<dyn Backend>, ExperimentError> {
        Ok(match &self.evaluator {
            EvaluatorSpec::Surrogate => Box::new(SurrogateBackend::new(self.surrogate_config())),
            EvaluatorSpec::Tabular { path } => {
                let table = TabularBackend::from_path(path, &self.space)?;
                if self.tabular_fallback {
                    Box::new(table.with_fallback(self.surrogate_config()))
                } else {
                    Box::new(table)
                }
            }
            EvaluatorSpec::External { command } => Box::new(ExternalBackend::spawn(
                command,
                Duration::from_secs_f64(self.external_timeout_secs),
            )?),
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<RolloutRecord>,
    pub failures: Vec<RolloutFailure>,
    pub backend_calls: u64,
    pub wall_time: Duration,
    /// Set if the run stopped before its budget.
    pub aborted: Option<SearchError>,
    /// Reward-predictor training set as JSON lines, when requested.
    pub crp_examples: Option<Vec<u8>>,
}

fn drive<P: Policy<Real>>(
    cfg: &RunConfig,
    policy: P,
    service: EvaluationService,
    dump: impl FnOnce(&P) -> Option<Vec<u8>>,
) -> Result<RunResult, ExperimentError> {
    let start = Instant::now();
    let mut search = Search::new(cfg.space.clone(), cfg.search_config(), policy, service)?;
    let aborted = search.run().err();
    if let Some(e) = &aborted {
        log::error!("run aborted: {e}");
    }
    let backend_calls = search.service().backend_calls();
    let (records, failures, policy, _) = search.into_parts();
    Ok(RunResult {
        records,
        failures,
        backend_calls,
        wall_time: start.elapsed(),
        aborted,
        crp_examples: dump(&policy),
    })
}

pub fn execute(cfg: &RunConfig) -> Result<RunResult, ExperimentError> {
    cfg.validate()?;
    let service = EvaluationService::new(cfg.backend()?);
    match cfg.policy {
        PolicyKind::Random => drive(cfg, RandomPolicy, service, |_| None),
        PolicyKind::Uct => drive(cfg, UctPolicy { c: cfg.c }, service, |_| None),
        PolicyKind::Rave4nn => {
            let policy = Rave4nnPolicy::new(cfg.c, RaveWeighting::Schedule { k: cfg.rave_k });
            drive(cfg, policy, service, |_| None)
        }
        PolicyKind::Crp => {
            let policy = CrpPolicy::new(cfg.c, CrpConfig::default());
            let dump = cfg.dump_crp;
            drive(cfg, policy, service, move |p: &CrpPolicy<Real>| {
                dump.then(|| {
                    let mut buf = Vec::new();
                    p.model.dump_examples(&mut buf).expect("writing to memory");
                    buf
                })
            })
        }
    }
}

#[derive(Serialize)]
struct Versions {
    crate_version: &'static str,
    surrogate_formula: u32,
    protocol: u32,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    config: &'a RunConfig,
    versions: Versions,
    wall_time_secs: f64,
    rollouts_completed: usize,
    rollouts_failed: usize,
    backend_calls: u64,
    aborted: Option<String>,
    failures: &'a [RolloutFailure],
}

#[derive(Serialize)]
struct BestFile<'a> {
    architecture: &'a str,
    reward: f64,
    rollout_index: u64,
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    File::create(path).map(BufWriter::new).map_err(|source| ExperimentError::Io {
        path: path.into(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let io = |source| ExperimentError::Io { path: path.into(), source };
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

fn write_csv(path: &Path, f: impl FnOnce(BufWriter<File>) -> csv::Result<()>) -> Result<(), ExperimentError> {
    f(create(path)?).map_err(|source| ExperimentError::Csv { path: path.into(), source })
}

/// Writes rollouts.csv, best.json, topk.json, threshold.csv and
/// run_meta.json (and crp_examples.jsonl if present) into `dir`.
pub fn write_artifacts(dir: &Path, cfg: &RunConfig, result: &RunResult) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.into(), source })?;
    let records = &result.records;
    write_csv(&dir.join("rollouts.csv"), |w| report::write_rollouts(w, records))?;
    let best = report::best(records);
    let best_file = best.as_ref().map(|b| BestFile {
        architecture: &b.architecture,
        reward: b.reward,
        rollout_index: b.rollout_index,
    });
    write_json(&dir.join("best.json"), &best_file)?;
    write_json(&dir.join("topk.json"), &report::top_k(records, report::TOP_K))?;
    write_csv(&dir.join("threshold.csv"), |w| report::write_thresholds(w, records))?;
    let meta = RunMeta {
        config: cfg,
        versions: Versions {
            crate_version: env!("CARGO_PKG_VERSION"),
            surrogate_formula: SURROGATE_VERSION,
            protocol: PROTOCOL_VERSION,
        },
        wall_time_secs: result.wall_time.as_secs_f64(),
        rollouts_completed: records.len(),
        rollouts_failed: result.failures.len(),
        backend_calls: result.backend_calls,
        aborted: result.aborted.as_ref().map(|e| e.to_string()),
        failures: &result.failures,
    };
    write_json(&dir.join("run_meta.json"), &meta)?;
    if let Some(examples) = &result.crp_examples {
        let path = dir.join("crp_examples.jsonl");
        std::fs::write(&path, examples).map_err(|source| ExperimentError::Io { path, source })?;
    }
    Ok(())
}

/// One (policy, seed) cell of a comparison.
#[derive(Clone, Debug)]
pub struct Cell {
    pub policy: PolicyKind,
    pub seed: u64,
    pub result: Result<RunResult, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: PolicyKind,
    pub runs: usize,
    pub failed_runs: usize,
    pub mean_best: Option<f64>,
    pub std_best: f64,
    pub mean_top5: Option<f64>,
    pub std_top5: f64,
}

pub fn validate_compare(policies: &[PolicyKind], seeds: &[u64]) -> Result<(), ExperimentError> {
    if seeds.is_empty() {
        return Err(ExperimentError::Config("seed list is empty".into()));
    }
    if seeds.len() < 5 {
        return Err(ExperimentError::Config(format!("need at least 5 seeds, got {}", seeds.len())));
    }
    let mut distinct = policies.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(ExperimentError::Config("need at least two distinct policies".into()));
    }
    Ok(())
}

/// Runs every policy on every seed, in parallel. `base.policy` and
/// `base.seed` are overridden per cell; a failing cell does not stop the
/// others.
pub fn compare(base: &RunConfig, policies: &[PolicyKind], seeds: &[u64]) -> Result<Vec<Cell>, ExperimentError> {
    validate_compare(policies, seeds)?;
    let mut cfg = base.clone();
    cfg.dump_crp = false;
    cfg.validate()?;
    let jobs: Vec<(PolicyKind, u64)> = policies
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    Ok(jobs
        .into_par_iter()
        .map(|(policy, seed)| {
            let cell_cfg = RunConfig { policy, seed, ..cfg.clone() };
            let result = execute(&cell_cfg).map_err(|e| e.to_string());
            if let Err(e) = &result {
                log::error!("{policy} seed {seed}: {e}");
            }
            Cell { policy, seed, result }
        })
        .collect())
}

pub fn summarize(cells: &[Cell], policies: &[PolicyKind]) -> Vec<SummaryRow> {
    let mut seen = Vec::new();
    policies
        .iter()
        .filter(|p| {
            let new = !seen.contains(*p);
            seen.push(**p);
            new
        })
        .map(|&policy| {
            let mine: Vec<&Cell> = cells.iter().filter(|c| c.policy == policy).collect();
            let ok: Vec<&RunResult> = mine.iter().filter_map(|c| c.result.as_ref().ok()).collect();
            let best: Vec<f64> = ok.iter().filter_map(|r| report::best(&r.records)).map(|b| b.reward).collect();
            let top5: Vec<f64> = ok
                .iter()
                .filter_map(|r| report::top_k(&r.records, report::TOP_K).mean_reward)
                .collect();
            SummaryRow {
                policy,
                runs: mine.len(),
                failed_runs: mine.len() - ok.len(),
                mean_best: report::mean(&best),
                std_best: report::sample_std(&best),
                mean_top5: report::mean(&top5),
                std_top5: report::sample_std(&top5),
            }
        })
        .collect()
}

/// Writes curves.csv, summary.csv and cells.json into `dir`.
pub fn write_comparison(dir: &Path, cells: &[Cell], summary: &[SummaryRow]) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(|source| ExperimentError::Io { path: dir.into(), source })?;
    write_csv(&dir.join("curves.csv"), |out| {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["policy", "seed", "rollout", "cumulative_cost", "best_so_far", "top5_mean"])?;
        for cell in cells {
            let Ok(r) = &cell.result else { continue };
            for p in report::curve(&r.records) {
                w.write_record([
                    cell.policy.to_string(),
                    cell.seed.to_string(),
                    p.rollout.to_string(),
                    p.cumulative_cost.to_string(),
                    p.best_so_far.to_string(),
                    p.top5_mean.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    write_csv(&dir.join("summary.csv"), |out| {
        let mut w = csv::Writer::from_writer(out);
        for row in summary {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    })?;
    let status: Vec<serde_json::Value> = cells
        .iter()
        .map(|c| {
            serde_json::json!({
                "policy": c.policy,
                "seed": c.seed,
                "error": c.result.as_ref().err(),
                "best": c.result.as_ref().ok().and_then(|r| report::best(&r.records)),
            })
        })
        .collect();
    write_json(&dir.join("cells.json"), &status)
}

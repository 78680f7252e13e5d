use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use uctnas::eval::protocol::{serve_surrogate, Fault};
use uctnas::eval::SurrogateConfig;
use uctnas::experiment::{self, EvaluatorSpec, PolicyKind, RunConfig, SummaryRow};
use uctnas::SpaceConfig;

#[derive(Parser)]
#[command(name = "uctnas", version, about = "Monte Carlo tree search over CNN architectures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one search and write its artifacts.
    Run(RunArgs),
    /// Run several policies over several seeds and summarize.
    Compare(CompareArgs),
    /// Serve the surrogate over the evaluator protocol on stdin/stdout.
    #[command(hide = true)]
    ServeSurrogate(ServeArgs),
}

#[derive(Args, Clone)]
struct SearchArgs {
    /// surrogate, tabular:<path> or external:<command>
    #[arg(long, default_value = "surrogate", value_parser = parse_evaluator)]
    evaluator: EvaluatorSpec,
    /// Number of rollouts.
    #[arg(long)]
    rollouts: Option<u64>,
    /// Stop once this many training cost units are spent.
    #[arg(long)]
    cost_budget: Option<f64>,
    /// Exploration constant.
    #[arg(long, default_value_t = 0.5)]
    c: f64,
    /// RAVE4NN schedule parameter k.
    #[arg(long, default_value_t = 250.0)]
    rave_k: f64,
    /// Discount factor.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 3)]
    initial_max_depth: usize,
    /// Raise the depth cap by one every this many rollouts.
    #[arg(long, default_value_t = 50)]
    depth_increase_every: usize,
    /// Standard deviation of surrogate noise.
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// Consecutive convolutions required before each pooling layer.
    #[arg(long, default_value_t = 0)]
    min_convs_before_pool: usize,
    /// Raise the minimum depth by one every this many rollouts.
    #[arg(long)]
    ramp_min_depth: Option<usize>,
    /// Use the surrogate for architectures missing from a table.
    #[arg(long)]
    tabular_fallback: bool,
    /// Seconds to wait for each external evaluation.
    #[arg(long, default_value_t = 3600.0)]
    eval_timeout: f64,
}

impl SearchArgs {
    fn to_config(&self, policy: PolicyKind, seed: u64) -> RunConfig {
        RunConfig {
            policy,
            evaluator: self.evaluator.clone(),
            rollouts: self.rollouts,
            cost_budget: self.cost_budget,
            seed,
            c: self.c,
            rave_k: self.rave_k,
            gamma: self.gamma,
            initial_max_depth: self.initial_max_depth,
            depth_increase_every: self.depth_increase_every,
            noise_std: self.noise_std,
            min_convs_before_pool: self.min_convs_before_pool,
            ramp_min_depth_every: self.ramp_min_depth,
            tabular_fallback: self.tabular_fallback,
            external_timeout_secs: self.eval_timeout,
            dump_crp: false,
            space: SpaceConfig::default(),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "uct", value_parser = parse_policy)]
    policy: PolicyKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write the reward predictor's training examples (crp only).
    #[arg(long)]
    dump_crp: bool,
    /// Repeat the run described by an earlier run_meta.json; search flags
    /// are ignored.
    #[arg(long)]
    from_meta: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated policies.
    #[arg(long, value_delimiter = ',', default_value = "random,uct,rave4nn,crp", value_parser = parse_policy)]
    policies: Vec<PolicyKind>,
    /// Comma-separated seeds or an inclusive range such as `0-19`.
    #[arg(long, default_value = "0-19", value_parser = parse_seeds)]
    seeds: SeedList,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise_std: f64,
    /// exit:N, stall:N:MILLIS, garbage:N, wrong-id:N or out-of-range:N
    #[arg(long, value_parser = parse_fault)]
    fault: Option<Fault>,
}

#[derive(Clone, Debug)]
struct SeedList(Vec<u64>);

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse()
}

fn parse_evaluator(s: &str) -> Result<EvaluatorSpec, String> {
    s.parse()
}

fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let bad = |_| format!("bad seed list `{s}`");
    if let Some((a, b)) = s.split_once('-') {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a > b {
            return Err(format!("empty seed range `{s}`"));
        }
        return Ok(SeedList((a..=b).collect()));
    }
    let seeds = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse().map_err(bad))
        .collect::<Result<Vec<u64>, _>>()?;
    Ok(SeedList(seeds))
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.parse::<u64>().map_err(|_| format!("bad fault `{s}`"));
    Ok(match parts.as_slice() {
        ["exit", n] => Fault::Exit { at: num(n)? },
        ["stall", n, ms] => Fault::Stall { at: num(n)?, millis: num(ms)? },
        ["garbage", n] => Fault::Garbage { at: num(n)? },
        ["wrong-id", n] => Fault::WrongId { at: num(n)? },
        ["out-of-range", n] => Fault::OutOfRange { at: num(n)? },
        _ => return Err(format!("bad fault `{s}`")),
    })
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.from_meta {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let meta: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            serde_json::from_value(meta["config"].clone()).context("run_meta.json has no usable `config`")?
        }
        None => args.search.to_config(args.policy, args.seed),
    };
    cfg.dump_crp |= args.dump_crp;
    if cfg.dump_crp && cfg.policy != PolicyKind::Crp {
        bail!("--dump-crp needs --policy crp");
    }
    let result = experiment::execute(&cfg)?;
    experiment::write_artifacts(&args.out, &cfg, &result)?;
    let best = uctnas::report::best(&result.records);
    let mut out = io::stdout().lock();
    writeln!(
        out,
        "{} rollouts ({} failed), {} evaluations, {:.1} s",
        result.records.len() + result.failures.len(),
        result.failures.len(),
        result.backend_calls,
        result.wall_time.as_secs_f64()
    )?;
    if let Some(b) = best {
        writeln!(out, "best {:.6} {} (rollout {})", b.reward, b.architecture, b.rollout_index)?;
    }
    if let Some(e) = result.aborted {
        bail!("search aborted: {e}");
    }
    Ok(())
}

fn print_summary(rows: &[SummaryRow]) -> io::Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{:<8} {:>5} {:>20} {:>20}", "policy", "runs", "best (mean ± std)", "top-5 (mean ± std)")?;
    for r in rows {
        let cell = |m: Option<f64>, s: f64| m.map_or("-".to_string(), |m| format!("{m:.4} ± {s:.4}"));
        writeln!(
            out,
            "{:<8} {:>5} {:>20} {:>20}",
            r.policy.to_string(),
            r.runs - r.failed_runs,
            cell(r.mean_best, r.std_best),
            cell(r.mean_top5, r.std_top5)
        )?;
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let base = args.search.to_config(args.policies[0], 0);
    let cells = experiment::compare(&base, &args.policies, &args.seeds.0)?;
    let summary = experiment::summarize(&cells, &args.policies);
    experiment::write_comparison(&args.out, &cells, &summary)?;
    print_summary(&summary)?;
    let failed = cells.iter().filter(|c| c.result.is_err()).count();
    if failed > 0 {
        bail!("{failed} of {} runs failed", cells.len());
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let cfg = SurrogateConfig {
        seed: args.seed,
        noise_std: args.noise_std,
        ..SurrogateConfig::default()
    };
    serve_surrogate(io::stdin().lock(), io::stdout().lock(), &cfg, &SpaceConfig::default(), args.fault)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::ServeSurrogate(a) => serve(a),
    }
}

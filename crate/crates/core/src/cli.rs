//! Command-line front end: `gen`, `train`, `solve` and `eval`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::instance::{generate_with, read_jsonl, write_jsonl, CapacityRule, ProblemKind};
use crate::oracle::verify_tour;
use crate::par::{self, Exec};
use crate::rng;
use crate::search::{read_results, solve_many, write_results, ResultRecord, SolveConfig};
use crate::training::{train, Config};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_DATA: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "nkopt", about = "Learned k-opt local search for TSP and CVRP")]
pub struct Cli {
    /// Maximum worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a uniform random dataset as JSONL.
    Gen {
        #[arg(long)]
        problem: ProblemKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        capacity: Option<u32>,
        #[arg(long)]
        depot_copies: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve every instance in a dataset with a trained model.
    Solve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        instances: PathBuf,
        #[arg(long = "T")]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        d2a: usize,
        #[arg(long = "t-d2a", default_value_t = 10)]
        t_d2a: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare results against reference optima.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_) | Error::SizeLimit(_) => EXIT_USAGE,
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::MalformedInput(_) | Error::UnsupportedFormat(_) | Error::Io(_) | Error::Json(_) => {
            EXIT_DATA
        }
        _ => EXIT_INTERNAL,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(t) = cli.threads {
        par::set_threads(t);
    }
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen { problem, n, count, seed, capacity, depot_copies, out } => {
            cmd_gen(problem, n, count, seed, CapacityRule { capacity, depot_copies }, &out)
        }
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Solve { ckpt, instances, steps, d2a, t_d2a, seed, out } => {
            cmd_solve(&ckpt, &instances, steps, d2a, t_d2a, seed, &out)
        }
        Command::Eval { results, reference, out } => {
            let s = cmd_eval(&results, &reference)?;
            let line = serde_json::to_string(&s)?;
            println!("{line}");
            if let Some(p) = out {
                std::fs::write(p, line + "\n")?;
            }
            Ok(())
        }
    }
}

pub fn cmd_gen(problem: ProblemKind, n: usize, count: usize, seed: u64, rule: CapacityRule, out: &Path) -> Result<()> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("--n must be at least 3, got {n}")));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("--count must be positive".into()));
    }
    let instances = (0..count)
        .map(|i| {
            let mut r = rng::stream(seed, &[i as u64]);
            generate_with(problem, n, &mut r, rule, format!("{problem}{n}-{seed}-{i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(out, &instances)
}

pub fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", config.display())))?;
    let cfg = Config::from_kv(&text)?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.to_kv())?;
    let mut log = csv::Writer::from_path(out.join("log.csv")).map_err(|e| Error::Data(e.to_string()))?;
    let outcome = train(&cfg, Exec::Parallel, |report, ckpt| {
        ckpt.save(out.join(format!("epoch_{:03}.json", report.epoch)))?;
        log.serialize(report).map_err(|e| Error::Data(e.to_string()))?;
        log.flush()?;
        eprintln!(
            "epoch {}: train obj {:.4}, val obj {:.4}, lr {:.3e}",
            report.epoch, report.mean_obj, report.val_obj, report.lr
        );
        Ok(())
    })?;
    outcome.best.save(out.join("best.json"))
}

pub fn cmd_solve(
    ckpt: &Path,
    instances: &Path,
    steps: usize,
    d2a: usize,
    t_d2a: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if steps == 0 {
        return Err(Error::InvalidArgument("--T must be at least 1".into()));
    }
    if d2a == 0 || t_d2a == 0 {
        return Err(Error::InvalidArgument("--d2a and --t-d2a must be at least 1".into()));
    }
    let ck = Checkpoint::load(ckpt)?;
    let (policy, _) = ck.restore()?;
    let insts = read_jsonl(instances)?;
    if let Some(bad) = insts.iter().find(|i| i.kind != ck.config.problem) {
        return Err(Error::Config(format!(
            "checkpoint is for {} but instance `{}` is {}",
            ck.config.problem, bad.id, bad.kind
        )));
    }
    let cfg = SolveConfig { steps, n_aug: d2a, t_d2a, k: ck.config.k, env: ck.config.env_config(), seed };
    let results = solve_many(&insts, &policy, &cfg, Exec::Parallel)?;
    for (inst, r) in insts.iter().zip(&results) {
        let rep = verify_tour(inst, &r.best_tour);
        if !rep.is_valid_tour() {
            return Err(Error::Internal(format!("solution for `{}` failed verification: {:?}", inst.id, rep.failures)));
        }
    }
    let records: Vec<ResultRecord> = results.iter().map(|r| r.record()).collect();
    write_results(out, &records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_objective: f64,
    /// Mean of `(cost - opt) / opt`.
    pub mean_gap: f64,
    pub feasibility_rate: f64,
}

pub fn evaluate(results: &[ResultRecord], reference: &[ResultRecord]) -> Result<EvalSummary> {
    let refs: HashMap<&str, f64> = reference.iter().map(|r| (r.id.as_str(), r.best_cost)).collect();
    let ids: HashMap<&str, ()> = results.iter().map(|r| (r.id.as_str(), ())).collect();
    if let Some(missing) = reference.iter().find(|r| !ids.contains_key(r.id.as_str())) {
        return Err(Error::Data(format!("no result for reference id `{}`", missing.id)));
    }
    let mut gap = 0.0;
    let mut obj = 0.0;
    let mut feasible = 0usize;
    for r in results {
        let opt = *refs.get(r.id.as_str()).ok_or_else(|| Error::Data(format!("no reference for id `{}`", r.id)))?;
        gap += (r.best_cost - opt) / opt;
        obj += r.best_cost;
        feasible += usize::from(r.feasible);
    }
    let n = results.len().max(1) as f64;
    Ok(EvalSummary { count: results.len(), mean_objective: obj / n, mean_gap: gap / n, feasibility_rate: feasible as f64 / n })
}

pub fn cmd_eval(results: &Path, reference: &Path) -> Result<EvalSummary> {
    evaluate(&read_results(results)?, &read_results(reference)?)
}

//! Command-line front end.
//!
//! Exit codes: 0 ok, 1 input error, 2 infeasible, 3 non-termination,
//! 4 cap exceeded, 5 oracle disagreement.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::oracle::{self, OracleError};
use crate::parallel::Execution;
use crate::scenario_io::{
    parse_scenario, serialize_scenario, write_metrics_csv, write_trajectory_csv, AgentSpec, Scenario,
};
use crate::sim::{self, RunOutcome};
use crate::stochastic::{build_ctmc, ensemble_stats, ssa_run};
use crate::sweep::{run_sweep, SweepConfig, SweepError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_NONTERMINATION: i32 = 3;
pub const EXIT_CAP: i32 = 4;
pub const EXIT_DISAGREEMENT: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "waveflow", version, about = "Wave-based role reallocation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write its metrics and final configuration.
    Run(RunArgs),
    /// Ask the oracle whether the post-failure state is feasible.
    Check(CheckArgs),
    /// Simulate the population CTMC.
    Ssa(SsaArgs),
    /// Run random scenarios and compare each with the oracle.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// Defaults to the scenario's own seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for metrics.csv and final.scenario; metrics go to stdout
    /// when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub scenario: PathBuf,
}

#[derive(Debug, Args)]
pub struct SsaArgs {
    /// Number of agents.
    #[arg(long, default_value_t = 3)]
    pub agents: u32,
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.0)]
    pub p_infeasible: f64,
    #[arg(long, default_value_t = 100.0)]
    pub t_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Ensemble size for first-passage statistics; 0 skips the ensemble.
    #[arg(long, default_value_t = 0)]
    pub runs: usize,
    /// Trajectory CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Agent count `N` or inclusive range `A..B`.
    #[arg(long, default_value = "4..8", value_parser = parse_range)]
    pub agents: RangeInclusive<usize>,
    /// Simultaneous failures per scenario.
    #[arg(long, default_value_t = 1)]
    pub failures: usize,
    /// Runs per agent count.
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep scenarios whose post-failure state is infeasible.
    #[arg(long)]
    pub include_infeasible: bool,
    /// Disable data-parallel execution.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long, hide = true)]
    pub inject_disagreement: bool,
}

fn parse_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let bound = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"));
    let range = match s.split_once("..") {
        Some((a, b)) => bound(a)?..=bound(b)?,
        None => {
            let n = bound(s)?;
            n..=n
        }
    };
    if range.is_empty() {
        return Err(format!("empty range `{s}`"));
    }
    Ok(range)
}

fn load(path: &Path, err: &mut dyn Write) -> Result<Scenario, i32> {
    let text = fs::read_to_string(path).map_err(|e| {
        let _ = writeln!(err, "error: cannot read {}: {e}", path.display());
        EXIT_INPUT
    })?;
    parse_scenario(&text).map_err(|e| {
        let _ = writeln!(err, "error: {}: {e}", path.display());
        EXIT_INPUT
    })
}

fn write_output(path: &Path, text: &str, err: &mut dyn Write) -> Result<(), i32> {
    fs::write(path, text).map_err(|e| {
        let _ = writeln!(err, "error: cannot write {}: {e}", path.display());
        EXIT_INPUT
    })
}

/// The scenario as it stands after a run: final steps, failed
/// capabilities removed, no pending failures.
pub fn final_scenario(scenario: &Scenario, outcome: &RunOutcome) -> Scenario {
    let agents = outcome
        .final_agents
        .iter()
        .map(|(id, agent)| {
            let spec = AgentSpec { capabilities: agent.actable_capabilities(), step: outcome.final_config.step_of(id) };
            (id.clone(), spec)
        })
        .collect();
    Scenario { agents, failures: Vec::new(), ..scenario.clone() }
}

fn cmd_run(args: &RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, i32> {
    let scenario = load(&args.scenario, err)?;
    let seed = args.seed.unwrap_or(scenario.params.seed);
    let outcome = sim::run(&scenario, seed).map_err(|e| {
        let _ = writeln!(err, "error: simulation failed: {e}");
        EXIT_INPUT
    })?;
    let csv = write_metrics_csv(std::slice::from_ref(&outcome.metrics));
    match &args.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| {
                let _ = writeln!(err, "error: cannot create {}: {e}", dir.display());
                EXIT_INPUT
            })?;
            write_output(&dir.join("metrics.csv"), &csv, err)?;
            // Actable capabilities only, so an infeasible end state may not
            // re-validate as an initial configuration.
            let text = serialize_scenario(&final_scenario(&scenario, &outcome));
            write_output(&dir.join("final.scenario"), &text, err)?;
        }
        None => {
            let _ = out.write_all(csv.as_bytes());
        }
    }
    let m = &outcome.metrics;
    Ok(if m.non_terminated {
        let _ = writeln!(err, "non-termination: protocol still active at t_max");
        EXIT_NONTERMINATION
    } else if m.infeasible {
        EXIT_INFEASIBLE
    } else {
        EXIT_OK
    })
}

fn cmd_check(args: &CheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, i32> {
    let scenario = load(&args.scenario, err)?;
    match oracle::check_scenario(&scenario) {
        Ok(r) if r.feasible => {
            let _ = writeln!(out, "feasible min_changes={}", r.min_changes.expect("feasible has min_changes"));
            Ok(EXIT_OK)
        }
        Ok(_) => {
            let _ = writeln!(out, "infeasible");
            Ok(EXIT_INFEASIBLE)
        }
        Err(e @ OracleError::CapExceeded { .. }) => {
            let _ = writeln!(err, "error: {e}");
            Err(EXIT_CAP)
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            Err(EXIT_DISAGREEMENT)
        }
    }
}

fn cmd_ssa(args: &SsaArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, i32> {
    let spec = build_ctmc(args.agents, args.lambda, args.mu, args.p_infeasible).map_err(|e| {
        let _ = writeln!(err, "error: {e}");
        EXIT_INPUT
    })?;
    let csv = write_trajectory_csv(&ssa_run(&spec, args.seed, args.t_max));
    let summary = (args.runs > 0).then(|| {
        let s = ensemble_stats(&spec, args.runs, args.seed, args.t_max, Execution::default());
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        format!(
            "first_passage runs={} reached={} mean={} variance={} std_err={}",
            s.runs,
            s.reached,
            fmt(s.mean),
            fmt(s.variance),
            fmt(s.std_err)
        )
    });
    match &args.out {
        Some(path) => {
            write_output(path, &csv, err)?;
            if let Some(line) = summary {
                let _ = writeln!(out, "{line}");
            }
        }
        None => {
            let _ = out.write_all(csv.as_bytes());
            if let Some(line) = summary {
                let _ = writeln!(err, "{line}");
            }
        }
    }
    Ok(EXIT_OK)
}

fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32, i32> {
    let cfg = SweepConfig {
        agents: args.agents.clone(),
        failures: args.failures,
        runs: args.runs,
        seed0: args.seed,
        include_infeasible: args.include_infeasible,
        execution: if args.sequential { Execution::Sequential } else { Execution::Parallel },
        inject_disagreement: args.inject_disagreement,
        ..SweepConfig::default()
    };
    let report = run_sweep(&cfg).map_err(|e| {
        let _ = writeln!(err, "error: {e}");
        match e {
            SweepError::CapExceeded(_) | SweepError::Oracle(OracleError::CapExceeded { .. }) => EXIT_CAP,
            SweepError::Disagreement { .. } | SweepError::Oracle(_) => EXIT_DISAGREEMENT,
            SweepError::Sim { .. } => EXIT_INPUT,
        }
    })?;
    let csv = report.to_csv();
    match &args.out {
        Some(path) => write_output(path, &csv, err)?,
        None => {
            let _ = out.write_all(csv.as_bytes());
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a, out, err),
        Command::Check(a) => cmd_check(a, out, err),
        Command::Ssa(a) => cmd_ssa(a, out, err),
        Command::Sweep(a) => cmd_sweep(a, out, err),
    };
    result.unwrap_or_else(|code| code)
}

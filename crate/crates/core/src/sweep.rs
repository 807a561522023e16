//! Random scenario generation and bulk wave-versus-oracle sweeps.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{validate_configuration, AgentId, Capability, Task, TransportGraph};
use crate::oracle::{self, OracleError, OracleResult, MAX_AGENTS};
use crate::parallel::{map_indexed, Execution};
use crate::protocol::message_bound;
use crate::scenario_io::{metrics_row, AgentSpec, FailureSpec, Params, Scenario, METRICS_HEADER};
use crate::sim::{self, Metrics, RunOutcome, SimError};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub max_steps: usize,
    /// Chance that a step's capability gets a second holder.
    pub p_second_holder: f64,
    /// Chance, per agent and task capability, of an extra capability.
    pub p_extra_capability: f64,
    pub failure_time: SimTime,
    pub resource_arrivals: Vec<SimTime>,
    /// Attempts per run when only feasible scenarios are wanted.
    pub max_attempts: usize,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            max_steps: 6,
            p_second_holder: 0.8,
            p_extra_capability: 0.15,
            failure_time: SimTime::from_units(10),
            resource_arrivals: vec![SimTime::ZERO, SimTime::from_units(4), SimTime::from_units(8)],
            max_attempts: 1000,
        }
    }
}

impl GeneratorParams {
    /// `#`-prefixed lines recording the generator settings.
    pub fn comment_lines(&self, seed0: u64) -> Vec<String> {
        vec![
            format!("# generator seed0={seed0} max_steps={}", self.max_steps),
            format!(
                "# generator p_second_holder={} p_extra_capability={}",
                self.p_second_holder, self.p_extra_capability
            ),
            format!(
                "# generator failure_time={} resources={}",
                self.failure_time,
                self.resource_arrivals.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
            ),
        ]
    }
}

/// A random full-transport scenario with a valid initial configuration.
/// `n_failures` distinct role holders lose their role's capability at the
/// same instant; the task gets at least `n_failures` steps so that many
/// holders exist, capped by `n_agents` and `max_steps`.
pub fn generate(n_agents: usize, n_failures: usize, seed: u64, params: &GeneratorParams) -> Scenario {
    assert!(n_agents >= 1, "need at least one agent");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k_max = params.max_steps.min(n_agents).max(1);
    let k = rng.random_range(n_failures.clamp(1, k_max)..=k_max);
    let steps: Vec<Capability> = (1..=k).map(|i| Capability::from(format!("c{i}").as_str())).collect();
    let width = n_agents.to_string().len().max(2);
    let ids: Vec<AgentId> = (1..=n_agents).map(|i| AgentId::new(format!("a{i:0width$}")).expect("valid id")).collect();

    let mut order = ids.clone();
    order.shuffle(&mut rng);
    let mut agents: BTreeMap<AgentId, AgentSpec> =
        ids.iter().map(|id| (id.clone(), AgentSpec { capabilities: BTreeSet::new(), step: None })).collect();
    for (step, holder) in order.iter().take(k).enumerate() {
        let spec = agents.get_mut(holder).expect("known id");
        spec.step = Some(step);
        spec.capabilities.insert(steps[step].clone());
    }
    for (step, cap) in steps.iter().enumerate() {
        if n_agents > 1 && rng.random_bool(params.p_second_holder) {
            let others: Vec<&AgentId> = ids.iter().filter(|id| **id != order[step]).collect();
            let extra = (*others.choose(&mut rng).expect("another agent")).clone();
            agents.get_mut(&extra).expect("known id").capabilities.insert(cap.clone());
        }
    }
    for id in &ids {
        for cap in &steps {
            if rng.random_bool(params.p_extra_capability) {
                agents.get_mut(id).expect("known id").capabilities.insert(cap.clone());
            }
        }
    }
    // The scenario grammar needs at least one capability per agent.
    for spec in agents.values_mut() {
        if spec.capabilities.is_empty() {
            spec.capabilities.insert(steps.choose(&mut rng).expect("k >= 1").clone());
        }
    }

    let mut holders: Vec<usize> = (0..k).collect();
    holders.shuffle(&mut rng);
    let mut failures: Vec<FailureSpec> = holders
        .into_iter()
        .take(n_failures.min(k))
        .map(|step| FailureSpec {
            time: params.failure_time,
            agent: order[step].clone(),
            capability: steps[step].clone(),
        })
        .collect();
    failures.sort_by(|a, b| a.agent.cmp(&b.agent));

    Scenario {
        params: Params { seed, ..Params::default() },
        task: Task::new(steps).expect("k >= 1"),
        agents,
        transport: TransportGraph::full(),
        failures,
        resources: params.resource_arrivals.clone(),
    }
}

/// Draws scenarios until the post-failure state is feasible.
pub fn generate_feasible(
    n_agents: usize,
    n_failures: usize,
    seed: u64,
    params: &GeneratorParams,
) -> Result<(Scenario, OracleResult), OracleError> {
    let mut last = None;
    for attempt in 0..params.max_attempts as u64 {
        let s = generate(n_agents, n_failures, seed.wrapping_mul(1_000_003).wrapping_add(attempt), params);
        let verdict = oracle::check_scenario(&s)?;
        if verdict.feasible {
            let mut s = s;
            s.params.seed = seed;
            return Ok((s, verdict));
        }
        last = Some((s, verdict));
    }
    let (mut s, verdict) = last.expect("at least one attempt");
    s.params.seed = seed;
    Ok((s, verdict))
}

/// Checks one run against the oracle. Returns a description of the first
/// disagreement found.
///
/// Every run must terminate, leave no tentative adoption behind and, when
/// it converged, end in a valid configuration whose changed agents are
/// the committed chains. With a single failure (full transport)
/// the wave must also commit exactly when the oracle finds the state
/// feasible, change at least the minimal number of agents and stay within
/// the per-wave message bound.
pub fn check_agreement(scenario: &Scenario, outcome: &RunOutcome, verdict: &OracleResult) -> Result<(), String> {
    let m = &outcome.metrics;
    if m.non_terminated {
        return Err("run did not terminate".into());
    }
    if !outcome.tentative_residue.is_empty() {
        return Err(format!("tentative roles left at {:?}", outcome.tentative_residue));
    }
    let n = scenario.agents.len();
    let single = scenario.failures.len() == 1;
    if let Some((wave, count)) = outcome.wave_messages.iter().find(|(_, &c)| c as usize > message_bound(n)) {
        return Err(format!("wave {wave:?} sent {count} messages, bound {}", message_bound(n)));
    }
    if m.converged {
        let report =
            validate_configuration(&outcome.final_config, &scenario.task, &outcome.final_agents, &scenario.transport);
        if !report.valid {
            return Err(format!("final configuration invalid: {:?}", report.violations));
        }
        // Later waves may move an agent back, so only one wave pins equality.
        let (changed, chain) = (outcome.changed_agents(), outcome.chain_agents());
        let local = if single { changed == chain } else { changed.is_subset(&chain) };
        if !local {
            return Err(format!("changed agents {changed:?} do not match chain agents {chain:?}"));
        }
    }
    if single && m.converged != verdict.feasible {
        return Err(format!("wave converged={} but oracle feasible={}", m.converged, verdict.feasible));
    }
    if single && m.infeasible == verdict.feasible {
        return Err(format!("wave infeasible={} but oracle feasible={}", m.infeasible, verdict.feasible));
    }
    if let (true, Some(min)) = (m.converged, verdict.min_changes) {
        if m.n_role_changes < min {
            return Err(format!("{} role changes, below the minimum {min}", m.n_role_changes));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub agents: RangeInclusive<usize>,
    pub failures: usize,
    /// Runs per agent count.
    pub runs: usize,
    pub seed0: u64,
    /// Keep scenarios whose post-failure state is infeasible instead of
    /// rejection-sampling for feasible ones.
    pub include_infeasible: bool,
    pub execution: Execution,
    pub generator: GeneratorParams,
    /// Test hook: corrupt the first converged run's final configuration.
    pub inject_disagreement: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            agents: 4..=8,
            failures: 1,
            runs: 100,
            seed0: 0,
            include_infeasible: false,
            execution: Execution::default(),
            generator: GeneratorParams::default(),
            inject_disagreement: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub n_agents: usize,
    pub metrics: Metrics,
    pub oracle_feasible: bool,
    pub min_changes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error("agent range {0:?} is outside 1..={MAX_AGENTS}")]
    CapExceeded(RangeInclusive<usize>),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("run {index} (seed {seed}): {source}")]
    Sim { index: usize, seed: u64, source: SimError },
    #[error("run {index} (seed {seed}) disagrees with the oracle: {detail}")]
    Disagreement { index: usize, seed: u64, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub comments: Vec<String>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str(c);
            out.push('\n');
        }
        out.push_str(METRICS_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&metrics_row(&row.metrics));
            out.push('\n');
        }
        out
    }
}

fn sweep_one(cfg: &SweepConfig, index: usize, n_agents: usize) -> Result<SweepRow, SweepError> {
    let seed = cfg.seed0 + index as u64;
    let (scenario, verdict) = if cfg.include_infeasible {
        let s = generate(n_agents, cfg.failures, seed, &cfg.generator);
        let v = oracle::check_scenario(&s)?;
        (s, v)
    } else {
        generate_feasible(n_agents, cfg.failures, seed, &cfg.generator)?
    };
    let mut outcome = sim::run(&scenario, seed).map_err(|source| SweepError::Sim { index, seed, source })?;
    if cfg.inject_disagreement && index == 0 {
        outcome.final_config = outcome.initial_config.clone();
        outcome.metrics.converged = true;
    }
    check_agreement(&scenario, &outcome, &verdict).map_err(|detail| SweepError::Disagreement {
        index,
        seed,
        detail,
    })?;
    Ok(SweepRow {
        index,
        n_agents,
        metrics: outcome.metrics,
        oracle_feasible: verdict.feasible,
        min_changes: verdict.min_changes,
    })
}

/// Runs every cell of the sweep; rows come back in run-index order.
/// The first disagreement (lowest index) is reported.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepReport, SweepError> {
    if *cfg.agents.start() < 1 || *cfg.agents.end() > MAX_AGENTS {
        return Err(SweepError::CapExceeded(cfg.agents.clone()));
    }
    let cells: Vec<usize> = cfg.agents.clone().flat_map(|n| std::iter::repeat_n(n, cfg.runs)).collect();
    let results = map_indexed(cells.len(), cfg.execution, |i| sweep_one(cfg, i, cells[i]));
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut comments = cfg.generator.comment_lines(cfg.seed0);
    comments.push(format!(
        "# sweep agents={}..{} failures={} runs={} include_infeasible={}",
        cfg.agents.start(),
        cfg.agents.end(),
        cfg.failures,
        cfg.runs,
        cfg.include_infeasible
    ));
    Ok(SweepReport { rows, comments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario_io::{parse_scenario, serialize_scenario};

    #[test]
    fn generated_scenarios_are_valid_and_reproducible() {
        let params = GeneratorParams::default();
        for seed in 0..200 {
            let s = generate(7, 2, seed, &params);
            assert_eq!(s, generate(7, 2, seed, &params));
            let text = serialize_scenario(&s);
            assert_eq!(parse_scenario(&text).unwrap(), s, "seed {seed}");
            assert!(s.failures.len() <= 2);
        }
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let report = run_sweep(&SweepConfig { runs: 0, ..SweepConfig::default() }).unwrap();
        assert!(report.rows.is_empty());
        assert!(report.to_csv().ends_with(&format!("{METRICS_HEADER}\n")));
    }

    #[test]
    fn small_sweep_agrees_with_oracle() {
        let cfg = SweepConfig { agents: 3..=5, runs: 20, include_infeasible: true, ..SweepConfig::default() };
        let report = run_sweep(&cfg).unwrap();
        assert_eq!(report.rows.len(), 60);
        assert!(report.rows.windows(2).all(|w| w[0].index < w[1].index));
    }

    #[test]
    fn injected_disagreement_is_caught() {
        let cfg = SweepConfig { agents: 4..=4, runs: 3, inject_disagreement: true, ..SweepConfig::default() };
        assert!(matches!(run_sweep(&cfg), Err(SweepError::Disagreement { index: 0, .. })));
    }
}

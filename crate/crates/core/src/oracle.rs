//! Centralized brute-force reference for reconfiguration questions.
//!
//! Everything here is exhaustive and only meant for desk-scale instances
//! (at most [`MAX_AGENTS`] agents and [`MAX_STEPS`] steps).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{Agent, AgentId, Configuration, Task, TransportGraph, TransportMode};
use crate::scenario_io::Scenario;

pub const MAX_AGENTS: usize = 12;
pub const MAX_STEPS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("{agents} agents / {steps} steps exceed the oracle caps ({MAX_AGENTS} / {MAX_STEPS})")]
    CapExceeded { agents: usize, steps: usize },
    #[error("no valid configuration exists")]
    InfeasibleScenario,
    #[error("exhaustive search says feasible={exhaustive}, matching says feasible={matching}")]
    InternalDisagreement { exhaustive: bool, matching: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleResult {
    pub feasible: bool,
    /// A valid configuration with the fewest role changes.
    pub witness: Option<Configuration>,
    pub min_changes: Option<usize>,
}

fn check_caps(agents: &BTreeMap<AgentId, Agent>, task: &Task) -> Result<(), OracleError> {
    if agents.len() > MAX_AGENTS || task.len() > MAX_STEPS {
        return Err(OracleError::CapExceeded { agents: agents.len(), steps: task.len() });
    }
    Ok(())
}

/// Backtracking over injective step assignments. With a `limit`, only
/// assignments changing at most that many agents relative to `pre` are
/// accepted (an agent changes when its step differs, including becoming
/// idle or leaving idleness).
struct Search<'a> {
    task: &'a Task,
    transport: &'a TransportGraph,
    ids: Vec<&'a AgentId>,
    agents: Vec<&'a Agent>,
    pre_step: Vec<Option<usize>>,
    pre_holder: Vec<Option<usize>>,
    limit: Option<u32>,
    chosen: Vec<usize>,
    used: u16,
    changed: u16,
}

impl<'a> Search<'a> {
    fn new(
        pre: &Configuration,
        agents: &'a BTreeMap<AgentId, Agent>,
        task: &'a Task,
        transport: &'a TransportGraph,
    ) -> Self {
        let ids: Vec<&AgentId> = agents.keys().collect();
        let index = |a: &AgentId| ids.iter().position(|id| *id == a);
        Search {
            task,
            transport,
            pre_step: ids.iter().map(|id| pre.step_of(id)).collect(),
            pre_holder: (0..task.len()).map(|s| pre.holder(s).and_then(index)).collect(),
            agents: agents.values().collect(),
            ids,
            limit: None,
            chosen: Vec::with_capacity(task.len()),
            used: 0,
            changed: 0,
        }
    }

    fn run(&mut self, limit: Option<u32>) -> Option<BTreeMap<usize, AgentId>> {
        self.limit = limit;
        self.chosen.clear();
        self.used = 0;
        self.changed = 0;
        if self.extend() {
            Some(self.chosen.iter().enumerate().map(|(s, &a)| (s, self.ids[a].clone())).collect())
        } else {
            None
        }
    }

    fn extend(&mut self) -> bool {
        let step = self.chosen.len();
        if step == self.task.len() {
            return true;
        }
        let required = &self.task.steps()[step];
        for a in 0..self.agents.len() {
            let bit = 1_u16 << a;
            if self.used & bit != 0 || !self.agents[a].can_act(required) {
                continue;
            }
            if self.transport.mode == TransportMode::Explicit {
                if let Some(&prev) = self.chosen.last() {
                    if !self.transport.has_edge(self.ids[prev], self.ids[a]) {
                        continue;
                    }
                }
            }
            let mut changed = self.changed;
            if self.pre_step[a] != Some(step) {
                changed |= bit;
            }
            if let Some(h) = self.pre_holder[step].filter(|&h| h != a) {
                changed |= 1 << h;
            }
            if self.limit.is_some_and(|l| changed.count_ones() > l) {
                continue;
            }
            let saved = self.changed;
            self.changed = changed;
            self.used |= bit;
            self.chosen.push(a);
            if self.extend() {
                return true;
            }
            self.chosen.pop();
            self.used &= !bit;
            self.changed = saved;
        }
        false
    }
}

/// Exhaustive backtracking feasibility; honours directed transport
/// adjacency between consecutive steps in explicit mode.
pub fn exhaustive_feasible(
    agents: &BTreeMap<AgentId, Agent>,
    task: &Task,
    transport: &TransportGraph,
) -> Result<Option<BTreeMap<usize, AgentId>>, OracleError> {
    check_caps(agents, task)?;
    Ok(Search::new(&Configuration::default(), agents, task, transport).run(None))
}

/// Perfect step/agent matching by augmenting paths (Kuhn). Ignores
/// transport, so it is only a feasibility test in full mode.
pub fn matching_feasible(agents: &BTreeMap<AgentId, Agent>, task: &Task) -> bool {
    let agents: Vec<&Agent> = agents.values().collect();
    let mut owner: Vec<Option<usize>> = vec![None; agents.len()];

    fn augment(step: usize, task: &Task, agents: &[&Agent], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
        for a in 0..agents.len() {
            if seen[a] || !agents[a].can_act(&task.steps()[step]) {
                continue;
            }
            seen[a] = true;
            if owner[a].is_none_or(|other| augment(other, task, agents, owner, seen)) {
                owner[a] = Some(step);
                return true;
            }
        }
        false
    }

    (0..task.len()).all(|step| {
        let mut seen = vec![false; agents.len()];
        augment(step, task, &agents, &mut owner, &mut seen)
    })
}

/// Smallest number of agents whose step differs from `pre` over all valid
/// configurations, by iterative deepening on that number.
pub fn min_changes(
    pre: &Configuration,
    agents: &BTreeMap<AgentId, Agent>,
    task: &Task,
    transport: &TransportGraph,
) -> Result<usize, OracleError> {
    min_change_witness(pre, agents, task, transport).map(|(n, _)| n)
}

fn min_change_witness(
    pre: &Configuration,
    agents: &BTreeMap<AgentId, Agent>,
    task: &Task,
    transport: &TransportGraph,
) -> Result<(usize, BTreeMap<usize, AgentId>), OracleError> {
    check_caps(agents, task)?;
    let mut search = Search::new(pre, agents, task, transport);
    for limit in 0..=agents.len() as u32 {
        if let Some(assignment) = search.run(Some(limit)) {
            return Ok((limit as usize, assignment));
        }
    }
    Err(OracleError::InfeasibleScenario)
}

/// Feasibility, a minimum-change witness and the minimum change count.
/// In full mode the exhaustive and matching answers must agree.
pub fn feasible(
    pre: &Configuration,
    agents: &BTreeMap<AgentId, Agent>,
    task: &Task,
    transport: &TransportGraph,
) -> Result<OracleResult, OracleError> {
    let exhaustive = exhaustive_feasible(agents, task, transport)?.is_some();
    if transport.mode == TransportMode::Full {
        let matching = matching_feasible(agents, task);
        if matching != exhaustive {
            return Err(OracleError::InternalDisagreement { exhaustive, matching });
        }
    }
    if !exhaustive {
        return Ok(OracleResult { feasible: false, witness: None, min_changes: None });
    }
    let (n, assignment) = min_change_witness(pre, agents, task, transport)?;
    let witness = Configuration::wired(task, assignment).expect("steps in range");
    Ok(OracleResult { feasible: true, witness: Some(witness), min_changes: Some(n) })
}

/// Oracle answer for the state after every scheduled failure of `scenario`.
pub fn check_scenario(scenario: &Scenario) -> Result<OracleResult, OracleError> {
    feasible(&scenario.initial_configuration(), &scenario.failed_agents(), &scenario.task, &scenario.transport)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_configuration, Capability};

    fn agent(id: &str, caps: &[&str], broken: &[&str]) -> (AgentId, Agent) {
        let mut a = Agent::new(id.into(), caps.iter().map(|&c| Capability::from(c)));
        for &b in broken {
            a.break_capability(&b.into()).unwrap();
        }
        (id.into(), a)
    }

    fn task(caps: &[&str]) -> Task {
        Task::new(caps.iter().map(|&c| c.into()).collect()).unwrap()
    }

    fn config(task: &Task, holders: &[&str]) -> Configuration {
        Configuration::wired(task, holders.iter().enumerate().map(|(s, &a)| (s, a.into())).collect()).unwrap()
    }

    /// Independent reference: enumerate every injective assignment.
    fn all_valid(agents: &BTreeMap<AgentId, Agent>, task: &Task, transport: &TransportGraph) -> Vec<Configuration> {
        let ids: Vec<AgentId> = agents.keys().cloned().collect();
        let mut out = Vec::new();
        let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
        while let Some(partial) = stack.pop() {
            if partial.len() == task.len() {
                let c =
                    Configuration::wired(task, partial.iter().enumerate().map(|(s, &a)| (s, ids[a].clone())).collect())
                        .unwrap();
                if validate_configuration(&c, task, agents, transport).valid {
                    out.push(c);
                }
                continue;
            }
            for a in 0..ids.len() {
                if !partial.contains(&a) {
                    let mut next = partial.clone();
                    next.push(a);
                    stack.push(next);
                }
            }
        }
        out
    }

    fn hamming(pre: &Configuration, post: &Configuration, agents: &BTreeMap<AgentId, Agent>) -> usize {
        agents.keys().filter(|a| pre.step_of(a) != post.step_of(a)).count()
    }

    #[test]
    fn spare_takes_the_broken_step() {
        let t = task(&["c1", "c2", "c3"]);
        let agents = BTreeMap::from([
            agent("a1", &["c1"], &["c1"]),
            agent("a2", &["c2"], &[]),
            agent("a3", &["c3"], &[]),
            agent("a4", &["c1"], &[]),
        ]);
        let pre = config(&t, &["a1", "a2", "a3"]);
        let r = feasible(&pre, &agents, &t, &TransportGraph::full()).unwrap();
        assert!(r.feasible);
        assert_eq!(r.witness.unwrap().holder(0), Some(&"a4".into()));
        assert_eq!(all_valid(&agents, &t, &TransportGraph::full()).len(), 1);
    }

    #[test]
    fn no_spare_is_infeasible() {
        let t = task(&["c1", "c2"]);
        let agents = BTreeMap::from([agent("a1", &["c1"], &["c1"]), agent("a2", &["c2"], &[])]);
        let pre = config(&t, &["a1", "a2"]);
        let r = feasible(&pre, &agents, &t, &TransportGraph::full()).unwrap();
        assert_eq!(r, OracleResult { feasible: false, witness: None, min_changes: None });
        assert_eq!(min_changes(&pre, &agents, &t, &TransportGraph::full()), Err(OracleError::InfeasibleScenario));
    }

    #[test]
    fn desk_min_changes_match_enumeration() {
        let t = task(&["c1", "c2", "c3"]);
        let w1 = BTreeMap::from([
            agent("a1", &["c1", "c2"], &["c1"]),
            agent("a2", &["c1", "c2"], &[]),
            agent("a3", &["c3"], &[]),
        ]);
        let w2 = BTreeMap::from([
            agent("a1", &["c1", "c3"], &["c1"]),
            agent("a2", &["c1", "c2"], &[]),
            agent("a3", &["c2", "c3"], &[]),
        ]);
        let healthy = BTreeMap::from([agent("a1", &["c1"], &[]), agent("a2", &["c2"], &[]), agent("a3", &["c3"], &[])]);
        let pre = config(&t, &["a1", "a2", "a3"]);
        for (agents, expected) in [(&w1, 2), (&w2, 3), (&healthy, 0)] {
            let brute =
                all_valid(agents, &t, &TransportGraph::full()).iter().map(|c| hamming(&pre, c, agents)).min().unwrap();
            assert_eq!(brute, expected);
            assert_eq!(min_changes(&pre, agents, &t, &TransportGraph::full()).unwrap(), expected);
        }
    }

    #[test]
    fn explicit_mode_respects_direction() {
        let t = task(&["c1", "c2"]);
        let agents = BTreeMap::from([agent("a", &["c1"], &[]), agent("b", &["c2"], &[])]);
        let forward = TransportGraph::explicit([("a".into(), "b".into())]);
        let backward = TransportGraph::explicit([("b".into(), "a".into())]);
        assert!(exhaustive_feasible(&agents, &t, &forward).unwrap().is_some());
        assert!(exhaustive_feasible(&agents, &t, &backward).unwrap().is_none());
    }

    #[test]
    fn caps_are_enforced() {
        let t = task(&["c1"]);
        let agents: BTreeMap<_, _> = (0..13).map(|i| agent(&format!("a{i:02}"), &["c1"], &[])).collect();
        assert!(matches!(
            exhaustive_feasible(&agents, &t, &TransportGraph::full()),
            Err(OracleError::CapExceeded { .. })
        ));
    }
}

//! Structural model of a resource-flow system: agents with capabilities,
//! a task, roles, configurations and the transport layout.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("unknown capability `{0}`")]
    UnknownCapability(Capability),
    #[error("unknown agent `{0}`")]
    UnknownAgent(AgentId),
    #[error("step {step} out of range for a task of {len} steps")]
    StepOutOfRange { step: usize, len: usize },
    #[error("invalid token `{0}`: expected letters, digits or underscore")]
    InvalidToken(String),
    #[error("a task needs at least one step")]
    EmptyTask,
    #[error("broken chain: {0}")]
    BrokenChain(String),
}

fn is_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

macro_rules! token_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Result<Self, ModelError> {
                let s = s.into();
                if is_token(&s) {
                    Ok($name(s))
                } else {
                    Err(ModelError::InvalidToken(s))
                }
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            /// Panics on an invalid token; intended for literals in tests and examples.
            fn from(s: &str) -> Self {
                $name::new(s).expect("valid token literal")
            }
        }
    };
}

token_newtype!(
    /// Name of something an agent can do to a resource.
    Capability
);
token_newtype!(
    /// Unique agent identifier. Ordering of ids is the deterministic tiebreak
    /// used throughout the protocol.
    AgentId
);

/// Ordered sequence of capabilities every resource must receive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    steps: Vec<Capability>,
}

impl Task {
    pub fn new(steps: Vec<Capability>) -> Result<Self, ModelError> {
        if steps.is_empty() {
            return Err(ModelError::EmptyTask);
        }
        Ok(Task { steps })
    }

    pub fn steps(&self) -> &[Capability] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn required(&self, step: usize) -> Option<&Capability> {
        self.steps.get(step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentState {
    Working,
    Deficient,
    Tentative,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Agent {
    pub id: AgentId,
    pub capabilities: BTreeSet<Capability>,
    /// Always a subset of `capabilities`.
    pub broken: BTreeSet<Capability>,
    pub state: AgentState,
}

impl Agent {
    pub fn new(id: AgentId, capabilities: impl IntoIterator<Item = Capability>) -> Self {
        Agent { id, capabilities: capabilities.into_iter().collect(), broken: BTreeSet::new(), state: AgentState::Idle }
    }

    /// Capability membership without the universe check.
    pub fn can_act(&self, capability: &Capability) -> bool {
        self.capabilities.contains(capability) && !self.broken.contains(capability)
    }

    pub fn actable_capabilities(&self) -> BTreeSet<Capability> {
        self.capabilities.difference(&self.broken).cloned().collect()
    }

    /// Marks `capability` as permanently broken.
    pub fn break_capability(&mut self, capability: &Capability) -> Result<(), ModelError> {
        if !self.capabilities.contains(capability) {
            return Err(ModelError::UnknownCapability(capability.clone()));
        }
        self.broken.insert(capability.clone());
        Ok(())
    }
}

/// Whether `agent` can currently apply `capability`.
pub fn actable(agent: &Agent, capability: &Capability, universe: &BTreeSet<Capability>) -> Result<bool, ModelError> {
    if !universe.contains(capability) {
        return Err(ModelError::UnknownCapability(capability.clone()));
    }
    Ok(agent.can_act(capability))
}

/// Capabilities mentioned anywhere in the task or held by any agent.
pub fn capability_universe<'a>(task: &Task, agents: impl IntoIterator<Item = &'a Agent>) -> BTreeSet<Capability> {
    let mut universe: BTreeSet<Capability> = task.steps().iter().cloned().collect();
    for agent in agents {
        universe.extend(agent.capabilities.iter().cloned());
    }
    universe
}

/// One task step bound to an agent, together with its flow wiring.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Role {
    pub step: usize,
    pub required: Capability,
    pub predecessors: BTreeSet<AgentId>,
    pub successors: BTreeSet<AgentId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum TransportMode {
    #[default]
    Full,
    Explicit,
}

/// Which agents can hand resources (and messages) to which.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TransportGraph {
    pub mode: TransportMode,
    /// Directed edges; only meaningful in explicit mode.
    pub edges: BTreeSet<(AgentId, AgentId)>,
}

impl TransportGraph {
    pub fn full() -> Self {
        TransportGraph::default()
    }

    pub fn explicit(edges: impl IntoIterator<Item = (AgentId, AgentId)>) -> Self {
        TransportGraph { mode: TransportMode::Explicit, edges: edges.into_iter().collect() }
    }

    /// Undirected line `ids[0] – ids[1] – …`, with both directions as edges.
    pub fn line(ids: &[AgentId]) -> Self {
        let edges = ids.windows(2).flat_map(|w| [(w[0].clone(), w[1].clone()), (w[1].clone(), w[0].clone())]);
        TransportGraph::explicit(edges)
    }

    /// Whether a resource may be handed directly from `from` to `to`.
    pub fn has_edge(&self, from: &AgentId, to: &AgentId) -> bool {
        match self.mode {
            TransportMode::Full => from != to,
            TransportMode::Explicit => self.edges.contains(&(from.clone(), to.clone())),
        }
    }

    /// Shortest-path hop count over the undirected closure; `None` if unreachable.
    pub fn hops(&self, from: &AgentId, to: &AgentId) -> Option<u32> {
        if from == to {
            return Some(0);
        }
        match self.mode {
            TransportMode::Full => Some(1),
            TransportMode::Explicit => {
                let mut adjacency: BTreeMap<&AgentId, Vec<&AgentId>> = BTreeMap::new();
                for (a, b) in &self.edges {
                    adjacency.entry(a).or_default().push(b);
                    adjacency.entry(b).or_default().push(a);
                }
                let mut seen: BTreeSet<&AgentId> = BTreeSet::from([from]);
                let mut frontier = VecDeque::from([(from, 0_u32)]);
                while let Some((node, dist)) = frontier.pop_front() {
                    for &next in adjacency.get(node).into_iter().flatten() {
                        if next == to {
                            return Some(dist + 1);
                        }
                        if seen.insert(next) {
                            frontier.push_back((next, dist + 1));
                        }
                    }
                }
                None
            }
        }
    }
}

/// Assignment of task steps to agents plus the wiring it induces.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Configuration {
    pub assignment: BTreeMap<usize, AgentId>,
    pub roles: BTreeMap<AgentId, Role>,
}

impl Configuration {
    /// Builds a configuration whose wiring chains step `i` to step `i + 1`.
    ///
    /// If several steps map to the same agent the last one wins in `roles`;
    /// validation reports the injectivity violation.
    pub fn wired(task: &Task, assignment: BTreeMap<usize, AgentId>) -> Result<Self, ModelError> {
        let mut roles = BTreeMap::new();
        for (&step, agent) in &assignment {
            let required = task.required(step).ok_or(ModelError::StepOutOfRange { step, len: task.len() })?.clone();
            roles.insert(agent.clone(), chain_role(task, &assignment, step, required));
        }
        Ok(Configuration { assignment, roles })
    }

    pub fn holder(&self, step: usize) -> Option<&AgentId> {
        self.assignment.get(&step)
    }

    pub fn step_of(&self, agent: &AgentId) -> Option<usize> {
        self.roles.get(agent).map(|r| r.step)
    }

    /// Step held by every agent in `agents` (`None` for idle agents).
    pub fn steps_by_agent<'a>(
        &self,
        agents: impl IntoIterator<Item = &'a AgentId>,
    ) -> BTreeMap<AgentId, Option<usize>> {
        agents.into_iter().map(|a| (a.clone(), self.step_of(a))).collect()
    }
}

fn chain_role(task: &Task, assignment: &BTreeMap<usize, AgentId>, step: usize, required: Capability) -> Role {
    let predecessors = step.checked_sub(1).and_then(|p| assignment.get(&p)).cloned().into_iter().collect();
    let successors = if step + 1 < task.len() {
        assignment.get(&(step + 1)).cloned().into_iter().collect()
    } else {
        BTreeSet::new()
    };
    Role { step, required, predecessors, successors }
}

/// One failed clause of [`validate_configuration`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Clause (a): step has no agent.
    Unassigned { step: usize },
    /// Clause (a): agent holds more than one step.
    NotInjective { step: usize, agent: AgentId },
    /// Clause (a): assignment references a step beyond the task.
    ExtraStep { step: usize },
    /// Precondition: agent id does not exist.
    UnknownAgent { step: usize, agent: AgentId },
    /// Clause (b): holder cannot act the required capability.
    NotActable { step: usize, agent: AgentId },
    /// Clause (c): wiring does not chain `step → step + 1`.
    Wiring { step: usize },
    /// Clause (d): consecutive holders are not transport neighbours.
    Transport { step: usize, from: AgentId, to: AgentId },
}

impl Violation {
    pub fn clause(&self) -> char {
        match self {
            Violation::Unassigned { .. }
            | Violation::NotInjective { .. }
            | Violation::ExtraStep { .. }
            | Violation::UnknownAgent { .. } => 'a',
            Violation::NotActable { .. } => 'b',
            Violation::Wiring { .. } => 'c',
            Violation::Transport { .. } => 'd',
        }
    }

    pub fn step(&self) -> usize {
        match self {
            Violation::Unassigned { step }
            | Violation::NotInjective { step, .. }
            | Violation::ExtraStep { step }
            | Violation::UnknownAgent { step, .. }
            | Violation::NotActable { step, .. }
            | Violation::Wiring { step }
            | Violation::Transport { step, .. } => *step,
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Unassigned { step } => write!(f, "({}) step {step} unassigned", self.clause()),
            Violation::NotInjective { step, agent } => {
                write!(f, "({}) step {step}: agent {agent} holds several steps", self.clause())
            }
            Violation::ExtraStep { step } => write!(f, "({}) step {step} beyond task", self.clause()),
            Violation::UnknownAgent { step, agent } => {
                write!(f, "({}) step {step}: unknown agent {agent}", self.clause())
            }
            Violation::NotActable { step, agent } => {
                write!(f, "({}) step {step}: {agent} cannot act its capability", self.clause())
            }
            Violation::Wiring { step } => write!(f, "({}) step {step}: wiring mismatch", self.clause()),
            Violation::Transport { step, from, to } => {
                write!(f, "({}) step {step}: no transport edge {from} -> {to}", self.clause())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

/// Checks the four validity clauses: (a) total and injective assignment,
/// (b) every holder can act its step, (c) chain wiring, (d) transport
/// adjacency of consecutive holders in explicit mode.
pub fn validate_configuration(
    config: &Configuration,
    task: &Task,
    agents: &BTreeMap<AgentId, Agent>,
    transport: &TransportGraph,
) -> ValidityReport {
    let mut violations = Vec::new();
    let k = task.len();

    let mut seen: BTreeMap<&AgentId, usize> = BTreeMap::new();
    for (&step, agent) in &config.assignment {
        if step >= k {
            violations.push(Violation::ExtraStep { step });
            continue;
        }
        if !agents.contains_key(agent) {
            violations.push(Violation::UnknownAgent { step, agent: agent.clone() });
        }
        if seen.insert(agent, step).is_some() {
            violations.push(Violation::NotInjective { step, agent: agent.clone() });
        }
    }
    for step in 0..k {
        if !config.assignment.contains_key(&step) {
            violations.push(Violation::Unassigned { step });
        }
    }

    for step in 0..k {
        let Some(agent_id) = config.assignment.get(&step) else { continue };
        if let Some(agent) = agents.get(agent_id) {
            if !agent.can_act(&task.steps()[step]) {
                violations.push(Violation::NotActable { step, agent: agent_id.clone() });
            }
        }
    }

    // Roles must be exactly the chain induced by the assignment.
    let holders: BTreeSet<&AgentId> = config.assignment.values().collect();
    for (agent, role) in &config.roles {
        if !holders.contains(agent) {
            violations.push(Violation::Wiring { step: role.step });
        }
    }
    for (&step, agent) in config.assignment.iter().filter(|(&s, _)| s < k) {
        let expected = chain_role(task, &config.assignment, step, task.steps()[step].clone());
        if config.roles.get(agent) != Some(&expected) {
            violations.push(Violation::Wiring { step });
        }
    }

    if transport.mode == TransportMode::Explicit {
        for step in 0..k.saturating_sub(1) {
            if let (Some(from), Some(to)) = (config.assignment.get(&step), config.assignment.get(&(step + 1))) {
                if !transport.has_edge(from, to) {
                    violations.push(Violation::Transport { step, from: from.clone(), to: to.clone() });
                }
            }
        }
    }

    ValidityReport { valid: violations.is_empty(), violations }
}

/// One link of a reallocation chain: `agent` ends up holding `new_step`
/// (`None` means it becomes idle).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChainStep {
    pub agent: AgentId,
    pub new_step: Option<usize>,
}

impl ChainStep {
    pub fn adopt(agent: impl Into<AgentId>, step: usize) -> Self {
        ChainStep { agent: agent.into(), new_step: Some(step) }
    }

    pub fn idle(agent: impl Into<AgentId>) -> Self {
        ChainStep { agent: agent.into(), new_step: None }
    }
}

/// Applies a reallocation chain and rewires the whole flow.
///
/// Every agent named in `chain` moves to its new step; all other agents keep
/// their step. A chain that leaves a previously held step uncovered, takes a
/// step still held by an agent outside the chain, or assigns one step twice
/// is a [`ModelError::BrokenChain`].
pub fn apply_chain(config: &Configuration, task: &Task, chain: &[ChainStep]) -> Result<Configuration, ModelError> {
    if chain.is_empty() {
        return Ok(config.clone());
    }
    let mut movers: BTreeMap<&AgentId, Option<usize>> = BTreeMap::new();
    for link in chain {
        if let Some(step) = link.new_step {
            if step >= task.len() {
                return Err(ModelError::StepOutOfRange { step, len: task.len() });
            }
        }
        if movers.insert(&link.agent, link.new_step).is_some() {
            return Err(ModelError::BrokenChain(format!("agent {} listed twice", link.agent)));
        }
    }

    let mut assignment: BTreeMap<usize, AgentId> = config
        .assignment
        .iter()
        .filter(|(_, agent)| !movers.contains_key(agent))
        .map(|(&s, a)| (s, a.clone()))
        .collect();
    for link in chain {
        let Some(step) = link.new_step else { continue };
        if let Some(holder) = assignment.insert(step, link.agent.clone()) {
            return Err(ModelError::BrokenChain(format!(
                "step {step} taken by {} while still held by {holder}",
                link.agent
            )));
        }
    }
    if let Some(step) = config.assignment.keys().find(|s| !assignment.contains_key(s)) {
        return Err(ModelError::BrokenChain(format!("step {step} left unassigned")));
    }
    Configuration::wired(task, assignment)
}

/// Where a resource currently is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResourceLocation {
    At(AgentId),
    InTransit { from: AgentId, to: AgentId, eta: SimTime },
    Done,
}

/// A work piece travelling through the task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resource {
    pub id: String,
    /// Next task step to apply; equals the task length exactly when done.
    pub next_step: usize,
    pub location: ResourceLocation,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn caps(names: &[&str]) -> BTreeSet<Capability> {
        names.iter().map(|&n| Capability::from(n)).collect()
    }

    fn agent(id: &str, names: &[&str]) -> Agent {
        Agent::new(id.into(), caps(names))
    }

    fn line3() -> (Task, BTreeMap<AgentId, Agent>, Configuration) {
        let task = Task::new(vec!["c1".into(), "c2".into(), "c3".into()]).unwrap();
        let agents: BTreeMap<AgentId, Agent> = [agent("a1", &["c1"]), agent("a2", &["c2"]), agent("a3", &["c3"])]
            .into_iter()
            .map(|a| (a.id.clone(), a))
            .collect();
        let assignment = BTreeMap::from([(0, "a1".into()), (1, "a2".into()), (2, "a3".into())]);
        let config = Configuration::wired(&task, assignment).unwrap();
        (task, agents, config)
    }

    /// Validator written directly from the clause list, independent of the
    /// production code path: each clause is evaluated on its own definition.
    fn brute_force_valid(
        config: &Configuration,
        task: &Task,
        agents: &BTreeMap<AgentId, Agent>,
        transport: &TransportGraph,
    ) -> bool {
        let k = task.len();
        let holders: Vec<Option<&AgentId>> = (0..k).map(|s| config.assignment.get(&s)).collect();
        let total = holders.iter().all(Option::is_some) && config.assignment.len() == k;
        let injective = (0..k).all(|i| (0..k).all(|j| i == j || holders[i].is_none() || holders[i] != holders[j]));
        let actable_all = (0..k).all(|s| {
            holders[s].is_some_and(|a| {
                let ag = &agents[a];
                ag.capabilities.contains(&task.steps()[s]) && !ag.broken.contains(&task.steps()[s])
            })
        });
        let wiring = config.roles.len() == k
            && (0..k).all(|s| {
                let Some(a) = holders[s] else { return false };
                let Some(role) = config.roles.get(a) else { return false };
                let pred: BTreeSet<AgentId> =
                    if s == 0 { BTreeSet::new() } else { holders[s - 1].into_iter().cloned().collect() };
                let succ: BTreeSet<AgentId> =
                    if s + 1 == k { BTreeSet::new() } else { holders[s + 1].into_iter().cloned().collect() };
                role.step == s
                    && role.required == task.steps()[s]
                    && role.predecessors == pred
                    && role.successors == succ
            });
        let adjacency = transport.mode == TransportMode::Full
            || (0..k.saturating_sub(1)).all(|s| match (holders[s], holders[s + 1]) {
                (Some(a), Some(b)) => transport.edges.contains(&(a.clone(), b.clone())),
                _ => false,
            });
        total && injective && actable_all && wiring && adjacency
    }

    #[test]
    fn actable_membership_and_breakage() {
        let universe = caps(&["c1", "c2", "c3"]);
        let mut a = agent("a1", &["c1", "c2"]);
        assert!(actable(&a, &"c1".into(), &universe).unwrap());
        a.break_capability(&"c1".into()).unwrap();
        assert!(!actable(&a, &"c1".into(), &universe).unwrap());
        let lone = agent("a9", &["c1"]);
        assert_eq!(actable(&lone, &"c4".into(), &universe), Err(ModelError::UnknownCapability("c4".into())));
    }

    #[test]
    fn valid_line_matches_brute_force() {
        let (task, agents, config) = line3();
        let full = TransportGraph::full();
        let report = validate_configuration(&config, &task, &agents, &full);
        assert!(report.valid, "{:?}", report.violations);
        assert!(brute_force_valid(&config, &task, &agents, &full));
    }

    #[test]
    fn broken_required_capability_is_clause_b() {
        let (task, mut agents, config) = line3();
        agents.get_mut(&AgentId::from("a1")).unwrap().break_capability(&"c1".into()).unwrap();
        let report = validate_configuration(&config, &task, &agents, &TransportGraph::full());
        assert!(!report.valid);
        assert_eq!(report.violations.len(), 1);
        assert_eq!((report.violations[0].clause(), report.violations[0].step()), ('b', 0));
    }

    #[test]
    fn doubly_assigned_agent_is_clause_a() {
        let (task, agents, _) = line3();
        let assignment = BTreeMap::from([(0, "a1".into()), (1, "a2".into()), (2, "a2".into())]);
        let config = Configuration::wired(&task, assignment).unwrap();
        let report = validate_configuration(&config, &task, &agents, &TransportGraph::full());
        assert!(!report.valid);
        assert!(report.violations.iter().any(|v| matches!(v, Violation::NotInjective { .. })));
    }

    #[test]
    fn explicit_transport_requires_directed_edges() {
        let (task, agents, config) = line3();
        let forward = TransportGraph::explicit([("a1".into(), "a2".into()), ("a2".into(), "a3".into())]);
        assert!(validate_configuration(&config, &task, &agents, &forward).valid);
        let backward = TransportGraph::explicit([("a2".into(), "a1".into()), ("a2".into(), "a3".into())]);
        let report = validate_configuration(&config, &task, &agents, &backward);
        assert_eq!(report.violations, vec![Violation::Transport { step: 0, from: "a1".into(), to: "a2".into() }]);
        assert!(!brute_force_valid(&config, &task, &agents, &backward));
    }

    #[test]
    fn hops_follow_undirected_shortest_path() {
        let t = TransportGraph::explicit([("a1".into(), "a2".into()), ("a2".into(), "a3".into())]);
        assert_eq!(t.hops(&"a1".into(), &"a3".into()), Some(2));
        assert_eq!(t.hops(&"a3".into(), &"a1".into()), Some(2));
        assert_eq!(t.hops(&"a1".into(), &"a4".into()), None);
        assert_eq!(TransportGraph::full().hops(&"a1".into(), &"a9".into()), Some(1));
    }

    #[test]
    fn swap_chain_rewires_flow() {
        let (task, _, config) = line3();
        let swapped = apply_chain(&config, &task, &[ChainStep::adopt("a1", 1), ChainStep::adopt("a2", 0)]).unwrap();
        // Expected wiring computed by definition: a2 -> a1 -> a3.
        let expected =
            Configuration::wired(&task, BTreeMap::from([(0, "a2".into()), (1, "a1".into()), (2, "a3".into())]))
                .unwrap();
        assert_eq!(swapped, expected);
        assert_eq!(swapped.roles[&AgentId::from("a1")].successors, BTreeSet::from(["a3".into()]));
        assert_eq!(swapped.roles[&AgentId::from("a2")].successors, BTreeSet::from(["a1".into()]));
    }

    #[test]
    fn empty_chain_is_identity() {
        let (task, _, config) = line3();
        assert_eq!(apply_chain(&config, &task, &[]).unwrap(), config);
    }

    #[test]
    fn uncovered_step_is_broken_chain() {
        let (task, _, config) = line3();
        let err = apply_chain(&config, &task, &[ChainStep::adopt("a1", 1)]).unwrap_err();
        assert!(matches!(err, ModelError::BrokenChain(_)));
        // A spare taking step 0 while a1 moves to idle closes the chain.
        let spare = apply_chain(&config, &task, &[ChainStep::adopt("a4", 0), ChainStep::idle("a1")]).unwrap();
        assert_eq!(spare.holder(0), Some(&"a4".into()));
        assert_eq!(spare.step_of(&"a1".into()), None);
    }
}

//! Scenario files, metrics CSV and trajectory CSV.
//!
//! Scenario grammar, one directive per line, sections in this order:
//!
//! ```text
//! [params]
//! seed = <uint>
//! delay_per_hop = <decimal>
//! proc_time = <decimal>
//! t_max = <decimal>
//! probe_scope = flow|all
//! hop_budget = <uint>|unlimited
//! [task]
//! steps = <cap>(, <cap>)*
//! [agents]
//! <id> : <cap>(, <cap>)* : <step-uint|->
//! [transport]
//! mode = full|explicit
//! <id> -> <id>
//! [failures]
//! <time> : <id> : <cap>
//! [resources]
//! <time>
//! ```
//!
//! `#` starts a comment. Blank lines are ignored. Missing parameters take
//! their defaults; `[params]`, `[transport]`, `[failures]` and `[resources]`
//! may be omitted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::model::{
    validate_configuration, Agent, AgentId, Capability, Configuration, Task, TransportGraph, TransportMode, Violation,
};
use crate::protocol::ProbeScope;
use crate::sim::Metrics;
use crate::stochastic::Trajectory;
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("line {line}: syntax error: {detail}")]
    SyntaxError { line: usize, detail: String },
    #[error("line {line}: duplicate agent id `{agent}`")]
    DuplicateAgentId { line: usize, agent: AgentId },
    #[error("line {line}: unknown capability `{capability}`")]
    UnknownCapabilityRef { line: usize, capability: String },
    #[error("line {line}: unknown agent `{agent}`")]
    UnknownAgentRef { line: usize, agent: String },
    #[error("line {line}: invalid initial configuration: {}", join_violations(.violations))]
    InvalidInitialConfig { line: usize, violations: Vec<Violation> },
    #[error("line {line}: failures must be sorted by time")]
    UnsortedFailures { line: usize },
}

fn join_violations(violations: &[Violation]) -> String {
    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

impl ScenarioError {
    pub fn line(&self) -> usize {
        match self {
            ScenarioError::SyntaxError { line, .. }
            | ScenarioError::DuplicateAgentId { line, .. }
            | ScenarioError::UnknownCapabilityRef { line, .. }
            | ScenarioError::UnknownAgentRef { line, .. }
            | ScenarioError::InvalidInitialConfig { line, .. }
            | ScenarioError::UnsortedFailures { line } => *line,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Params {
    pub seed: u64,
    pub delay_per_hop: SimTime,
    pub proc_time: SimTime,
    pub t_max: SimTime,
    pub probe_scope: ProbeScope,
    /// `None` is unlimited.
    pub hop_budget: Option<u32>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            seed: 0,
            delay_per_hop: SimTime::from_units(1),
            proc_time: SimTime::from_units(5),
            t_max: SimTime::from_units(1_000_000),
            probe_scope: ProbeScope::All,
            hop_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentSpec {
    pub capabilities: BTreeSet<Capability>,
    pub step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureSpec {
    pub time: SimTime,
    pub agent: AgentId,
    pub capability: Capability,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub params: Params,
    pub task: Task,
    pub agents: BTreeMap<AgentId, AgentSpec>,
    pub transport: TransportGraph,
    pub failures: Vec<FailureSpec>,
    /// Arrival times, in file order.
    pub resources: Vec<SimTime>,
}

impl Scenario {
    pub fn initial_configuration(&self) -> Configuration {
        let assignment = self.agents.iter().filter_map(|(id, spec)| spec.step.map(|s| (s, id.clone()))).collect();
        Configuration::wired(&self.task, assignment).expect("steps checked at construction")
    }

    /// Agents with all capabilities intact.
    pub fn model_agents(&self) -> BTreeMap<AgentId, Agent> {
        self.agents
            .iter()
            .map(|(id, spec)| (id.clone(), Agent::new(id.clone(), spec.capabilities.iter().cloned())))
            .collect()
    }

    /// Agents after every scheduled failure has happened.
    pub fn failed_agents(&self) -> BTreeMap<AgentId, Agent> {
        let mut agents = self.model_agents();
        for f in &self.failures {
            if let Some(agent) = agents.get_mut(&f.agent) {
                agent.broken.insert(f.capability.clone());
            }
        }
        agents
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Section {
    Params,
    Task,
    Agents,
    Transport,
    Failures,
    Resources,
}

impl Section {
    fn from_header(name: &str) -> Option<Section> {
        Some(match name {
            "params" => Section::Params,
            "task" => Section::Task,
            "agents" => Section::Agents,
            "transport" => Section::Transport,
            "failures" => Section::Failures,
            "resources" => Section::Resources,
            _ => return None,
        })
    }
}

fn syntax(line: usize, detail: impl Into<String>) -> ScenarioError {
    ScenarioError::SyntaxError { line, detail: detail.into() }
}

fn parse_time(line: usize, s: &str) -> Result<SimTime, ScenarioError> {
    s.parse().map_err(|e| syntax(line, format!("{e}")))
}

fn parse_token<T>(
    line: usize,
    s: &str,
    make: fn(String) -> Result<T, crate::model::ModelError>,
) -> Result<T, ScenarioError> {
    make(s.to_string()).map_err(|e| syntax(line, e.to_string()))
}

fn parse_uint<T: std::str::FromStr>(line: usize, s: &str) -> Result<T, ScenarioError> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(syntax(line, format!("expected an unsigned integer, found `{s}`")));
    }
    s.parse().map_err(|_| syntax(line, format!("integer `{s}` out of range")))
}

fn parse_caps(line: usize, s: &str) -> Result<Vec<Capability>, ScenarioError> {
    s.split(',').map(|c| parse_token(line, c.trim(), Capability::new)).collect()
}

fn key_value(line: usize, text: &str) -> Result<(&str, &str), ScenarioError> {
    let (k, v) = text.split_once('=').ok_or_else(|| syntax(line, "expected `key = value`"))?;
    Ok((k.trim(), v.trim()))
}

#[derive(Default)]
struct Builder {
    params: Params,
    seen_params: BTreeSet<String>,
    task: Option<(usize, Task)>,
    agents: BTreeMap<AgentId, (usize, AgentSpec)>,
    transport_mode: Option<TransportMode>,
    edges: Vec<(usize, AgentId, AgentId)>,
    failures: Vec<(usize, SimTime, AgentId, Capability)>,
    resources: Vec<SimTime>,
}

impl Builder {
    fn param(&mut self, line: usize, text: &str) -> Result<(), ScenarioError> {
        let (key, value) = key_value(line, text)?;
        if !self.seen_params.insert(key.to_string()) {
            return Err(syntax(line, format!("duplicate key `{key}`")));
        }
        let p = &mut self.params;
        match key {
            "seed" => p.seed = parse_uint(line, value)?,
            "delay_per_hop" => {
                p.delay_per_hop = parse_time(line, value)?;
                if p.delay_per_hop == SimTime::ZERO {
                    return Err(syntax(line, "delay_per_hop must be positive"));
                }
            }
            "proc_time" => p.proc_time = parse_time(line, value)?,
            "t_max" => p.t_max = parse_time(line, value)?,
            "probe_scope" => {
                p.probe_scope = match value {
                    "flow" => ProbeScope::Flow,
                    "all" => ProbeScope::All,
                    _ => return Err(syntax(line, format!("probe_scope must be flow or all, found `{value}`"))),
                }
            }
            "hop_budget" => {
                p.hop_budget = match value {
                    "unlimited" => None,
                    v => Some(parse_uint(line, v)?),
                }
            }
            _ => return Err(syntax(line, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn task(&mut self, line: usize, text: &str) -> Result<(), ScenarioError> {
        let (key, value) = key_value(line, text)?;
        if key != "steps" {
            return Err(syntax(line, format!("unknown key `{key}`")));
        }
        if self.task.is_some() {
            return Err(syntax(line, "duplicate key `steps`"));
        }
        let task = Task::new(parse_caps(line, value)?).map_err(|e| syntax(line, e.to_string()))?;
        self.task = Some((line, task));
        Ok(())
    }

    fn agent(&mut self, line: usize, text: &str) -> Result<(), ScenarioError> {
        let fields: Vec<&str> = text.split(':').map(str::trim).collect();
        let [id, caps, step] = fields[..] else {
            return Err(syntax(line, "expected `<id> : <caps> : <step|->`"));
        };
        let id = parse_token(line, id, AgentId::new)?;
        let capabilities = parse_caps(line, caps)?.into_iter().collect();
        let step = match step {
            "-" => None,
            s => Some(parse_uint::<usize>(line, s)?),
        };
        let k = self.task.as_ref().map_or(0, |(_, t)| t.len());
        if let Some(s) = step {
            if s >= k {
                return Err(syntax(line, format!("step {s} out of range for a task of {k} steps")));
            }
        }
        if self.agents.contains_key(&id) {
            return Err(ScenarioError::DuplicateAgentId { line, agent: id });
        }
        self.agents.insert(id, (line, AgentSpec { capabilities, step }));
        Ok(())
    }

    fn agent_ref(&self, line: usize, s: &str) -> Result<AgentId, ScenarioError> {
        let id = parse_token(line, s, AgentId::new)?;
        if !self.agents.contains_key(&id) {
            return Err(ScenarioError::UnknownAgentRef { line, agent: s.to_string() });
        }
        Ok(id)
    }

    fn transport(&mut self, line: usize, text: &str) -> Result<(), ScenarioError> {
        if let Some((from, to)) = text.split_once("->") {
            if self.transport_mode != Some(TransportMode::Explicit) {
                return Err(syntax(line, "edges are only allowed after `mode = explicit`"));
            }
            let from = self.agent_ref(line, from.trim())?;
            let to = self.agent_ref(line, to.trim())?;
            self.edges.push((line, from, to));
            return Ok(());
        }
        let (key, value) = key_value(line, text)?;
        if key != "mode" {
            return Err(syntax(line, format!("unknown key `{key}`")));
        }
        if self.transport_mode.is_some() {
            return Err(syntax(line, "duplicate key `mode`"));
        }
        self.transport_mode = Some(match value {
            "full" => TransportMode::Full,
            "explicit" => TransportMode::Explicit,
            _ => return Err(syntax(line, format!("mode must be full or explicit, found `{value}`"))),
        });
        Ok(())
    }

    fn failure(&mut self, line: usize, text: &str) -> Result<(), ScenarioError> {
        let fields: Vec<&str> = text.split(':').map(str::trim).collect();
        let [time, agent, cap] = fields[..] else {
            return Err(syntax(line, "expected `<time> : <id> : <cap>`"));
        };
        let time = parse_time(line, time)?;
        let agent = self.agent_ref(line, agent)?;
        let capability = parse_token(line, cap, Capability::new)?;
        if !self.agents[&agent].1.capabilities.contains(&capability) {
            return Err(ScenarioError::UnknownCapabilityRef { line, capability: capability.to_string() });
        }
        if self.failures.last().is_some_and(|(_, prev, _, _)| *prev > time) {
            return Err(ScenarioError::UnsortedFailures { line });
        }
        self.failures.push((line, time, agent, capability));
        Ok(())
    }

    fn finish(self, last_line: usize) -> Result<Scenario, ScenarioError> {
        let Some((task_line, task)) = self.task else {
            return Err(syntax(last_line.max(1), "missing [task] section"));
        };
        let mut claimed: BTreeMap<usize, usize> = BTreeMap::new();
        let mut by_line: Vec<(&AgentId, &(usize, AgentSpec))> = self.agents.iter().collect();
        by_line.sort_by_key(|(_, (line, _))| *line);
        for (id, (line, spec)) in by_line {
            let Some(step) = spec.step else { continue };
            if claimed.insert(step, *line).is_some() {
                return Err(ScenarioError::InvalidInitialConfig {
                    line: *line,
                    violations: vec![Violation::NotInjective { step, agent: id.clone() }],
                });
            }
        }
        let scenario = Scenario {
            params: self.params,
            task,
            agents: self.agents.iter().map(|(id, (_, spec))| (id.clone(), spec.clone())).collect(),
            transport: match self.transport_mode.unwrap_or_default() {
                TransportMode::Full => TransportGraph::full(),
                TransportMode::Explicit => TransportGraph::explicit(self.edges.into_iter().map(|(_, a, b)| (a, b))),
            },
            failures: self
                .failures
                .into_iter()
                .map(|(_, time, agent, capability)| FailureSpec { time, agent, capability })
                .collect(),
            resources: self.resources,
        };
        let report = validate_configuration(
            &scenario.initial_configuration(),
            &scenario.task,
            &scenario.model_agents(),
            &scenario.transport,
        );
        if !report.valid {
            let line = report
                .violations
                .iter()
                .filter_map(violation_agent)
                .filter_map(|a| self.agents.get(a).map(|(l, _)| *l))
                .min()
                .unwrap_or(task_line);
            return Err(ScenarioError::InvalidInitialConfig { line, violations: report.violations });
        }
        Ok(scenario)
    }
}

fn violation_agent(v: &Violation) -> Option<&AgentId> {
    match v {
        Violation::NotInjective { agent, .. }
        | Violation::UnknownAgent { agent, .. }
        | Violation::NotActable { agent, .. } => Some(agent),
        Violation::Transport { to, .. } => Some(to),
        _ => None,
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut builder = Builder::default();
    let mut section: Option<Section> = None;
    let mut line_no = 0;
    for (idx, raw) in text.lines().enumerate() {
        line_no = idx + 1;
        let content = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let next = Section::from_header(name.trim())
                .ok_or_else(|| syntax(line_no, format!("unknown section `[{name}]`")))?;
            if section.is_some_and(|cur| cur >= next) {
                return Err(syntax(line_no, format!("section `[{name}]` out of order or repeated")));
            }
            if next > Section::Task && builder.task.is_none() {
                return Err(syntax(line_no, "[task] must come before this section"));
            }
            section = Some(next);
            continue;
        }
        match section {
            None => return Err(syntax(line_no, "directive outside of any section")),
            Some(Section::Params) => builder.param(line_no, content)?,
            Some(Section::Task) => builder.task(line_no, content)?,
            Some(Section::Agents) => builder.agent(line_no, content)?,
            Some(Section::Transport) => builder.transport(line_no, content)?,
            Some(Section::Failures) => builder.failure(line_no, content)?,
            Some(Section::Resources) => builder.resources.push(parse_time(line_no, content)?),
        }
    }
    builder.finish(line_no)
}

fn join<T: fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
}

/// Canonical text: fixed section order, agents sorted by id, capabilities
/// sorted, decimals without trailing zeros.
pub fn serialize_scenario(s: &Scenario) -> String {
    let mut out = String::new();
    let p = &s.params;
    let probe = match p.probe_scope {
        ProbeScope::Flow => "flow",
        ProbeScope::All => "all",
    };
    let budget = p.hop_budget.map_or_else(|| "unlimited".to_string(), |b| b.to_string());
    let _ = writeln!(out, "[params]");
    let _ = writeln!(out, "seed = {}", p.seed);
    let _ = writeln!(out, "delay_per_hop = {}", p.delay_per_hop);
    let _ = writeln!(out, "proc_time = {}", p.proc_time);
    let _ = writeln!(out, "t_max = {}", p.t_max);
    let _ = writeln!(out, "probe_scope = {probe}");
    let _ = writeln!(out, "hop_budget = {budget}");
    let _ = writeln!(out, "[task]");
    let _ = writeln!(out, "steps = {}", join(s.task.steps()));
    let _ = writeln!(out, "[agents]");
    for (id, spec) in &s.agents {
        let step = spec.step.map_or_else(|| "-".to_string(), |st| st.to_string());
        let _ = writeln!(out, "{id} : {} : {step}", join(&spec.capabilities));
    }
    let _ = writeln!(out, "[transport]");
    match s.transport.mode {
        TransportMode::Full => {
            let _ = writeln!(out, "mode = full");
        }
        TransportMode::Explicit => {
            let _ = writeln!(out, "mode = explicit");
            for (a, b) in &s.transport.edges {
                let _ = writeln!(out, "{a} -> {b}");
            }
        }
    }
    let _ = writeln!(out, "[failures]");
    for f in &s.failures {
        let _ = writeln!(out, "{} : {} : {}", f.time, f.agent, f.capability);
    }
    let _ = writeln!(out, "[resources]");
    for r in &s.resources {
        let _ = writeln!(out, "{r}");
    }
    out
}

pub const METRICS_HEADER: &str = "seed,converged,infeasible,t_converge,n_messages,n_role_changes,locality_radius,resources_done,resources_done_during_reconfig";

pub fn metrics_row(m: &Metrics) -> String {
    let t_converge = m.t_converge().map_or_else(|| "-1".to_string(), |t| t.to_string());
    let locality = m.locality_radius.map_or_else(|| "-1".to_string(), |r| r.to_string());
    format!(
        "{},{},{},{},{},{},{},{},{}",
        m.seed,
        u8::from(m.converged),
        u8::from(m.infeasible),
        t_converge,
        m.n_messages,
        m.n_role_changes,
        locality,
        m.resources_done,
        m.resources_done_during_reconfig
    )
}

pub fn write_metrics_csv(rows: &[Metrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in rows {
        out.push_str(&metrics_row(m));
        out.push('\n');
    }
    out
}

pub fn write_trajectory_csv(trajectory: &Trajectory) -> String {
    let mut out = String::from("time,W,D,H\n");
    for (t, [w, d, h]) in &trajectory.records {
        let _ = writeln!(out, "{t},{w},{d},{h}");
    }
    out
}

//! Deterministic discrete-event engine.
//!
//! One run is a single-threaded loop over two queues: scheduled events
//! (failures, resource arrivals, processing completions, retry timers) and
//! in-flight message deliveries held by the coordination medium. Both draw
//! sequence numbers from the medium, so `(time, seq)` is a total order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use thiserror::Error;

use crate::coordination::{CoordinationError, CoordinationMedium, WaveBinding};
use crate::model::{Agent, AgentId, Capability, Configuration, Resource, ResourceLocation, TransportGraph};
use crate::protocol::{
    is_quiescent, AlwaysWilling, CommittedWave, MessageKind, Outbox, ProtocolConfig, ProtocolContext, ProtocolError,
    WaveAgent, WaveId, WaveMode,
};
use crate::scenario_io::Scenario;
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("resource {resource} at {agent} needs step {next_step} but the agent holds {role:?}")]
    Routing { agent: AgentId, resource: String, next_step: usize, role: Option<usize> },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Coordination(#[from] CoordinationError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metrics {
    pub seed: u64,
    pub converged: bool,
    pub infeasible: bool,
    pub non_terminated: bool,
    pub t_last_failure: SimTime,
    pub t_quiescent: SimTime,
    pub n_messages: u64,
    pub n_role_changes: usize,
    /// `None` when no role changed.
    pub locality_radius: Option<u32>,
    pub resources_done: usize,
    pub resources_done_during_reconfig: usize,
}

impl Metrics {
    /// `t_quiescent − t_last_failure`; undefined for non-terminating runs.
    pub fn t_converge(&self) -> Option<SimTime> {
        (!self.non_terminated).then(|| self.t_quiescent - self.t_last_failure)
    }
}

/// One processing interval of a resource.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub agent: AgentId,
    pub step: usize,
    pub start: SimTime,
    pub end: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceTrace {
    pub arrival: SimTime,
    pub visits: Vec<Visit>,
    pub done_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub metrics: Metrics,
    pub initial_config: Configuration,
    pub final_config: Configuration,
    pub final_agents: BTreeMap<AgentId, Agent>,
    pub committed: Vec<CommittedWave>,
    pub halted_waves: Vec<WaveId>,
    pub wave_messages: BTreeMap<WaveId, u64>,
    pub message_kinds: BTreeMap<MessageKind, u64>,
    pub traces: Vec<ResourceTrace>,
    /// Agents still holding a tentative adoption when the run stopped.
    pub tentative_residue: Vec<AgentId>,
    /// First time any wave started, and the time the protocol last went quiet.
    pub reconfig_window: Option<(SimTime, SimTime)>,
}

impl RunOutcome {
    /// Agents whose step differs between the initial and final configuration.
    pub fn changed_agents(&self) -> BTreeSet<AgentId> {
        self.final_agents
            .keys()
            .filter(|a| self.initial_config.step_of(a) != self.final_config.step_of(a))
            .cloned()
            .collect()
    }

    pub fn chain_agents(&self) -> BTreeSet<AgentId> {
        self.committed.iter().flat_map(|c| c.agents()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum EventKind {
    Failure {
        agent: AgentId,
        capability: Capability,
    },
    /// `at: None` enters the system at the current holder of step 0.
    ResourceArrival {
        resource: usize,
        at: Option<AgentId>,
    },
    ProcessingComplete {
        agent: AgentId,
        resource: usize,
    },
    RetryTimer {
        agent: AgentId,
        wave: WaveId,
    },
}

#[derive(Debug)]
struct Scheduled {
    time: SimTime,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug, Default)]
struct Station {
    queue: VecDeque<usize>,
    busy: Option<usize>,
}

/// Starts processing `resource` at `agent`, returning the completion time.
/// The resource must be at the agent and need exactly the agent's step.
pub fn resource_step(
    agent: &AgentId,
    role: Option<usize>,
    resource: &Resource,
    now: SimTime,
    proc_time: SimTime,
) -> Result<SimTime, SimError> {
    let here = matches!(&resource.location, ResourceLocation::At(a) if a == agent);
    if !here || role != Some(resource.next_step) {
        return Err(SimError::Routing {
            agent: agent.clone(),
            resource: resource.id.clone(),
            next_step: resource.next_step,
            role,
        });
    }
    Ok(now + proc_time)
}

/// Largest distance from a failing agent among agents whose step changed.
///
/// Distance is measured along the pre-failure flow when both agents held a
/// step, otherwise in transport hops; with several failing agents the
/// nearest one counts. `None` when nothing changed.
pub fn compute_locality(
    pre: &Configuration,
    post: &Configuration,
    agents: &[AgentId],
    failing: &BTreeSet<AgentId>,
    transport: &TransportGraph,
) -> Option<u32> {
    agents
        .iter()
        .filter(|a| pre.step_of(a) != post.step_of(a))
        .map(|a| {
            failing
                .iter()
                .map(|f| match (pre.step_of(f), pre.step_of(a)) {
                    (Some(sf), Some(sa)) => u32::try_from(sf.abs_diff(sa)).unwrap_or(u32::MAX),
                    _ => transport.hops(f, a).unwrap_or(u32::MAX),
                })
                .min()
                .unwrap_or(u32::MAX)
        })
        .max()
}

struct Sim<'s> {
    scenario: &'s Scenario,
    ids: Vec<AgentId>,
    agents: BTreeMap<AgentId, WaveAgent>,
    routing_assignment: BTreeMap<usize, AgentId>,
    routing: Configuration,
    pconfig: ProtocolConfig,
    medium: CoordinationMedium,
    events: BinaryHeap<Scheduled>,
    resources: Vec<Resource>,
    traces: Vec<ResourceTrace>,
    stations: BTreeMap<AgentId, Station>,
    now: SimTime,
    t_last_failure: SimTime,
    t_quiescent: SimTime,
    first_wave: Option<SimTime>,
    n_messages: u64,
    resources_done: usize,
    resources_done_during_reconfig: usize,
    wave_messages: BTreeMap<WaveId, u64>,
    message_kinds: BTreeMap<MessageKind, u64>,
    committed: Vec<CommittedWave>,
    halted_waves: Vec<WaveId>,
}

impl<'s> Sim<'s> {
    fn new(scenario: &'s Scenario) -> Result<Self, SimError> {
        let initial = scenario.initial_configuration();
        let ids: Vec<AgentId> = scenario.agents.keys().cloned().collect();
        let agents = scenario
            .model_agents()
            .into_iter()
            .map(|(id, agent)| {
                let step = initial.step_of(&id);
                (id, WaveAgent::new(agent, step))
            })
            .collect();
        let mut medium = CoordinationMedium::new(scenario.params.delay_per_hop, scenario.transport.clone())?;
        for id in &ids {
            medium.attach_endpoint(id.clone())?;
        }
        let pconfig = ProtocolConfig {
            probe_scope: scenario.params.probe_scope,
            hop_budget: scenario.params.hop_budget,
            delay_per_hop: scenario.params.delay_per_hop,
            ..ProtocolConfig::default()
        };
        let mut sim = Sim {
            scenario,
            stations: ids.iter().map(|id| (id.clone(), Station::default())).collect(),
            ids,
            agents,
            routing_assignment: initial.assignment.clone(),
            routing: initial,
            pconfig,
            medium,
            events: BinaryHeap::new(),
            resources: Vec::new(),
            traces: Vec::new(),
            now: SimTime::ZERO,
            t_last_failure: SimTime::ZERO,
            t_quiescent: SimTime::ZERO,
            first_wave: None,
            n_messages: 0,
            resources_done: 0,
            resources_done_during_reconfig: 0,
            wave_messages: BTreeMap::new(),
            message_kinds: BTreeMap::new(),
            committed: Vec::new(),
            halted_waves: Vec::new(),
        };
        for f in &scenario.failures {
            sim.schedule(f.time, EventKind::Failure { agent: f.agent.clone(), capability: f.capability.clone() });
        }
        for (i, &arrival) in scenario.resources.iter().enumerate() {
            sim.resources.push(Resource { id: format!("r{i}"), next_step: 0, location: ResourceLocation::Done });
            sim.traces.push(ResourceTrace { arrival, visits: Vec::new(), done_at: None });
            sim.schedule(arrival, EventKind::ResourceArrival { resource: i, at: None });
        }
        Ok(sim)
    }

    fn schedule(&mut self, time: SimTime, kind: EventKind) {
        let seq = self.medium.allocate_seq();
        self.events.push(Scheduled { time, seq, kind });
    }

    fn quiescent(&self) -> bool {
        is_quiescent(self.agents.values(), self.medium.pending_len())
    }

    fn reconfiguring(&self) -> bool {
        self.medium.pending_len() > 0 || self.agents.values().any(WaveAgent::is_engaged)
    }

    /// Runs one protocol stimulus on `agent` and applies its effects.
    fn protocol_step(
        &mut self,
        agent: &AgentId,
        f: impl FnOnce(&mut WaveAgent, &ProtocolContext<'_>, &mut CoordinationMedium) -> Result<Outbox, SimError>,
    ) -> Result<(), SimError> {
        let ctx = ProtocolContext {
            task: &self.scenario.task,
            transport: &self.scenario.transport,
            agents: &self.ids,
            routing: &self.routing,
            config: &self.pconfig,
            willingness: &AlwaysWilling,
        };
        let wave_agent = self.agents.get_mut(agent).expect("known agent");
        let before = wave_agent.role();
        let was_engaged = wave_agent.is_engaged();
        let out = f(wave_agent, &ctx, &mut self.medium)?;
        let after = wave_agent.role();
        if !was_engaged && wave_agent.is_engaged() && self.first_wave.is_none() {
            self.first_wave = Some(self.now);
        }
        if before != after {
            if let Some(step) = after {
                self.routing_assignment.insert(step, agent.clone());
                self.routing =
                    Configuration::wired(&self.scenario.task, self.routing_assignment.clone()).expect("steps in range");
            }
        }
        self.apply_outbox(agent, out)?;
        if self.quiescent() {
            self.t_quiescent = self.now;
        }
        Ok(())
    }

    fn apply_outbox(&mut self, from: &AgentId, out: Outbox) -> Result<(), SimError> {
        for (to, msg) in out.messages {
            *self.wave_messages.entry(msg.wave.clone()).or_default() += 1;
            *self.message_kinds.entry(msg.kind).or_default() += 1;
            self.n_messages += 1;
            self.medium.send(from, &to, msg, self.now)?;
        }
        if let Some((delay, wave)) = out.retry_after {
            self.schedule(self.now + delay, EventKind::RetryTimer { agent: from.clone(), wave });
        }
        if let Some(c) = out.committed {
            self.committed.push(c);
        }
        if let Some(w) = out.halted {
            self.halted_waves.push(w);
        }
        Ok(())
    }

    fn fire(&mut self, kind: EventKind) -> Result<(), SimError> {
        match kind {
            EventKind::Failure { agent, capability } => {
                self.t_last_failure = self.now;
                self.protocol_step(&agent, |a, ctx, _| Ok(a.on_capability_failure(&capability, ctx)?))?;
            }
            EventKind::RetryTimer { agent, wave } => {
                self.protocol_step(&agent, |a, ctx, _| Ok(a.on_retry_timer(&wave, ctx)?))?;
            }
            EventKind::ResourceArrival { resource, at } => {
                let at = match at {
                    Some(a) => a,
                    None => self.routing_assignment[&0].clone(),
                };
                self.resources[resource].location = ResourceLocation::At(at.clone());
                self.stations.get_mut(&at).expect("known agent").queue.push_back(resource);
            }
            EventKind::ProcessingComplete { agent, resource } => {
                let k = self.scenario.task.len();
                let station = self.stations.get_mut(&agent).expect("known agent");
                station.busy = None;
                if let Some(v) = self.traces[resource].visits.last_mut() {
                    v.end = Some(self.now);
                }
                let r = &mut self.resources[resource];
                r.next_step += 1;
                if r.next_step == k {
                    r.location = ResourceLocation::Done;
                    self.traces[resource].done_at = Some(self.now);
                    self.resources_done += 1;
                    if self.reconfiguring() {
                        self.resources_done_during_reconfig += 1;
                    }
                } else {
                    station.queue.push_front(resource);
                }
            }
        }
        Ok(())
    }

    fn deliver(&mut self) -> Result<(), SimError> {
        let (_, to) = self.medium.deliver_next().expect("peeked delivery");
        self.protocol_step(&to, |agent, ctx, medium| {
            let endpoint = medium.endpoint_mut(agent.id()).expect("attached endpoint");
            let envelope = endpoint.take_next().expect("delivered envelope");
            Ok(endpoint.effectuate(&envelope, &mut WaveBinding { agent, ctx })?)
        })
    }

    /// Lets every normal, free station process or forward what it holds.
    fn dispatch(&mut self) -> Result<(), SimError> {
        for id in &self.ids {
            let wave_agent = &self.agents[id];
            if wave_agent.mode() != WaveMode::Normal {
                continue;
            }
            let role = wave_agent.role();
            let station = self.stations.get_mut(id).expect("known agent");
            while station.busy.is_none() {
                let Some(&r) = station.queue.front() else { break };
                let next_step = self.resources[r].next_step;
                if role == Some(next_step) {
                    station.queue.pop_front();
                    let done = resource_step(id, role, &self.resources[r], self.now, self.scenario.params.proc_time)?;
                    station.busy = Some(r);
                    self.traces[r].visits.push(Visit {
                        agent: id.clone(),
                        step: next_step,
                        start: self.now,
                        end: None,
                    });
                    let seq = self.medium.allocate_seq();
                    self.events.push(Scheduled {
                        time: done,
                        seq,
                        kind: EventKind::ProcessingComplete { agent: id.clone(), resource: r },
                    });
                    continue;
                }
                let Some(holder) = self.routing_assignment.get(&next_step).filter(|h| *h != id).cloned() else {
                    break;
                };
                let Some(hops) = self.scenario.transport.hops(id, &holder) else { break };
                station.queue.pop_front();
                let eta = self.now + self.scenario.params.delay_per_hop.scale(u64::from(hops));
                self.resources[r].location = ResourceLocation::InTransit { from: id.clone(), to: holder.clone(), eta };
                let seq = self.medium.allocate_seq();
                self.events.push(Scheduled {
                    time: eta,
                    seq,
                    kind: EventKind::ResourceArrival { resource: r, at: Some(holder) },
                });
            }
        }
        Ok(())
    }

    fn run(mut self, seed: u64) -> Result<RunOutcome, SimError> {
        let t_max = self.scenario.params.t_max;
        let mut non_terminated = false;
        self.dispatch()?;
        loop {
            let next_event = self.events.peek().map(|e| (e.time, e.seq));
            let next_delivery = self.medium.peek_next();
            let (time, is_delivery) = match (next_event, next_delivery) {
                (None, None) => break,
                (Some(e), None) => (e.0, false),
                (None, Some(d)) => (d.0, true),
                (Some(e), Some(d)) => {
                    if d < e {
                        (d.0, true)
                    } else {
                        (e.0, false)
                    }
                }
            };
            if time > t_max {
                non_terminated = !self.quiescent();
                break;
            }
            self.now = time;
            if is_delivery {
                self.deliver()?;
            } else {
                let ev = self.events.pop().expect("peeked event");
                self.fire(ev.kind)?;
            }
            self.dispatch()?;
        }
        Ok(self.finish(seed, non_terminated))
    }

    fn finish(self, seed: u64, non_terminated: bool) -> RunOutcome {
        let task = &self.scenario.task;
        let initial_config = self.scenario.initial_configuration();
        let final_assignment = self.agents.iter().filter_map(|(id, a)| a.role().map(|s| (s, id.clone()))).collect();
        let final_config = Configuration::wired(task, final_assignment).expect("steps in range");
        let failing: BTreeSet<AgentId> = self.scenario.failures.iter().map(|f| f.agent.clone()).collect();
        let n_role_changes = self.ids.iter().filter(|a| initial_config.step_of(a) != final_config.step_of(a)).count();
        let locality_radius =
            compute_locality(&initial_config, &final_config, &self.ids, &failing, &self.scenario.transport);
        let quiescent = self.quiescent();
        let any_halted = self.agents.values().any(WaveAgent::is_halted);
        let metrics = Metrics {
            seed,
            converged: !non_terminated && quiescent && !any_halted,
            infeasible: !non_terminated && any_halted,
            non_terminated,
            t_last_failure: self.t_last_failure,
            t_quiescent: self.t_quiescent,
            n_messages: self.n_messages,
            n_role_changes,
            locality_radius,
            resources_done: self.resources_done,
            resources_done_during_reconfig: self.resources_done_during_reconfig,
        };
        RunOutcome {
            metrics,
            initial_config,
            final_config,
            tentative_residue: self
                .agents
                .values()
                .filter(|a| a.has_tentative_role())
                .map(|a| a.id().clone())
                .collect(),
            final_agents: self.agents.into_iter().map(|(id, a)| (id, a.agent)).collect(),
            committed: self.committed,
            halted_waves: self.halted_waves,
            wave_messages: self.wave_messages,
            message_kinds: self.message_kinds,
            traces: self.traces,
            reconfig_window: self.first_wave.map(|start| (start, self.t_quiescent)),
        }
    }
}

/// Runs `scenario` to completion. The protocol itself draws no random
/// numbers; `seed` is carried into the metrics row.
pub fn run(scenario: &Scenario, seed: u64) -> Result<RunOutcome, SimError> {
    Sim::new(scenario)?.run(seed)
}

/// Outcome of a differential non-interference comparison.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InterferenceReport {
    /// Resources that, in the failure-free run, had left every affected
    /// agent before the reconfiguration started.
    pub checked: Vec<usize>,
    /// Those among `checked` whose completion time changed.
    pub differing: Vec<usize>,
}

/// Compares a run with failures against its failure-free twin.
pub fn interference(baseline: &RunOutcome, perturbed: &RunOutcome, affected: &BTreeSet<AgentId>) -> InterferenceReport {
    let Some((start, _)) = perturbed.reconfig_window else { return InterferenceReport::default() };
    let mut report = InterferenceReport::default();
    for (i, (b, p)) in baseline.traces.iter().zip(&perturbed.traces).enumerate() {
        let clear = b.done_at.is_some()
            && b.visits.iter().filter(|v| affected.contains(&v.agent)).all(|v| v.end.is_some_and(|e| e < start));
        if clear {
            report.checked.push(i);
            if b.done_at != p.done_at {
                report.differing.push(i);
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario_io::parse_scenario;

    fn scenario(body: &str) -> Scenario {
        parse_scenario(body).unwrap()
    }

    const W1: &str = "[task]\nsteps = c1, c2, c3\n[agents]\na1 : c1, c2 : 0\na2 : c1, c2 : 1\na3 : c3 : 2\n[failures]\n10 : a1 : c1\n";

    #[test]
    fn empty_world_converges_at_zero() {
        let s = scenario("[task]\nsteps = c1\n[agents]\na : c1 : 0\n");
        let m = run(&s, 0).unwrap().metrics;
        assert!(m.converged);
        assert_eq!(m.t_converge(), Some(SimTime::ZERO));
        assert_eq!((m.n_messages, m.n_role_changes, m.resources_done), (0, 0, 0));
        assert_eq!(m.locality_radius, None);
    }

    #[test]
    fn failure_free_line_completion_times() {
        let s = scenario(
            "[params]\nproc_time = 5\ndelay_per_hop = 1\n[task]\nsteps = c1, c2, c3\n[agents]\na1 : c1 : 0\na2 : c2 : 1\na3 : c3 : 2\n[resources]\n0\n100\n",
        );
        let out = run(&s, 0).unwrap();
        assert!(out.metrics.converged);
        assert_eq!(out.metrics.n_messages, 0);
        assert_eq!(out.metrics.resources_done, 2);
        let done: Vec<_> = out.traces.iter().map(|t| t.done_at.unwrap()).collect();
        // 3 × proc_time + 2 × one-hop handover
        assert_eq!(done, vec![SimTime::from_units(17), SimTime::from_units(117)]);
    }

    #[test]
    fn w1_swaps_two_agents() {
        let out = run(&scenario(W1), 0).unwrap();
        let m = &out.metrics;
        assert!(m.converged);
        assert_eq!(m.n_role_changes, 2);
        assert_eq!(m.n_messages, 5);
        assert_eq!(m.locality_radius, Some(1));
        // P at 10, TA 11, Commit 12, Commit + Done 13, all delivered by 14
        assert_eq!(m.t_converge(), Some(SimTime::from_units(4)));
        assert_eq!(out.chain_agents(), BTreeSet::from(["a1".into(), "a2".into()]));
        assert_eq!(out.final_config.holder(0), Some(&"a2".into()));
        assert_eq!(out.final_config.holder(1), Some(&"a1".into()));
    }

    #[test]
    fn resource_step_checks_role() {
        let r = Resource { id: "r".into(), next_step: 1, location: ResourceLocation::At("a".into()) };
        assert_eq!(
            resource_step(&"a".into(), Some(1), &r, SimTime::ZERO, SimTime::from_units(5)).unwrap(),
            SimTime::from_units(5)
        );
        assert!(matches!(
            resource_step(&"a".into(), Some(0), &r, SimTime::ZERO, SimTime::from_units(5)),
            Err(SimError::Routing { .. })
        ));
    }

    #[test]
    fn deficient_agent_buffers_until_commit() {
        // The resource reaches a1 at 10.5 while a1 is deficient. a1 is
        // released at 14 and forwards it to a2, the new step-0 holder.
        let text = format!("{W1}[resources]\n10.5\n");
        let out = run(&scenario(&text), 0).unwrap();
        let trace = &out.traces[0];
        assert_eq!(trace.visits[0].agent, AgentId::from("a2"));
        assert_eq!(trace.visits[0].start, SimTime::from_units(15));
        assert_eq!(out.metrics.resources_done, 1);
    }

    #[test]
    fn locality_uses_flow_distance() {
        let task = crate::model::Task::new(vec!["c1".into(), "c2".into(), "c3".into()]).unwrap();
        let ids: Vec<AgentId> = vec!["a1".into(), "a2".into(), "a3".into()];
        let pre = Configuration::wired(&task, (0..3).map(|s| (s, ids[s].clone())).collect()).unwrap();
        let post = Configuration::wired(
            &task,
            BTreeMap::from([(0, ids[1].clone()), (1, ids[2].clone()), (2, ids[0].clone())]),
        )
        .unwrap();
        let failing = BTreeSet::from([ids[0].clone()]);
        assert_eq!(compute_locality(&pre, &post, &ids, &failing, &TransportGraph::full()), Some(2));
        assert_eq!(compute_locality(&pre, &pre, &ids, &failing, &TransportGraph::full()), None);
    }
}

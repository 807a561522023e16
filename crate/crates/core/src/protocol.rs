//! Wave-like decentralized reconfiguration.
//!
//! When an agent can no longer act the capability its role requires, it
//! becomes the *origin* of a wave. The role it cannot act is the *token*. The
//! origin probes other agents one at a time, nearest first. A recipient that
//! can act the token either
//!
//! * closes the chain: it is idle, or the origin can act the role the
//!   recipient would vacate (the origin's remaining capabilities travel in
//!   the message header), or
//! * adopts the token tentatively and continues the search with its own old
//!   role as the new token (a transitive change).
//!
//! Dead ends are answered with `Rollback` and the searcher tries its next
//! candidate, so the wave as a whole is a depth-first search with a shared
//! visited set. In full transport this is exactly an augmenting-path search
//! over the step/agent compatibility graph.
//!
//! Closing a chain sends `TentativeAccept` back up the chain to the origin.
//! Each agent the accept passes becomes *prepared* and can no longer be
//! preempted. The origin then relays `Commit` through the chain members in
//! reverse order; the last member commits the origin's own new role (when
//! it has one) and sends `Done`.
//!
//! Concurrent waves are ordered by [`WaveId`]; a smaller id preempts the
//! unprepared tentative state of a larger one. Searches that were answered
//! `Busy` retry with exponential backoff instead of declaring infeasibility.

use std::collections::{BTreeSet, VecDeque};

use thiserror::Error;

use crate::model::{
    Agent, AgentId, AgentState, Capability, Configuration, ModelError, Role, Task, TransportGraph, TransportMode,
};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("protocol violation at {agent}: {detail}")]
    ProtocolViolation { agent: AgentId, detail: String },
}

/// Wave identity; the derived order (origin id, then sequence) is the
/// priority order, smaller first.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WaveId {
    pub origin: AgentId,
    pub failure_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    Propose,
    TentativeAccept,
    Rollback,
    Commit,
    Done,
    Busy,
    Infeasible,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        MessageKind::Propose,
        MessageKind::TentativeAccept,
        MessageKind::Rollback,
        MessageKind::Commit,
        MessageKind::Done,
        MessageKind::Busy,
        MessageKind::Infeasible,
    ];
}

/// One adoption in a chain. `vacated`/`adopted` are `None` for an idle agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChainLink {
    pub agent: AgentId,
    pub vacated: Option<usize>,
    pub adopted: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaveMessage {
    pub kind: MessageKind,
    pub wave: WaveId,
    /// The role currently seeking an actor (the origin's role for
    /// accept/commit traffic).
    pub token: Role,
    pub chain: Vec<ChainLink>,
    pub visited: BTreeSet<AgentId>,
    pub hop_budget: u32,
    /// Step the origin could no longer act.
    pub origin_step: usize,
    /// What the origin can still act; lets a recipient close a direct swap.
    pub origin_capabilities: BTreeSet<Capability>,
    /// Set when some probe below was answered `Busy`.
    pub contended: bool,
}

impl WaveMessage {
    /// Checks the structural invariants: chain agents are distinct and all
    /// of them appear in `visited`.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for link in &self.chain {
            if !seen.insert(&link.agent) {
                return Err(format!("agent {} appears twice in chain", link.agent));
            }
            if !self.visited.contains(&link.agent) {
                return Err(format!("chain agent {} missing from visited", link.agent));
            }
        }
        Ok(())
    }

    /// Chain links as model-level reallocation steps.
    pub fn chain_steps(&self) -> Vec<crate::model::ChainStep> {
        to_chain_steps(&self.chain)
    }
}

pub fn to_chain_steps(chain: &[ChainLink]) -> Vec<crate::model::ChainStep> {
    chain.iter().map(|l| crate::model::ChainStep { agent: l.agent.clone(), new_step: l.adopted }).collect()
}

/// Which agents a searcher considers as candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ProbeScope {
    /// Only agents currently holding a role, nearest along the flow first.
    Flow,
    /// Every reachable agent, nearest by transport hops first.
    #[default]
    All,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolConfig {
    pub probe_scope: ProbeScope,
    /// `None` means unlimited, i.e. the number of agents.
    pub hop_budget: Option<u32>,
    pub delay_per_hop: SimTime,
    pub max_retries: u32,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            probe_scope: ProbeScope::All,
            hop_budget: None,
            delay_per_hop: SimTime::from_units(1),
            max_retries: 8,
        }
    }
}

/// Extension point for a recipient's willingness to take a role beyond
/// plain capability compatibility.
pub trait Willingness {
    fn willing(&self, agent: &Agent, current_step: Option<usize>, token: &Role) -> bool;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysWilling;

impl Willingness for AlwaysWilling {
    fn willing(&self, _: &Agent, _: Option<usize>, _: &Role) -> bool {
        true
    }
}

/// Read-only knowledge an agent has about the shop floor when it handles a
/// message: task, layout, who exists, and the committed routing table.
pub struct ProtocolContext<'a> {
    pub task: &'a Task,
    pub transport: &'a TransportGraph,
    /// All agent ids, ascending.
    pub agents: &'a [AgentId],
    pub routing: &'a Configuration,
    pub config: &'a ProtocolConfig,
    pub willingness: &'a dyn Willingness,
}

impl ProtocolContext<'_> {
    fn hop_budget(&self) -> u32 {
        self.config.hop_budget.unwrap_or_else(|| u32::try_from(self.agents.len()).unwrap_or(u32::MAX))
    }

    pub fn token_role(&self, step: usize) -> Role {
        let assignment = &self.routing.assignment;
        Role {
            step,
            required: self.task.steps()[step].clone(),
            predecessors: step.checked_sub(1).and_then(|p| assignment.get(&p)).cloned().into_iter().collect(),
            successors: assignment.get(&(step + 1)).cloned().into_iter().collect(),
        }
    }

    /// Whether `agent` holding `step` has transport edges to its flow
    /// neighbours, taking the tentative adoptions in `chain` into account.
    /// Neighbour steps whose final holder is still open are skipped; they
    /// are checked when someone adopts them.
    fn adjacency_ok(&self, chain: &[ChainLink], agent: &AgentId, step: usize) -> bool {
        if self.transport.mode == TransportMode::Full {
            return true;
        }
        let holder = |s: usize| -> Option<&AgentId> {
            if let Some(link) = chain.iter().rev().find(|l| l.adopted == Some(s)) {
                return Some(&link.agent);
            }
            if chain.iter().any(|l| l.vacated == Some(s)) {
                return None;
            }
            self.routing.holder(s)
        };
        if let Some(prev) = step.checked_sub(1).and_then(holder) {
            if prev != agent && !self.transport.has_edge(prev, agent) {
                return false;
            }
        }
        if step + 1 < self.task.len() {
            if let Some(next) = holder(step + 1) {
                if next != agent && !self.transport.has_edge(agent, next) {
                    return false;
                }
            }
        }
        true
    }
}

/// Effects of handling one stimulus.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Outbox {
    pub messages: Vec<(AgentId, WaveMessage)>,
    /// Request a retry timer after the given delay.
    pub retry_after: Option<(SimTime, WaveId)>,
    /// Set at the origin when its wave completes.
    pub committed: Option<CommittedWave>,
    /// Set at the origin when its wave proves infeasible.
    pub halted: Option<WaveId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommittedWave {
    pub wave: WaveId,
    pub chain: Vec<ChainLink>,
}

impl CommittedWave {
    pub fn agents(&self) -> BTreeSet<AgentId> {
        self.chain.iter().map(|l| l.agent.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum OriginPhase {
    Searching,
    WaitingRetry,
    Committing,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct OriginState {
    wave: WaveId,
    token_step: usize,
    phase: OriginPhase,
    chain: Vec<ChainLink>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Tentative {
    wave: WaveId,
    old_step: Option<usize>,
    new_step: usize,
    parent: AgentId,
    /// Next agent down the chain, once known.
    child: Option<AgentId>,
    prepared: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SearchFrame {
    wave: WaveId,
    token_step: usize,
    candidates: VecDeque<AgentId>,
    outstanding: Option<AgentId>,
    chain: Vec<ChainLink>,
    visited: BTreeSet<AgentId>,
    hop_budget: u32,
    origin_step: usize,
    origin_capabilities: BTreeSet<Capability>,
    contended: bool,
}

/// Observable summary of an agent's protocol state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WaveMode {
    Normal,
    /// Origin waiting for a retry timer.
    Deficient {
        token: usize,
    },
    /// Searching, with one probe outstanding.
    AwaitingReply {
        wave: WaveId,
        candidates_remaining: usize,
    },
    TentativelyAdopted {
        wave: WaveId,
        old_step: Option<usize>,
        new_step: usize,
    },
    /// Origin relaying its commit.
    Committing {
        wave: WaveId,
    },
    /// Infeasible origin; terminal unless another wave recruits it.
    Halted,
}

/// Per-agent protocol state machine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaveAgent {
    pub agent: Agent,
    role: Option<usize>,
    halted: bool,
    origin: Option<OriginState>,
    tentative: Option<Tentative>,
    search: Option<SearchFrame>,
    retry_count: u32,
    next_failure_seq: u64,
}

impl WaveAgent {
    pub fn new(agent: Agent, role: Option<usize>) -> Self {
        WaveAgent {
            agent,
            role,
            halted: false,
            origin: None,
            tentative: None,
            search: None,
            retry_count: 0,
            next_failure_seq: 0,
        }
    }

    pub fn id(&self) -> &AgentId {
        &self.agent.id
    }

    /// Committed step.
    pub fn role(&self) -> Option<usize> {
        self.role
    }

    pub fn retry_count(&self) -> u32 {
        self.retry_count
    }

    pub fn is_halted(&self) -> bool {
        self.halted && !self.is_engaged()
    }

    /// Taking part in some wave (as origin or tentative adopter).
    pub fn is_engaged(&self) -> bool {
        self.origin.is_some() || self.tentative.is_some()
    }

    pub fn has_tentative_role(&self) -> bool {
        self.tentative.is_some()
    }

    pub fn mode(&self) -> WaveMode {
        if let Some(frame) = &self.search {
            return WaveMode::AwaitingReply { wave: frame.wave.clone(), candidates_remaining: frame.candidates.len() };
        }
        if let Some(t) = &self.tentative {
            return WaveMode::TentativelyAdopted { wave: t.wave.clone(), old_step: t.old_step, new_step: t.new_step };
        }
        if let Some(o) = &self.origin {
            return match o.phase {
                OriginPhase::Committing => WaveMode::Committing { wave: o.wave.clone() },
                _ => WaveMode::Deficient { token: o.token_step },
            };
        }
        if self.halted {
            WaveMode::Halted
        } else {
            WaveMode::Normal
        }
    }

    /// Coarse agent state for the structural model.
    pub fn agent_state(&self) -> AgentState {
        if self.tentative.is_some() {
            AgentState::Tentative
        } else if self.origin.is_some() || self.halted {
            AgentState::Deficient
        } else if self.role.is_some() {
            AgentState::Working
        } else {
            AgentState::Idle
        }
    }

    fn engaged_wave(&self) -> Option<&WaveId> {
        self.origin.as_ref().map(|o| &o.wave).or_else(|| self.tentative.as_ref().map(|t| &t.wave))
    }

    fn preemptable(&self) -> bool {
        match (&self.origin, &self.tentative) {
            (Some(o), _) => o.phase != OriginPhase::Committing,
            (None, Some(t)) => !t.prepared,
            (None, None) => true,
        }
    }

    fn role_actable(&self, task: &Task) -> bool {
        match self.role {
            Some(step) => self.agent.can_act(&task.steps()[step]),
            None => true,
        }
    }

    fn violation(&self, detail: impl Into<String>) -> ProtocolError {
        ProtocolError::ProtocolViolation { agent: self.agent.id.clone(), detail: detail.into() }
    }

    /// Records a capability failure; starts a wave when the held role needs
    /// the lost capability. While engaged in a wave the check is deferred
    /// until the agent is released.
    pub fn on_capability_failure(
        &mut self,
        capability: &Capability,
        ctx: &ProtocolContext<'_>,
    ) -> Result<Outbox, ProtocolError> {
        self.agent.break_capability(capability)?;
        let mut out = Outbox::default();
        self.recheck(ctx, &mut out);
        Ok(out)
    }

    pub fn on_retry_timer(&mut self, wave: &WaveId, ctx: &ProtocolContext<'_>) -> Result<Outbox, ProtocolError> {
        let mut out = Outbox::default();
        let waiting = self.origin.as_ref().is_some_and(|o| &o.wave == wave && o.phase == OriginPhase::WaitingRetry);
        if waiting {
            self.origin = None;
            self.start_wave(ctx, &mut out);
        }
        Ok(out)
    }

    /// Handles one delivered protocol message.
    pub fn handle(
        &mut self,
        from: &AgentId,
        msg: &WaveMessage,
        ctx: &ProtocolContext<'_>,
    ) -> Result<Outbox, ProtocolError> {
        msg.check_invariants().map_err(|d| self.violation(d))?;
        let mut out = Outbox::default();
        match msg.kind {
            MessageKind::Propose => self.handle_propose(from, msg, ctx, &mut out),
            MessageKind::TentativeAccept => self.handle_tentative_accept(from, msg, &mut out),
            MessageKind::Rollback => self.handle_rollback(from, msg, ctx, &mut out),
            MessageKind::Busy => self.handle_busy(from, msg, ctx, &mut out),
            MessageKind::Commit => self.handle_commit(msg, ctx, &mut out)?,
            MessageKind::Done => self.handle_done(msg, &mut out)?,
            MessageKind::Infeasible => {}
        }
        self.recheck(ctx, &mut out);
        Ok(out)
    }

    /// A free agent whose committed role is unactable starts a wave.
    fn recheck(&mut self, ctx: &ProtocolContext<'_>, out: &mut Outbox) {
        if !self.is_engaged() && !self.halted && !self.role_actable(ctx.task) {
            self.start_wave(ctx, out);
        }
    }

    fn start_wave(&mut self, ctx: &ProtocolContext<'_>, out: &mut Outbox) {
        let Some(token_step) = self.role else { return };
        let wave = WaveId { origin: self.agent.id.clone(), failure_seq: self.next_failure_seq };
        self.next_failure_seq += 1;
        self.origin =
            Some(OriginState { wave: wave.clone(), token_step, phase: OriginPhase::Searching, chain: Vec::new() });
        self.search = Some(SearchFrame {
            wave,
            token_step,
            candidates: self.candidates(ctx, token_step, &self.agent.id),
            outstanding: None,
            chain: Vec::new(),
            visited: BTreeSet::new(),
            hop_budget: ctx.hop_budget(),
            origin_step: token_step,
            origin_capabilities: self.agent.actable_capabilities(),
            contended: false,
        });
        self.probe_next(ctx, out);
    }

    /// Candidates for `token_step`, nearest first, ties by ascending id.
    fn candidates(&self, ctx: &ProtocolContext<'_>, token_step: usize, origin: &AgentId) -> VecDeque<AgentId> {
        let me = &self.agent.id;
        let mut ranked: Vec<((u64, u64), &AgentId)> = ctx
            .agents
            .iter()
            .filter(|a| *a != me && *a != origin)
            .filter_map(|a| {
                let hops = u64::from(ctx.transport.hops(me, a)?);
                match ctx.config.probe_scope {
                    ProbeScope::All => Some(((hops, 0), a)),
                    ProbeScope::Flow => {
                        let step = ctx.routing.step_of(a)?;
                        Some(((step.abs_diff(token_step) as u64, hops), a))
                    }
                }
            })
            .collect();
        ranked.sort();
        ranked.into_iter().map(|(_, a)| a.clone()).collect()
    }

    fn message(&self, kind: MessageKind, frame_like: MessageFields<'_>, ctx: &ProtocolContext<'_>) -> WaveMessage {
        WaveMessage {
            kind,
            wave: frame_like.wave.clone(),
            token: ctx.token_role(frame_like.token_step),
            chain: frame_like.chain.to_vec(),
            visited: frame_like.visited.clone(),
            hop_budget: frame_like.hop_budget,
            origin_step: frame_like.origin_step,
            origin_capabilities: frame_like.origin_capabilities.clone(),
            contended: frame_like.contended,
        }
    }

    fn probe_next(&mut self, ctx: &ProtocolContext<'_>, out: &mut Outbox) {
        let Some(frame) = self.search.as_mut() else { return };
        while let Some(candidate) = frame.candidates.pop_front() {
            if frame.visited.contains(&candidate) {
                continue;
            }
            frame.outstanding = Some(candidate.clone());
            let frame = self.search.as_ref().expect("frame present");
            let msg = self.message(MessageKind::Propose, MessageFields::from(frame), ctx);
            if let Some(t) = self.tentative.as_mut() {
                t.child = Some(candidate.clone());
            }
            out.messages.push((candidate, msg));
            return;
        }
        self.search_exhausted(ctx, out);
    }

    fn search_exhausted(&mut self, ctx: &ProtocolContext<'_>, out: &mut Outbox) {
        let Some(frame) = self.search.take() else { return };
        let own_wave = self.origin.as_ref().is_some_and(|o| o.wave == frame.wave);
        if own_wave {
            if frame.contended && self.retry_count < ctx.config.max_retries {
                let backoff = ctx.config.delay_per_hop.scale(1_u64 << self.retry_count);
                self.retry_count += 1;
                let origin = self.origin.as_mut().expect("origin present");
                origin.phase = OriginPhase::WaitingRetry;
                out.retry_after = Some((backoff, frame.wave));
            } else {
                self.declare_infeasible(frame, ctx, out);
            }
            return;
        }
        let Some(tentative) = self.tentative.take() else { return };
        let mut fields = MessageFields::from(&frame);
        fields.token_step = tentative.new_step;
        let reply = self.message(MessageKind::Rollback, fields, ctx);
        out.messages.push((tentative.parent, reply));
    }

    fn declare_infeasible(&mut self, frame: SearchFrame, ctx: &ProtocolContext<'_>, out: &mut Outbox) {
        self.origin = None;
        self.halted = true;
        let me = self.agent.id.clone();
        let token = ctx.token_role(frame.token_step);
        let msg = self.message(MessageKind::Infeasible, MessageFields::from(&frame), ctx);
        for neighbour in token.predecessors.iter().chain(token.successors.iter()) {
            if *neighbour != me {
                out.messages.push((neighbour.clone(), msg.clone()));
            }
        }
        out.halted = Some(frame.wave);
    }

    /// Abandons unprepared involvement in a lower-priority wave.
    fn preempt(&mut self, ctx: &ProtocolContext<'_>, out: &mut Outbox) {
        if let Some(frame) = self.search.take() {
            if let Some(child) = &frame.outstanding {
                let mut fields = MessageFields::from(&frame);
                fields.contended = true;
                out.messages.push((child.clone(), self.message(MessageKind::Rollback, fields, ctx)));
            }
        }
        if let Some(t) = self.tentative.take() {
            let visited = BTreeSet::from([self.agent.id.clone()]);
            let msg = WaveMessage {
                kind: MessageKind::Rollback,
                wave: t.wave.clone(),
                token: ctx.token_role(t.new_step),
                chain: Vec::new(),
                visited,
                hop_budget: 0,
                origin_step: t.new_step,
                origin_capabilities: BTreeSet::new(),
                contended: true,
            };
            out.messages.push((t.parent, msg));
        }
        self.origin = None;
    }

    fn reply(&self, kind: MessageKind, to: &AgentId, msg: &WaveMessage, contended: bool, out: &mut Outbox) {
        let mut reply = msg.clone();
        reply.kind = kind;
        reply.contended = contended;
        out.messages.push((to.clone(), reply));
    }

    fn handle_propose(&mut self, from: &AgentId, msg: &WaveMessage, ctx: &ProtocolContext<'_>, out: &mut Outbox) {
        if let Some(engaged) = self.engaged_wave() {
            if *engaged == msg.wave {
                self.reply(MessageKind::Rollback, from, msg, false, out);
                return;
            }
            if msg.wave < *engaged && self.preemptable() {
                self.preempt(ctx, out);
            } else {
                self.reply(MessageKind::Busy, from, msg, true, out);
                return;
            }
        }

        let me = self.agent.id.clone();
        let token_step = msg.token.step;
        let capable = token_step < ctx.task.len()
            && !msg.visited.contains(&me)
            && self.agent.can_act(&ctx.task.steps()[token_step])
            && ctx.willingness.willing(&self.agent, self.role, &msg.token);
        let my_link = ChainLink { agent: me.clone(), vacated: self.role, adopted: Some(token_step) };
        let mut chain = msg.chain.clone();
        chain.push(my_link);
        if !capable || !ctx.adjacency_ok(&chain, &me, token_step) {
            self.reply(MessageKind::Rollback, from, msg, false, out);
            return;
        }

        let origin_id = msg.wave.origin.clone();
        let close_with_origin = |adopted: Option<usize>, mut chain: Vec<ChainLink>| {
            chain.push(ChainLink { agent: origin_id.clone(), vacated: Some(msg.origin_step), adopted });
            chain
        };
        let closing_chain = match self.role {
            None => Some(close_with_origin(None, chain.clone())),
            Some(own) => {
                let origin_can = msg.origin_capabilities.contains(&ctx.task.steps()[own]);
                let closed = close_with_origin(Some(own), chain.clone());
                (origin_can && ctx.adjacency_ok(&closed, &origin_id, own)).then_some(closed)
            }
        };

        if let Some(closed) = closing_chain {
            self.tentative = Some(Tentative {
                wave: msg.wave.clone(),
                old_step: self.role,
                new_step: token_step,
                parent: from.clone(),
                child: None,
                prepared: true,
            });
            let mut accept = msg.clone();
            accept.kind = MessageKind::TentativeAccept;
            accept.token = ctx.token_role(msg.origin_step);
            accept.visited.extend(closed.iter().map(|l| l.agent.clone()));
            accept.chain = closed;
            out.messages.push((from.clone(), accept));
            return;
        }

        if msg.hop_budget == 0 {
            self.reply(MessageKind::Rollback, from, msg, false, out);
            return;
        }
        let own = self.role.expect("role holder");
        let mut visited = msg.visited.clone();
        visited.insert(me.clone());
        self.tentative = Some(Tentative {
            wave: msg.wave.clone(),
            old_step: Some(own),
            new_step: token_step,
            parent: from.clone(),
            child: None,
            prepared: false,
        });
        self.search = Some(SearchFrame {
            wave: msg.wave.clone(),
            token_step: own,
            candidates: self.candidates(ctx, own, &msg.wave.origin),
            outstanding: None,
            chain,
            visited,
            hop_budget: msg.hop_budget - 1,
            origin_step: msg.origin_step,
            origin_capabilities: msg.origin_capabilities.clone(),
            contended: false,
        });
        self.probe_next(ctx, out);
    }

    fn awaiting_from(&self, wave: &WaveId, from: &AgentId) -> bool {
        self.search.as_ref().is_some_and(|f| &f.wave == wave && f.outstanding.as_ref() == Some(from))
    }

    fn handle_rollback(&mut self, from: &AgentId, msg: &WaveMessage, ctx: &ProtocolContext<'_>, out: &mut Outbox) {
        if self.awaiting_from(&msg.wave, from) {
            let frame = self.search.as_mut().expect("frame present");
            frame.visited.extend(msg.visited.iter().cloned());
            frame.contended |= msg.contended;
            frame.outstanding = None;
            if let Some(t) = self.tentative.as_mut() {
                t.child = None;
            }
            self.probe_next(ctx, out);
            return;
        }
        let aborted = self.tentative.as_ref().is_some_and(|t| t.wave == msg.wave && &t.parent == from);
        if aborted {
            let t = self.tentative.take().expect("tentative present");
            let frame = self.search.take();
            let child = frame.as_ref().and_then(|f| f.outstanding.clone()).or(t.child);
            if let Some(child) = child {
                let mut abort = msg.clone();
                abort.visited.insert(self.agent.id.clone());
                out.messages.push((child, abort));
            }
        }
    }

    fn handle_busy(&mut self, from: &AgentId, msg: &WaveMessage, ctx: &ProtocolContext<'_>, out: &mut Outbox) {
        if self.awaiting_from(&msg.wave, from) {
            let frame = self.search.as_mut().expect("frame present");
            frame.contended = true;
            frame.outstanding = None;
            if let Some(t) = self.tentative.as_mut() {
                t.child = None;
            }
            self.probe_next(ctx, out);
        }
    }

    fn handle_tentative_accept(&mut self, from: &AgentId, msg: &WaveMessage, out: &mut Outbox) {
        if !self.awaiting_from(&msg.wave, from) {
            return;
        }
        self.search = None;
        if let Some(origin) = self.origin.as_mut().filter(|o| o.wave == msg.wave) {
            origin.phase = OriginPhase::Committing;
            origin.chain = msg.chain.clone();
            let relay = commit_relay(&msg.chain, &msg.wave.origin);
            let mut commit = msg.clone();
            commit.kind = MessageKind::Commit;
            out.messages.push((relay[0].clone(), commit));
            return;
        }
        if let Some(t) = self.tentative.as_mut().filter(|t| t.wave == msg.wave) {
            t.prepared = true;
            t.child = Some(from.clone());
            out.messages.push((t.parent.clone(), msg.clone()));
        }
    }

    fn handle_commit(
        &mut self,
        msg: &WaveMessage,
        ctx: &ProtocolContext<'_>,
        out: &mut Outbox,
    ) -> Result<(), ProtocolError> {
        let me = self.agent.id.clone();
        let link = msg
            .chain
            .iter()
            .find(|l| l.agent == me)
            .ok_or_else(|| self.violation("commit for a chain that does not include this agent"))?;

        if let Some(origin) = self.origin.as_ref().filter(|o| o.wave == msg.wave) {
            if origin.phase != OriginPhase::Committing {
                return Err(self.violation("origin received commit outside its commit phase"));
            }
            self.role = link.adopted;
            return Ok(());
        }

        let prepared = self.tentative.as_ref().is_some_and(|t| t.wave == msg.wave && t.prepared);
        if !prepared {
            return Err(self.violation(format!("commit for wave {:?} without prepared adoption", msg.wave)));
        }
        self.tentative = None;
        self.role = link.adopted;
        if self.halted && self.role_actable(ctx.task) {
            self.halted = false;
        }

        let origin = &msg.wave.origin;
        let relay = commit_relay(&msg.chain, origin);
        let position = relay.iter().position(|a| *a == me).expect("member of relay");
        let mut forward = msg.clone();
        if let Some(next) = relay.get(position + 1) {
            out.messages.push((next.clone(), forward));
            return Ok(());
        }
        let origin_adopts = msg.chain.iter().any(|l| &l.agent == origin && l.adopted.is_some());
        if origin_adopts {
            out.messages.push((origin.clone(), forward.clone()));
        }
        forward.kind = MessageKind::Done;
        out.messages.push((origin.clone(), forward));
        Ok(())
    }

    fn handle_done(&mut self, msg: &WaveMessage, out: &mut Outbox) -> Result<(), ProtocolError> {
        let committing = self.origin.as_ref().is_some_and(|o| o.wave == msg.wave && o.phase == OriginPhase::Committing);
        if !committing {
            return Err(self.violation(format!("done for wave {:?} outside commit phase", msg.wave)));
        }
        let origin = self.origin.take().expect("origin present");
        let me = &self.agent.id;
        if let Some(link) = origin.chain.iter().find(|l| &l.agent == me) {
            self.role = link.adopted;
        }
        self.retry_count = 0;
        out.committed = Some(CommittedWave { wave: origin.wave, chain: origin.chain });
        Ok(())
    }
}

/// Commit relay order: non-origin chain members, last adopter first.
fn commit_relay(chain: &[ChainLink], origin: &AgentId) -> Vec<AgentId> {
    chain.iter().rev().filter(|l| &l.agent != origin).map(|l| l.agent.clone()).collect()
}

/// Borrowed fields shared by every message a search frame emits.
struct MessageFields<'a> {
    wave: &'a WaveId,
    token_step: usize,
    chain: &'a [ChainLink],
    visited: &'a BTreeSet<AgentId>,
    hop_budget: u32,
    origin_step: usize,
    origin_capabilities: &'a BTreeSet<Capability>,
    contended: bool,
}

impl<'a> From<&'a SearchFrame> for MessageFields<'a> {
    fn from(f: &'a SearchFrame) -> Self {
        MessageFields {
            wave: &f.wave,
            token_step: f.token_step,
            chain: &f.chain,
            visited: &f.visited,
            hop_budget: f.hop_budget,
            origin_step: f.origin_step,
            origin_capabilities: &f.origin_capabilities,
            contended: f.contended,
        }
    }
}

/// True iff nothing is in flight and every agent is normal, idle or halted.
/// Observer-only: agents never call this.
pub fn is_quiescent<'a>(agents: impl IntoIterator<Item = &'a WaveAgent>, pending_deliveries: usize) -> bool {
    pending_deliveries == 0 && agents.into_iter().all(|a| matches!(a.mode(), WaveMode::Normal | WaveMode::Halted))
}

/// Upper bound on the messages a single wave attempt may send among `n` agents.
pub fn message_bound(n: usize) -> usize {
    2 * n * (n + 1)
}

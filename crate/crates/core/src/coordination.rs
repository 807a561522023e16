//! Coordination media and endpoints.
//!
//! A [`CoordinationMedium`] carries envelopes between agents with a
//! deterministic latency of `hops × delay_per_hop`. Each agent is bound to
//! one [`CoordinationEndpoint`]; the endpoint is the only path through which
//! protocol messages reach (and modify) the agent.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use thiserror::Error;

use crate::model::{AgentId, TransportGraph};
use crate::protocol::{Outbox, ProtocolContext, ProtocolError, WaveAgent, WaveMessage};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoordinationError {
    #[error("endpoint for {0} already attached")]
    AlreadyAttached(AgentId),
    #[error("no endpoint attached for {0}")]
    UnknownEndpoint(AgentId),
    #[error("{0} cannot send to itself")]
    SelfAddressed(AgentId),
    #[error("{to} is unreachable from {from}")]
    Unreachable { from: AgentId, to: AgentId },
    #[error("envelope for {got} delivered to endpoint of {expected}")]
    Misaddressed { expected: AgentId, got: AgentId },
    #[error("delay per hop must be positive")]
    InvalidDelay,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub from: AgentId,
    pub to: AgentId,
    pub sent_at: SimTime,
    pub payload: WaveMessage,
}

/// Where and when a sent envelope will arrive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub deliver_at: SimTime,
    pub seq: u64,
}

#[derive(Debug)]
struct Pending {
    deliver_at: SimTime,
    seq: u64,
    envelope: Envelope,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        (self.deliver_at, self.seq) == (other.deliver_at, other.seq)
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // Reversed: BinaryHeap is a max-heap and we want the earliest first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.deliver_at, other.seq).cmp(&(self.deliver_at, self.seq))
    }
}

/// Something that can react to an envelope on behalf of an agent.
pub trait EnvelopeHandler {
    fn handle(&mut self, envelope: &Envelope) -> Result<Outbox, ProtocolError>;
}

/// Binds a protocol state machine and its read-only context to an endpoint.
pub struct WaveBinding<'a, 'c> {
    pub agent: &'a mut WaveAgent,
    pub ctx: &'a ProtocolContext<'c>,
}

impl EnvelopeHandler for WaveBinding<'_, '_> {
    fn handle(&mut self, envelope: &Envelope) -> Result<Outbox, ProtocolError> {
        self.agent.handle(&envelope.from, &envelope.payload, self.ctx)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordinationEndpoint {
    agent_id: AgentId,
    inbox: VecDeque<Envelope>,
}

impl CoordinationEndpoint {
    pub fn agent_id(&self) -> &AgentId {
        &self.agent_id
    }

    pub fn inbox_len(&self) -> usize {
        self.inbox.len()
    }

    pub fn take_next(&mut self) -> Option<Envelope> {
        self.inbox.pop_front()
    }

    /// Runs the bound handler on `envelope` and returns its effects.
    pub fn effectuate<H: EnvelopeHandler>(
        &mut self,
        envelope: &Envelope,
        handler: &mut H,
    ) -> Result<Outbox, CoordinationError> {
        if envelope.to != self.agent_id {
            return Err(CoordinationError::Misaddressed { expected: self.agent_id.clone(), got: envelope.to.clone() });
        }
        Ok(handler.handle(envelope)?)
    }
}

/// Point-to-point medium with reliable, FIFO-per-pair delivery.
#[derive(Debug)]
pub struct CoordinationMedium {
    delay_per_hop: SimTime,
    transport: TransportGraph,
    endpoints: BTreeMap<AgentId, CoordinationEndpoint>,
    pending: BinaryHeap<Pending>,
    next_seq: u64,
    sent: u64,
    delivered: u64,
}

impl CoordinationMedium {
    pub fn new(delay_per_hop: SimTime, transport: TransportGraph) -> Result<Self, CoordinationError> {
        if delay_per_hop <= SimTime::ZERO {
            return Err(CoordinationError::InvalidDelay);
        }
        Ok(CoordinationMedium {
            delay_per_hop,
            transport,
            endpoints: BTreeMap::new(),
            pending: BinaryHeap::new(),
            next_seq: 0,
            sent: 0,
            delivered: 0,
        })
    }

    pub fn attach_endpoint(&mut self, agent_id: AgentId) -> Result<&CoordinationEndpoint, CoordinationError> {
        use std::collections::btree_map::Entry;
        match self.endpoints.entry(agent_id.clone()) {
            Entry::Occupied(_) => Err(CoordinationError::AlreadyAttached(agent_id)),
            Entry::Vacant(slot) => Ok(slot.insert(CoordinationEndpoint { agent_id, inbox: VecDeque::new() })),
        }
    }

    pub fn endpoint(&self, agent_id: &AgentId) -> Option<&CoordinationEndpoint> {
        self.endpoints.get(agent_id)
    }

    pub fn endpoint_mut(&mut self, agent_id: &AgentId) -> Option<&mut CoordinationEndpoint> {
        self.endpoints.get_mut(agent_id)
    }

    /// Allocates the next global sequence number. The simulator draws its
    /// own event sequence numbers from here too, so that deliveries and other
    /// events share one total order.
    pub fn allocate_seq(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }

    /// Schedules `payload` for delivery at `now + hops × delay_per_hop`.
    pub fn send(
        &mut self,
        from: &AgentId,
        to: &AgentId,
        payload: WaveMessage,
        now: SimTime,
    ) -> Result<DeliveryRecord, CoordinationError> {
        for id in [from, to] {
            if !self.endpoints.contains_key(id) {
                return Err(CoordinationError::UnknownEndpoint(id.clone()));
            }
        }
        if from == to {
            return Err(CoordinationError::SelfAddressed(from.clone()));
        }
        let hops = self
            .transport
            .hops(from, to)
            .ok_or_else(|| CoordinationError::Unreachable { from: from.clone(), to: to.clone() })?;
        let deliver_at = now + self.delay_per_hop.scale(u64::from(hops));
        let seq = self.allocate_seq();
        self.pending.push(Pending {
            deliver_at,
            seq,
            envelope: Envelope { from: from.clone(), to: to.clone(), sent_at: now, payload },
        });
        self.sent += 1;
        Ok(DeliveryRecord { deliver_at, seq })
    }

    /// `(deliver_at, seq)` of the earliest pending delivery.
    pub fn peek_next(&self) -> Option<(SimTime, u64)> {
        self.pending.peek().map(|p| (p.deliver_at, p.seq))
    }

    /// Moves the earliest pending envelope into its recipient's inbox and
    /// returns the recipient.
    pub fn deliver_next(&mut self) -> Option<(SimTime, AgentId)> {
        let p = self.pending.pop()?;
        let to = p.envelope.to.clone();
        self.endpoints.get_mut(&to).expect("send checked the recipient endpoint").inbox.push_back(p.envelope);
        self.delivered += 1;
        Some((p.deliver_at, to))
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn sent_count(&self) -> u64 {
        self.sent
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered
    }
}

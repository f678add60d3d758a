//! Point-to-point message delivery between ranks.
//!
//! Two backends implement [`Transport`]: [`sim`] runs every rank of a group
//! inside one deterministic virtual-time scheduler, and [`socket`] connects
//! one process per rank over TCP. Algorithms are written once against the
//! trait and run unchanged on either.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rank;

pub mod sim;
pub mod socket;

pub use sim::{SimConfig, SimEndpoint, SimNetwork, SimOutcome};
pub use socket::{Hostfile, SocketTransport};

/// Message tag. Messages on one `(src, dst, tag)` channel are delivered in
/// send order.
pub type Tag = u32;

pub trait Transport {
    fn rank(&self) -> Rank;

    fn size(&self) -> usize;

    fn send(&mut self, dst: Rank, tag: Tag, payload: &[u8]) -> Result<()>;

    /// Blocks until the next message from `src` on `tag` arrives.
    fn recv(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>>;

    /// Sends to `dst` and receives from `src` as one full-duplex step.
    fn sendrecv(&mut self, dst: Rank, payload: &[u8], src: Rank, tag: Tag) -> Result<Vec<u8>> {
        self.send(dst, tag, payload)?;
        self.recv(src, tag)
    }

    /// Current virtual clock of this rank, in seconds.
    fn virtual_time(&self) -> Result<f64> {
        Err(Error::Unsupported("virtual_time requires the simulated backend"))
    }

    /// Accounts for a local reduction over `bytes` bytes.
    fn charge_reduction(&mut self, _bytes: usize) {}

    /// Accounts for `seconds` of local computation.
    fn advance(&mut self, _seconds: f64) {}

    /// Group-wide synchronization point.
    fn barrier(&mut self) -> Result<()>;

    fn counters(&self) -> RankCounters;

    fn check_peer(&self, peer: Rank) -> Result<()> {
        if peer >= self.size() {
            return Err(Error::Routing {
                rank: peer,
                size: self.size(),
            });
        }
        if peer == self.rank() {
            return Err(Error::Protocol(format!(
                "rank {peer} attempted to message itself through the transport"
            )));
        }
        Ok(())
    }
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn rank(&self) -> Rank {
        (**self).rank()
    }
    fn size(&self) -> usize {
        (**self).size()
    }
    fn send(&mut self, dst: Rank, tag: Tag, payload: &[u8]) -> Result<()> {
        (**self).send(dst, tag, payload)
    }
    fn recv(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>> {
        (**self).recv(src, tag)
    }
    fn sendrecv(&mut self, dst: Rank, payload: &[u8], src: Rank, tag: Tag) -> Result<Vec<u8>> {
        (**self).sendrecv(dst, payload, src, tag)
    }
    fn virtual_time(&self) -> Result<f64> {
        (**self).virtual_time()
    }
    fn charge_reduction(&mut self, bytes: usize) {
        (**self).charge_reduction(bytes)
    }
    fn advance(&mut self, seconds: f64) {
        (**self).advance(seconds)
    }
    fn barrier(&mut self) -> Result<()> {
        (**self).barrier()
    }
    fn counters(&self) -> RankCounters {
        (**self).counters()
    }
}

/// Per-message latency `alpha` (s) and inverse bandwidth `beta` (s/byte).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub alpha: f64,
    pub beta: f64,
}

impl LinkModel {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let link = Self { alpha, beta };
        link.validate()?;
        Ok(link)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Parameter(format!(
                "link parameters must be non-negative (alpha={}, beta={})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    pub fn cost(&self, bytes: usize) -> f64 {
        self.alpha + bytes as f64 * self.beta
    }
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            alpha: 1e-6,
            beta: 1e-9,
        }
    }
}

/// Link parameters for every rank pair, optionally distinguishing pairs on
/// the same node.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NetworkModel {
    pub link: LinkModel,
    /// Used for pairs that share a node according to `node_of`.
    #[serde(default)]
    pub intra_node: Option<LinkModel>,
    /// Node index of each rank. Empty means every rank is on its own node.
    #[serde(default)]
    pub node_of: Vec<usize>,
}

impl NetworkModel {
    pub fn uniform(link: LinkModel) -> Self {
        Self {
            link,
            intra_node: None,
            node_of: Vec::new(),
        }
    }

    pub fn link_between(&self, a: Rank, b: Rank) -> LinkModel {
        match (&self.intra_node, self.node_of.get(a), self.node_of.get(b)) {
            (Some(intra), Some(na), Some(nb)) if na == nb => *intra,
            _ => self.link,
        }
    }

    pub fn cost(&self, src: Rank, dst: Rank, bytes: usize) -> f64 {
        self.link_between(src, dst).cost(bytes)
    }

    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        if let Some(intra) = &self.intra_node {
            intra.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RankCounters {
    pub messages_sent: u64,
    pub bytes_sent: u64,
    pub messages_received: u64,
    pub bytes_received: u64,
}

impl RankCounters {
    pub fn since(&self, earlier: &RankCounters) -> RankCounters {
        RankCounters {
            messages_sent: self.messages_sent - earlier.messages_sent,
            bytes_sent: self.bytes_sent - earlier.bytes_sent,
            messages_received: self.messages_received - earlier.messages_received,
            bytes_received: self.bytes_received - earlier.bytes_received,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Send,
    Recv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub rank: Rank,
    /// Position in this rank's own event sequence.
    pub seq: u64,
    pub kind: EventKind,
    pub peer: Rank,
    pub tag: Tag,
    pub bytes: u64,
    /// Transfer start for sends, delivery time for receives.
    pub time: f64,
}

/// Message and byte accounting for one simulated run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventLog {
    pub counters: Vec<RankCounters>,
    /// All events ordered by `(time, rank, seq)`.
    pub events: Vec<Event>,
}

impl EventLog {
    pub(crate) fn from_parts(counters: Vec<RankCounters>, per_rank: Vec<Vec<Event>>) -> Self {
        let mut events: Vec<Event> = per_rank.into_iter().flatten().collect();
        events.sort_by(|a, b| {
            a.time
                .total_cmp(&b.time)
                .then(a.rank.cmp(&b.rank))
                .then(a.seq.cmp(&b.seq))
        });
        Self { counters, events }
    }

    pub fn total_messages_sent(&self) -> u64 {
        self.counters.iter().map(|c| c.messages_sent).sum()
    }

    pub fn total_messages_received(&self) -> u64 {
        self.counters.iter().map(|c| c.messages_received).sum()
    }

    pub fn total_bytes_sent(&self) -> u64 {
        self.counters.iter().map(|c| c.bytes_sent).sum()
    }

    pub fn total_bytes_received(&self) -> u64 {
        self.counters.iter().map(|c| c.bytes_received).sum()
    }

    pub fn sends_by(&self, rank: Rank) -> impl Iterator<Item = &Event> {
        self.events
            .iter()
            .filter(move |e| e.rank == rank && e.kind == EventKind::Send)
    }
}

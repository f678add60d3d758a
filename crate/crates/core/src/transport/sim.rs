//! Deterministic virtual-time network.
//!
//! Every rank runs its program on its own thread, but only the rank holding
//! the scheduler token executes; the others are parked. The token passes when
//! the running rank blocks in `recv`, reaches a barrier or finishes, and goes
//! to the ready rank with the smallest `(virtual clock, rank)`. Execution is
//! therefore a single deterministic interleaving.
//!
//! Timing rules, with `c = alpha + bytes * beta` for the link in use:
//! - `send` at sender clock `t` starts the transfer at `t` and advances the
//!   sender to `t + c` (one channel) or to the start of the earliest free
//!   channel (several channels).
//! - `recv` posted at receiver clock `r` completes at `max(start, r) + c`.
//! - `sendrecv` is full duplex: the receive side counts as ready at the
//!   clock value before the outgoing transfer was charged.
//! - `charge_reduction(bytes)` advances the clock by `gamma * bytes`.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::sync::Arc;
use std::thread;

use ordered_float::OrderedFloat;
use parking_lot::{Condvar, Mutex, MutexGuard};

use super::{Event, EventKind, EventLog, NetworkModel, RankCounters, Tag, Transport};
use crate::error::{Error, Result};
use crate::tensor::Rank;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub network: NetworkModel,
    /// Seconds per byte of local reduction.
    pub gamma: f64,
    /// Concurrent outgoing transfers per rank.
    pub channels: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            network: NetworkModel::default(),
            gamma: 0.0,
            channels: 1,
        }
    }
}

impl SimConfig {
    pub fn new(network: NetworkModel) -> Self {
        Self {
            network,
            ..Self::default()
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if !(self.gamma >= 0.0) {
            return Err(Error::Parameter(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if self.channels == 0 {
            return Err(Error::Parameter("channels must be at least 1".into()));
        }
        Ok(())
    }
}

/// Results of one simulated run, indexed by rank.
#[derive(Debug)]
pub struct SimOutcome<T> {
    pub results: Vec<T>,
    pub log: EventLog,
    pub clocks: Vec<f64>,
}

impl<T> SimOutcome<T> {
    pub fn max_time(&self) -> f64 {
        self.clocks.iter().copied().fold(0.0, f64::max)
    }
}

/// A simulated group of `size` ranks.
#[derive(Debug, Clone)]
pub struct SimNetwork {
    size: usize,
    config: SimConfig,
}

impl SimNetwork {
    pub fn new(size: usize, config: SimConfig) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidGroup("group size must be at least 1".into()));
        }
        config.validate()?;
        Ok(Self { size, config })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    /// Runs `program` once per rank and waits for all of them.
    ///
    /// If any rank fails, the first non-deadlock error (by rank) is returned;
    /// ranks left waiting on a failed peer report a deadlock.
    pub fn run<T, F>(&self, program: F) -> Result<SimOutcome<T>>
    where
        T: Send,
        F: Fn(&mut SimEndpoint) -> Result<T> + Sync,
    {
        let shared = Arc::new(Shared::new(self.size, self.config.clone()));
        {
            let mut st = shared.state.lock();
            shared.dispatch(&mut st);
        }

        let joined: Vec<thread::Result<Result<T>>> = thread::scope(|scope| {
            let handles: Vec<_> = (0..self.size)
                .map(|rank| {
                    let shared = Arc::clone(&shared);
                    let program = &program;
                    thread::Builder::new()
                        .name(format!("sim-rank-{rank}"))
                        .spawn_scoped(scope, move || {
                            let _done = DoneGuard {
                                shared: Arc::clone(&shared),
                                rank,
                            };
                            let mut endpoint = SimEndpoint { shared, rank };
                            endpoint.wait_first_turn()?;
                            program(&mut endpoint)
                        })
                        .expect("failed to spawn simulated rank")
                })
                .collect();
            handles.into_iter().map(|h| h.join()).collect()
        });

        let mut results = Vec::with_capacity(self.size);
        let mut first_err: Option<Error> = None;
        let mut first_deadlock: Option<Error> = None;
        for outcome in joined {
            match outcome {
                Ok(Ok(v)) => results.push(v),
                Ok(Err(e @ Error::Deadlock { .. })) => {
                    first_deadlock.get_or_insert(e);
                }
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(panic) => std::panic::resume_unwind(panic),
            }
        }
        if let Some(e) = first_err.or(first_deadlock) {
            return Err(e);
        }

        let mut st = shared.state.lock();
        let clocks = st.clocks.clone();
        let counters = st.counters.clone();
        let events = std::mem::take(&mut st.events);
        Ok(SimOutcome {
            results,
            log: EventLog::from_parts(counters, events),
            clocks,
        })
    }
}

struct Message {
    payload: Vec<u8>,
    start: f64,
    cost: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Ready,
    Running,
    Blocked { src: Rank, tag: Tag },
    Barrier,
    Done,
}

struct State {
    running: Option<Rank>,
    ready: BinaryHeap<Reverse<(OrderedFloat<f64>, Rank)>>,
    status: Vec<Status>,
    mailbox: HashMap<(Rank, Rank, Tag), VecDeque<Message>>,
    clocks: Vec<f64>,
    channel_free: Vec<Vec<f64>>,
    counters: Vec<RankCounters>,
    events: Vec<Vec<Event>>,
    deadlock: Option<Vec<Rank>>,
}

struct Shared {
    size: usize,
    config: SimConfig,
    state: Mutex<State>,
    wake: Vec<Condvar>,
}

impl Shared {
    fn new(size: usize, config: SimConfig) -> Self {
        let channels = config.channels;
        let ready = (0..size).map(|r| Reverse((OrderedFloat(0.0), r))).collect();
        Self {
            size,
            config,
            state: Mutex::new(State {
                running: None,
                ready,
                status: vec![Status::Ready; size],
                mailbox: HashMap::new(),
                clocks: vec![0.0; size],
                channel_free: vec![vec![0.0; channels]; size],
                counters: vec![RankCounters::default(); size],
                events: vec![Vec::new(); size],
                deadlock: None,
            }),
            wake: (0..size).map(|_| Condvar::new()).collect(),
        }
    }

    /// Hands the token to the next ready rank, or declares a deadlock when
    /// nobody can run but somebody is still waiting.
    fn dispatch(&self, st: &mut State) {
        if let Some(Reverse((_, next))) = st.ready.pop() {
            st.status[next] = Status::Running;
            st.running = Some(next);
            self.wake[next].notify_one();
            return;
        }
        st.running = None;
        let stuck: Vec<Rank> = st
            .status
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Status::Blocked { .. } | Status::Barrier))
            .map(|(r, _)| r)
            .collect();
        if !stuck.is_empty() && st.deadlock.is_none() {
            for &r in &stuck {
                self.wake[r].notify_one();
            }
            st.deadlock = Some(stuck);
        }
    }

    fn make_ready(&self, st: &mut State, rank: Rank) {
        st.status[rank] = Status::Ready;
        st.ready.push(Reverse((OrderedFloat(st.clocks[rank]), rank)));
    }

    /// Parks `rank` until it holds the token. Fails if a deadlock was declared.
    fn wait_turn(&self, st: &mut MutexGuard<'_, State>, rank: Rank) -> Result<()> {
        loop {
            if st.running == Some(rank) {
                return Ok(());
            }
            if let Some(ranks) = &st.deadlock {
                return Err(Error::Deadlock {
                    ranks: ranks.clone(),
                });
            }
            self.wake[rank].wait(st);
        }
    }
}

struct DoneGuard {
    shared: Arc<Shared>,
    rank: Rank,
}

impl Drop for DoneGuard {
    fn drop(&mut self) {
        let mut st = self.shared.state.lock();
        st.status[self.rank] = Status::Done;
        if st.running == Some(self.rank) {
            self.shared.dispatch(&mut st);
        }
    }
}

/// One rank's handle onto a [`SimNetwork`].
pub struct SimEndpoint {
    shared: Arc<Shared>,
    rank: Rank,
}

impl SimEndpoint {
    fn wait_first_turn(&mut self) -> Result<()> {
        let mut st = self.shared.state.lock();
        self.shared.wait_turn(&mut st, self.rank)
    }

    pub fn config(&self) -> &SimConfig {
        &self.shared.config
    }

    fn recv_ready_at(&mut self, src: Rank, tag: Tag, ready_at: Option<f64>) -> Result<Vec<u8>> {
        self.check_peer(src)?;
        let me = self.rank;
        let shared = Arc::clone(&self.shared);
        let mut st = shared.state.lock();
        debug_assert_eq!(st.running, Some(me));
        loop {
            let key = (src, me, tag);
            let popped = match st.mailbox.get_mut(&key) {
                Some(queue) => {
                    let msg = queue.pop_front();
                    if queue.is_empty() {
                        st.mailbox.remove(&key);
                    }
                    msg
                }
                None => None,
            };
            if let Some(msg) = popped {
                let ready = ready_at.unwrap_or(st.clocks[me]);
                let delivered = msg.start.max(ready) + msg.cost;
                st.clocks[me] = st.clocks[me].max(delivered);
                let bytes = msg.payload.len() as u64;
                let c = &mut st.counters[me];
                c.messages_received += 1;
                c.bytes_received += bytes;
                let seq = st.events[me].len() as u64;
                st.events[me].push(Event {
                    rank: me,
                    seq,
                    kind: EventKind::Recv,
                    peer: src,
                    tag,
                    bytes,
                    time: delivered,
                });
                return Ok(msg.payload);
            }
            st.status[me] = Status::Blocked { src, tag };
            shared.dispatch(&mut st);
            shared.wait_turn(&mut st, me)?;
        }
    }
}

impl Transport for SimEndpoint {
    fn rank(&self) -> Rank {
        self.rank
    }

    fn size(&self) -> usize {
        self.shared.size
    }

    fn send(&mut self, dst: Rank, tag: Tag, payload: &[u8]) -> Result<()> {
        self.check_peer(dst)?;
        let me = self.rank;
        let shared = &self.shared;
        let cost = shared.config.network.cost(me, dst, payload.len());
        let mut st = shared.state.lock();
        debug_assert_eq!(st.running, Some(me));

        let now = st.clocks[me];
        let start = if shared.config.channels == 1 {
            st.clocks[me] = now + cost;
            now
        } else {
            let channels = &mut st.channel_free[me];
            let (idx, free) = channels
                .iter()
                .copied()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .expect("at least one channel");
            let start = now.max(free);
            channels[idx] = start + cost;
            st.clocks[me] = start;
            start
        };

        let bytes = payload.len() as u64;
        let c = &mut st.counters[me];
        c.messages_sent += 1;
        c.bytes_sent += bytes;
        let seq = st.events[me].len() as u64;
        st.events[me].push(Event {
            rank: me,
            seq,
            kind: EventKind::Send,
            peer: dst,
            tag,
            bytes,
            time: start,
        });
        st.mailbox
            .entry((me, dst, tag))
            .or_default()
            .push_back(Message {
                payload: payload.to_vec(),
                start,
                cost,
            });
        if st.status[dst] == (Status::Blocked { src: me, tag }) {
            shared.make_ready(&mut st, dst);
        }
        Ok(())
    }

    fn recv(&mut self, src: Rank, tag: Tag) -> Result<Vec<u8>> {
        self.recv_ready_at(src, tag, None)
    }

    fn sendrecv(&mut self, dst: Rank, payload: &[u8], src: Rank, tag: Tag) -> Result<Vec<u8>> {
        let posted = self.shared.state.lock().clocks[self.rank];
        self.send(dst, tag, payload)?;
        self.recv_ready_at(src, tag, Some(posted))
    }

    fn virtual_time(&self) -> Result<f64> {
        Ok(self.shared.state.lock().clocks[self.rank])
    }

    fn charge_reduction(&mut self, bytes: usize) {
        self.advance(self.shared.config.gamma * bytes as f64);
    }

    fn advance(&mut self, seconds: f64) {
        if seconds > 0.0 {
            self.shared.state.lock().clocks[self.rank] += seconds;
        }
    }

    /// Zero-cost synchronization: no messages are exchanged and every
    /// rank's clock is raised to the latest clock in the group.
    fn barrier(&mut self) -> Result<()> {
        let me = self.rank;
        let shared = Arc::clone(&self.shared);
        let mut st = shared.state.lock();
        st.status[me] = Status::Barrier;
        if st.status.iter().all(|s| *s == Status::Barrier) {
            let latest = st.clocks.iter().copied().fold(0.0, f64::max);
            for r in 0..shared.size {
                st.clocks[r] = latest;
                shared.make_ready(&mut st, r);
            }
        }
        shared.dispatch(&mut st);
        shared.wait_turn(&mut st, me)
    }

    fn counters(&self) -> RankCounters {
        self.shared.state.lock().counters[self.rank]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::LinkModel;

    fn net(p: usize, alpha: f64, beta: f64) -> SimNetwork {
        let link = LinkModel::new(alpha, beta).unwrap();
        SimNetwork::new(p, SimConfig::new(NetworkModel::uniform(link))).unwrap()
    }

    #[test]
    fn loopback_delivery() {
        let out = net(2, 1e-6, 1e-9)
            .run(|ep| {
                if ep.rank() == 0 {
                    ep.send(1, 7, &[42u8; 64])?;
                    Ok(Vec::new())
                } else {
                    ep.recv(0, 7)
                }
            })
            .unwrap();
        assert_eq!(out.results[1], vec![42u8; 64]);
        assert_eq!(out.log.total_messages_sent(), 1);
        assert_eq!(out.log.total_bytes_received(), 64);
    }

    #[test]
    fn send_charges_link_cost() {
        let out = net(2, 1e-6, 1e-9)
            .run(|ep| {
                assert_eq!(ep.virtual_time()?, 0.0);
                if ep.rank() == 0 {
                    ep.send(1, 0, &[0u8; 1000])?;
                } else {
                    ep.recv(0, 0)?;
                }
                ep.virtual_time()
            })
            .unwrap();
        assert!((out.results[0] - 2.0e-6).abs() < 1e-18);
        assert!((out.results[1] - 2.0e-6).abs() < 1e-18);
    }

    #[test]
    fn recv_before_send_completes_at_delivery() {
        // rank 0 runs first and blocks in recv before rank 1 sends
        let out = net(2, 1e-6, 0.0)
            .run(|ep| {
                if ep.rank() == 0 {
                    ep.recv(1, 3)?;
                } else {
                    ep.advance(5e-6);
                    ep.send(0, 3, b"x")?;
                }
                ep.virtual_time()
            })
            .unwrap();
        assert!((out.results[0] - 6e-6).abs() < 1e-18);
    }

    #[test]
    fn fifo_per_channel() {
        let out = net(2, 0.0, 0.0)
            .run(|ep| {
                if ep.rank() == 0 {
                    ep.send(1, 1, b"A")?;
                    ep.send(1, 1, b"B")?;
                    Ok(vec![])
                } else {
                    Ok(vec![ep.recv(0, 1)?, ep.recv(0, 1)?])
                }
            })
            .unwrap();
        assert_eq!(out.results[1], vec![b"A".to_vec(), b"B".to_vec()]);
    }

    #[test]
    fn out_of_range_send_is_routing_error() {
        let err = net(2, 0.0, 0.0)
            .run(|ep| ep.send(2, 0, b"x"))
            .unwrap_err();
        assert!(matches!(err, Error::Routing { rank: 2, size: 2 }));
    }

    #[test]
    fn all_blocked_is_deadlock() {
        let err = net(4, 0.0, 0.0)
            .run(|ep| {
                let from = (ep.rank() + 1) % 4;
                ep.recv(from, 0)
            })
            .unwrap_err();
        match err {
            Error::Deadlock { ranks } => assert_eq!(ranks, vec![0, 1, 2, 3]),
            other => panic!("expected deadlock, got {other}"),
        }
    }

    #[test]
    fn waiting_on_finished_rank_is_deadlock() {
        let err = net(2, 0.0, 0.0)
            .run(|ep| {
                if ep.rank() == 1 {
                    ep.recv(0, 9)?;
                }
                Ok(())
            })
            .unwrap_err();
        assert!(matches!(err, Error::Deadlock { ranks } if ranks == vec![1]));
    }

    #[test]
    fn barrier_aligns_clocks() {
        let out = net(3, 0.0, 0.0)
            .run(|ep| {
                ep.advance(ep.rank() as f64);
                ep.barrier()?;
                ep.virtual_time()
            })
            .unwrap();
        assert_eq!(out.results, vec![2.0, 2.0, 2.0]);
        assert_eq!(out.log.total_messages_sent(), 0);
    }

    #[test]
    fn sendrecv_is_full_duplex() {
        let out = net(2, 1e-6, 1e-9)
            .run(|ep| {
                let peer = 1 - ep.rank();
                ep.sendrecv(peer, &[0u8; 1000], peer, 0)?;
                ep.virtual_time()
            })
            .unwrap();
        assert!((out.results[0] - 2e-6).abs() < 1e-18);
        assert!((out.results[1] - 2e-6).abs() < 1e-18);
    }

    #[test]
    fn parallel_channels_overlap_sends() {
        let run = |channels| {
            let cfg = SimConfig::new(NetworkModel::uniform(LinkModel::new(1.0, 0.0).unwrap()))
                .with_channels(channels);
            SimNetwork::new(4, cfg)
                .unwrap()
                .run(|ep| {
                    if ep.rank() == 0 {
                        for dst in 1..4 {
                            ep.send(dst, 0, b"x")?;
                        }
                    } else {
                        ep.recv(0, 0)?;
                    }
                    ep.virtual_time()
                })
                .unwrap()
                .max_time()
        };
        assert_eq!(run(1), 3.0);
        assert_eq!(run(4), 1.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let program = |ep: &mut SimEndpoint| {
            let p = ep.size();
            let me = ep.rank();
            for round in 0..3u32 {
                let dst = (me + 1 + round as usize) % p;
                let src = (me + p - 1 - round as usize % p) % p;
                if dst != me && src != me {
                    ep.sendrecv(dst, &vec![me as u8; 10 * (me + 1)], src, round)?;
                }
            }
            ep.virtual_time()
        };
        let a = net(5, 1e-6, 1e-9).run(program).unwrap();
        let b = net(5, 1e-6, 1e-9).run(program).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.clocks, b.clocks);
        assert_eq!(a.log.total_bytes_sent(), a.log.total_bytes_received());
    }
}

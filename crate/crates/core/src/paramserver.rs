//! Parameter-server pull model: a producer/consumer tensor table, shard
//! placement, and a synchronous training step over a transport.
//!
//! Wire layout. Every protocol message carries a tag whose top byte is the
//! message kind and whose low 24 bits are the FNV-1a hash of the tensor name
//! folded to 24 bits:
//!
//! | kind | meaning                         | payload                   |
//! |------|---------------------------------|---------------------------|
//! | 0x41 | PS asks a worker for a gradient | name bytes                |
//! | 0x42 | worker answers with a gradient  | encoded tensor            |
//! | 0x43 | worker asks a PS for a param    | name bytes (`name#rank`)  |
//! | 0x44 | PS answers with a param         | encoded tensor            |
//!
//! An encoded tensor is `dtype: u8, name_len: u32, name, values` with all
//! integers and values little-endian. Receivers check the embedded name, so a
//! hash collision cannot silently deliver the wrong tensor.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use crate::error::{Error, Result};
use crate::tensor::{DType, Payload, Rank, Tensor};
use crate::transport::{SimConfig, SimNetwork, Tag, Transport};
use crate::wire::{Reader, Writer};

pub const DEFAULT_REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

const KIND_GRAD_REQUEST: u32 = 0x41;
const KIND_GRAD_RESPONSE: u32 = 0x42;
const KIND_PARAM_REQUEST: u32 = 0x43;
const KIND_PARAM_RESPONSE: u32 = 0x44;

fn fnv1a24(name: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in name.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    (h >> 24) ^ (h & 0x00ff_ffff)
}

fn tag_for(kind: u32, name: &str) -> Tag {
    (kind << 24) | fnv1a24(name)
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut w = Writer::default();
    w.u8(t.dtype().code());
    w.str(t.name());
    w.bytes(&t.to_bytes());
    w.finish()
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let dtype = DType::from_code(r.u8()?)?;
    let name = r.string()?;
    Ok(Tensor::new(name, Payload::from_bytes(dtype, r.rest())?))
}

fn decode_named(bytes: &[u8], expected: &str) -> Result<Tensor> {
    let t = decode_tensor(bytes)?;
    if t.name() != expected {
        return Err(Error::Protocol(format!("expected tensor {expected:?}, got {:?}", t.name())));
    }
    Ok(t)
}

/// Identifies a request parked in a [`TensorTable`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ticket(u64);

#[derive(Debug)]
pub enum Request {
    Immediate(Tensor),
    Pending(Ticket),
}

#[derive(Debug, Clone, Copy)]
struct Waiter {
    ticket: Ticket,
    consumer: Rank,
}

#[derive(Debug, Default)]
struct TableState {
    pending_tensors: HashMap<String, Tensor>,
    pending_requests: HashMap<String, VecDeque<Waiter>>,
    delivered: HashMap<Ticket, Tensor>,
    next_ticket: u64,
}

/// Producer/consumer table. `produce` never blocks; requests that arrive
/// before their tensor are parked and served in FIFO order, one per produce.
#[derive(Debug, Default)]
pub struct TensorTable {
    state: Mutex<TableState>,
    served: Condvar,
}

impl TensorTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `t`, or hands it to the oldest waiting request. Returns the
    /// consumer that was served, if any.
    pub fn produce(&self, t: Tensor) -> Result<Option<Rank>> {
        let mut st = self.state.lock();
        let name = t.name().to_string();
        if let Some(queue) = st.pending_requests.get_mut(&name) {
            if let Some(w) = queue.pop_front() {
                if queue.is_empty() {
                    st.pending_requests.remove(&name);
                }
                st.delivered.insert(w.ticket, t);
                drop(st);
                self.served.notify_all();
                return Ok(Some(w.consumer));
            }
        }
        if st.pending_tensors.contains_key(&name) {
            return Err(Error::Protocol(format!("tensor {name:?} produced twice without being consumed")));
        }
        st.pending_tensors.insert(name, t);
        Ok(None)
    }

    pub fn request(&self, name: &str, consumer: Rank) -> Request {
        let mut st = self.state.lock();
        if let Some(t) = st.pending_tensors.remove(name) {
            return Request::Immediate(t);
        }
        let ticket = Ticket(st.next_ticket);
        st.next_ticket += 1;
        st.pending_requests
            .entry(name.to_string())
            .or_default()
            .push_back(Waiter { ticket, consumer });
        Request::Pending(ticket)
    }

    /// Non-blocking check for a parked request.
    pub fn try_take(&self, ticket: Ticket) -> Option<Tensor> {
        self.state.lock().delivered.remove(&ticket)
    }

    /// Blocks until the ticket is served. On timeout the request is withdrawn.
    pub fn wait(&self, ticket: Ticket, timeout: Duration) -> Result<Tensor> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock();
        loop {
            if let Some(t) = st.delivered.remove(&ticket) {
                return Ok(t);
            }
            if self.served.wait_until(&mut st, deadline).timed_out() {
                if let Some(t) = st.delivered.remove(&ticket) {
                    return Ok(t);
                }
                let mut name = None;
                for (n, queue) in st.pending_requests.iter_mut() {
                    if let Some(pos) = queue.iter().position(|w| w.ticket == ticket) {
                        queue.remove(pos);
                        name = Some(n.clone());
                        break;
                    }
                }
                if let Some(n) = &name {
                    if st.pending_requests[n].is_empty() {
                        st.pending_requests.remove(n);
                    }
                }
                return Err(Error::StalledProducer(format!(
                    "no producer for {} within {:.3} s",
                    name.as_deref().unwrap_or("<unknown>"),
                    timeout.as_secs_f64()
                )));
            }
        }
    }

    pub fn request_blocking(&self, name: &str, consumer: Rank, timeout: Duration) -> Result<Tensor> {
        match self.request(name, consumer) {
            Request::Immediate(t) => Ok(t),
            Request::Pending(ticket) => self.wait(ticket, timeout),
        }
    }

    pub fn pending_tensor_count(&self) -> usize {
        self.state.lock().pending_tensors.len()
    }

    pub fn pending_request_count(&self) -> usize {
        self.state.lock().pending_requests.values().map(VecDeque::len).sum()
    }

    /// True when nothing is stored, parked, or awaiting pickup.
    pub fn is_quiescent(&self) -> bool {
        let st = self.state.lock();
        st.pending_tensors.is_empty() && st.pending_requests.is_empty() && st.delivered.is_empty()
    }
}

/// Worker and PS placement. Rank sets may overlap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PsTopology {
    workers: Vec<Rank>,
    ps: Vec<Rank>,
    shard_map: BTreeMap<String, Rank>,
}

impl PsTopology {
    pub fn new(workers: Vec<Rank>, ps: Vec<Rank>, shard_map: BTreeMap<String, Rank>) -> Result<Self> {
        if workers.is_empty() || ps.is_empty() {
            return Err(Error::Parameter("topology needs at least one worker and one PS".into()));
        }
        for (list, what) in [(&workers, "worker"), (&ps, "PS")] {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::Parameter(format!("duplicate {what} rank")));
            }
        }
        if let Some((name, owner)) = shard_map.iter().find(|(_, o)| !ps.contains(o)) {
            return Err(Error::Parameter(format!("tensor {name:?} mapped to non-PS rank {owner}")));
        }
        Ok(Self { workers, ps, shard_map })
    }

    /// Assigns tensors round-robin over `ps` in lexicographic name order.
    pub fn round_robin<S: AsRef<str>>(workers: Vec<Rank>, ps: Vec<Rank>, names: &[S]) -> Result<Self> {
        if ps.is_empty() {
            return Err(Error::Parameter("topology needs at least one PS".into()));
        }
        let mut sorted: Vec<&str> = names.iter().map(AsRef::as_ref).collect();
        sorted.sort_unstable();
        let shard_map = sorted
            .iter()
            .enumerate()
            .map(|(i, n)| (n.to_string(), ps[i % ps.len()]))
            .collect();
        Self::new(workers, ps, shard_map)
    }

    pub fn workers(&self) -> &[Rank] {
        &self.workers
    }

    pub fn ps_ranks(&self) -> &[Rank] {
        &self.ps
    }

    pub fn owner(&self, name: &str) -> Option<Rank> {
        self.shard_map.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.shard_map.keys().map(String::as_str)
    }

    /// Number of ranks the topology spans.
    pub fn span(&self) -> usize {
        self.workers.iter().chain(&self.ps).max().map_or(0, |m| m + 1)
    }

    pub fn is_worker(&self, rank: Rank) -> bool {
        self.workers.contains(&rank)
    }

    pub fn is_ps(&self, rank: Rank) -> bool {
        self.ps.contains(&rank)
    }
}

/// `param - lr * grad`; float32 is computed in f64 and rounded once.
pub fn apply_sgd(param: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
    param.check_compatible(grad)?;
    let payload = match (param.payload(), grad.payload()) {
        (Payload::F32(p), Payload::F32(g)) => {
            Payload::F32(p.iter().zip(g).map(|(&p, &g)| (p as f64 - lr * g as f64) as f32).collect())
        }
        (Payload::F64(p), Payload::F64(g)) => Payload::F64(p.iter().zip(g).map(|(p, g)| p - lr * g).collect()),
        _ => unreachable!("checked compatible"),
    };
    Ok(Tensor::new(param.name(), payload))
}

/// Worker-order left fold, then division by the worker count.
fn mean_of(name: &str, parts: &[Tensor]) -> Result<Tensor> {
    let first = &parts[0];
    for p in &parts[1..] {
        first.check_compatible(p)?;
    }
    let w = parts.len() as f64;
    let payload = match first.dtype() {
        DType::Float32 => {
            let mut acc = first.as_f32().unwrap().to_vec();
            for p in &parts[1..] {
                acc.iter_mut().zip(p.as_f32().unwrap()).for_each(|(a, b)| *a += b);
            }
            Payload::F32(acc.into_iter().map(|x| (x as f64 / w) as f32).collect())
        }
        DType::Float64 => {
            let mut acc = first.as_f64().unwrap().to_vec();
            for p in &parts[1..] {
                acc.iter_mut().zip(p.as_f64().unwrap()).for_each(|(a, b)| *a += b);
            }
            Payload::F64(acc.into_iter().map(|x| x / w).collect())
        }
    };
    Ok(Tensor::new(name, payload))
}

fn stalled(e: Error) -> Error {
    match e {
        Error::Deadlock { ranks } => Error::StalledProducer(format!("ranks {ranks:?} blocked waiting for tensors")),
        Error::Timeout { what, seconds } => Error::StalledProducer(format!("{what} after {seconds:.3} s")),
        other => other,
    }
}

fn take_local(table: &TensorTable, name: &str, consumer: Rank) -> Result<Tensor> {
    table.request_blocking(name, consumer, Duration::ZERO)
}

fn param_key(name: &str, worker: Rank) -> String {
    format!("{name}#{worker}")
}

/// One synchronous PS step from the point of view of `t.rank()`.
///
/// Workers pass their gradients; every rank passes the current parameters
/// (a PS reads only the shards it owns). Workers get the updated parameters
/// in name order; PS-only ranks get `None`. `table` is this rank's table and
/// is left empty on success.
pub fn ps_training_step<T: Transport + ?Sized>(
    topo: &PsTopology,
    table: &TensorTable,
    grads: Option<&[Tensor]>,
    params: &[Tensor],
    lr: f64,
    t: &mut T,
) -> Result<Option<Vec<Tensor>>> {
    ps_step_inner(topo, table, grads, params, lr, t).map_err(stalled)
}

fn ps_step_inner<T: Transport + ?Sized>(
    topo: &PsTopology,
    table: &TensorTable,
    grads: Option<&[Tensor]>,
    params: &[Tensor],
    lr: f64,
    t: &mut T,
) -> Result<Option<Vec<Tensor>>> {
    let me = t.rank();
    if topo.span() > t.size() {
        return Err(Error::Parameter(format!(
            "topology spans {} ranks but the group has {}",
            topo.span(),
            t.size()
        )));
    }
    let worker = topo.is_worker(me);
    let names: Vec<&str> = topo.names().collect();
    let params: HashMap<&str, &Tensor> = params.iter().map(|p| (p.name(), p)).collect();
    let owned: Vec<&str> = names.iter().copied().filter(|n| topo.owner(n) == Some(me)).collect();

    if worker {
        let grads = grads.ok_or_else(|| Error::Parameter(format!("worker {me} has no gradients")))?;
        if grads.len() != names.len() {
            return Err(Error::Shape(format!(
                "worker {me} has {} gradients, topology lists {}",
                grads.len(),
                names.len()
            )));
        }
        for g in grads {
            if topo.owner(g.name()).is_none() {
                return Err(Error::Shape(format!("gradient {:?} is not in the shard map", g.name())));
            }
            table.produce(g.clone())?;
        }
    }

    for name in &owned {
        for &w in topo.workers() {
            if w != me {
                t.send(w, tag_for(KIND_GRAD_REQUEST, name), name.as_bytes())?;
            }
        }
    }
    if worker {
        for name in &names {
            let owner = topo.owner(name).unwrap();
            if owner != me {
                let key = param_key(name, me);
                t.send(owner, tag_for(KIND_PARAM_REQUEST, &key), key.as_bytes())?;
            }
        }
        for name in &names {
            let owner = topo.owner(name).unwrap();
            if owner == me {
                continue;
            }
            let req = t.recv(owner, tag_for(KIND_GRAD_REQUEST, name))?;
            if req != name.as_bytes() {
                return Err(Error::Protocol(format!("unexpected gradient request from rank {owner}")));
            }
            let g = take_local(table, name, owner)?;
            t.send(owner, tag_for(KIND_GRAD_RESPONSE, name), &encode_tensor(&g))?;
        }
    }

    let mut updated = Vec::with_capacity(owned.len());
    for name in &owned {
        let mut parts = Vec::with_capacity(topo.workers().len());
        for &w in topo.workers() {
            let g = if w == me {
                take_local(table, name, me)?
            } else {
                decode_named(&t.recv(w, tag_for(KIND_GRAD_RESPONSE, name))?, name)?
            };
            parts.push(g);
        }
        let mean = mean_of(name, &parts)?;
        let current = params
            .get(name)
            .ok_or_else(|| Error::Parameter(format!("PS {me} has no parameter {name:?}")))?;
        updated.push(apply_sgd(current, &mean, lr)?);
    }

    // Register every worker's pull before producing, so updates are served
    // from the waiting side of the table.
    let mut tickets = Vec::new();
    let mut local: HashMap<String, Ticket> = HashMap::new();
    for name in &owned {
        for &w in topo.workers() {
            let key = param_key(name, w);
            if w != me {
                let req = t.recv(w, tag_for(KIND_PARAM_REQUEST, &key))?;
                if req != key.as_bytes() {
                    return Err(Error::Protocol(format!("unexpected parameter request from rank {w}")));
                }
            }
            match table.request(&key, w) {
                Request::Pending(ticket) if w == me => {
                    local.insert(key, ticket);
                }
                Request::Pending(ticket) => tickets.push((w, key, ticket)),
                Request::Immediate(_) => {
                    return Err(Error::Invariant(format!("{key} produced before its update")));
                }
            }
        }
    }
    for param in &updated {
        for &w in topo.workers() {
            let mut copy = param.clone();
            copy.set_name(param_key(param.name(), w));
            table.produce(copy)?;
        }
    }
    for (w, key, ticket) in tickets {
        let p = table
            .try_take(ticket)
            .ok_or_else(|| Error::Invariant(format!("{key} not served after produce")))?;
        t.send(w, tag_for(KIND_PARAM_RESPONSE, &key), &encode_tensor(&p))?;
    }

    if !worker {
        return Ok(None);
    }
    let mut out = Vec::with_capacity(names.len());
    for name in &names {
        let owner = topo.owner(name).unwrap();
        let key = param_key(name, me);
        let mut p = if owner == me {
            let ticket = local[&key];
            table
                .try_take(ticket)
                .ok_or_else(|| Error::Invariant(format!("{key} not served after produce")))?
        } else {
            decode_named(&t.recv(owner, tag_for(KIND_PARAM_RESPONSE, &key))?, &key)?
        };
        p.set_name(*name);
        out.push(p);
    }
    Ok(Some(out))
}

/// Runs one PS step for every rank inside a simulated network. `grads[i]`
/// belongs to `topo.workers()[i]`. Returns the workers' updated params in
/// worker order.
pub fn simulate_ps_step(
    topo: &PsTopology,
    grads: &[Vec<Tensor>],
    params: &[Tensor],
    lr: f64,
    config: SimConfig,
) -> Result<Vec<Vec<Tensor>>> {
    if grads.len() != topo.workers().len() {
        return Err(Error::Parameter(format!(
            "{} gradient sets for {} workers",
            grads.len(),
            topo.workers().len()
        )));
    }
    let net = SimNetwork::new(topo.span(), config)?;
    let out = net.run(|ep| {
        let me = ep.rank();
        let table = TensorTable::new();
        let mine = topo.workers().iter().position(|&w| w == me).map(|i| grads[i].as_slice());
        let res = ps_training_step(topo, &table, mine, params, lr, ep)?;
        if !table.is_quiescent() {
            return Err(Error::Invariant(format!("rank {me} table not empty after step")));
        }
        Ok(res)
    })?;
    Ok(topo
        .workers()
        .iter()
        .map(|&w| out.results[w].clone().expect("workers return params"))
        .collect())
}

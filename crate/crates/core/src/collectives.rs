//! Allreduce algorithms.
//!
//! All of them are "reduce then distribute" schedules over a [`Transport`]:
//!
//! - `flat`: gather to rank 0, reduce in rank order, broadcast.
//! - `ring_rsa`: ring reduce-scatter followed by ring allgather, `p - 1`
//!   steps each. Rank `r` finishes the reduce-scatter owning chunk `r`.
//! - `rhd_rsa`: recursive vector halving reduce-scatter with partner
//!   `rank ^ 2^k`, then recursive doubling allgather in reverse. The lower
//!   rank of each pair keeps the lower half. When `p` is not a power of two
//!   the first `2r` ranks (`r = p - 2^floor(log2 p)`) are folded pairwise
//!   before the main phase and receive the result afterwards.
//!
//! Every element of the result is computed by exactly one rank and then
//! copied, so all ranks return bit-identical tensors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{chunk_partition, reduce_into, Chunk, Element, Payload, Rank, ReduceOp, Tensor};
use crate::transport::{Tag, Transport};

/// Message size below which `auto` picks `rhd_rsa`.
pub const DEFAULT_SWITCH_BYTES: usize = 128 * 1024;

const TAG_FLAT_GATHER: Tag = 0x0001_0000;
const TAG_FLAT_BCAST: Tag = 0x0001_0001;
const TAG_RING_RS: Tag = 0x0001_0010;
const TAG_RING_AG: Tag = 0x0001_0011;
const TAG_RHD_FOLD: Tag = 0x0001_0020;
const TAG_RHD_RS: Tag = 0x0001_0021;
const TAG_RHD_AG: Tag = 0x0001_0022;
const TAG_RHD_UNFOLD: Tag = 0x0001_0023;
const TAG_GATHER_BYTES: Tag = 0x0002_0000;
const TAG_BCAST_BYTES: Tag = 0x0002_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmId {
    Flat,
    #[serde(alias = "ring")]
    RingRsa,
    #[serde(alias = "rhd")]
    RhdRsa,
    #[default]
    Auto,
}

impl AlgorithmId {
    /// The concrete algorithm used for a message of `bytes` bytes.
    pub fn resolve(self, bytes: usize, switch_bytes: usize) -> AlgorithmId {
        match self {
            AlgorithmId::Auto if bytes < switch_bytes => AlgorithmId::RhdRsa,
            AlgorithmId::Auto => AlgorithmId::RingRsa,
            concrete => concrete,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AlgorithmId::Flat => "flat",
            AlgorithmId::RingRsa => "ring_rsa",
            AlgorithmId::RhdRsa => "rhd_rsa",
            AlgorithmId::Auto => "auto",
        }
    }
}

impl fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AlgorithmId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(AlgorithmId::Flat),
            "ring" | "ring_rsa" => Ok(AlgorithmId::RingRsa),
            "rhd" | "rhd_rsa" => Ok(AlgorithmId::RhdRsa),
            "auto" => Ok(AlgorithmId::Auto),
            other => Err(Error::Parameter(format!("unknown algorithm {other:?}"))),
        }
    }
}

/// What one rank did during one allreduce call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveStats {
    /// Concrete algorithm that ran.
    pub algorithm: AlgorithmId,
    /// Communication steps this rank took part in.
    pub rounds: u64,
    pub messages_per_rank: u64,
    pub bytes_sent_per_rank: u64,
}

pub fn allreduce_flat<T: Transport + ?Sized>(
    tensor: Tensor,
    op: ReduceOp,
    transport: &mut T,
) -> Result<(Tensor, CollectiveStats)> {
    run_concrete(tensor, op, transport, AlgorithmId::Flat)
}

pub fn allreduce_ring<T: Transport + ?Sized>(
    tensor: Tensor,
    op: ReduceOp,
    transport: &mut T,
) -> Result<(Tensor, CollectiveStats)> {
    run_concrete(tensor, op, transport, AlgorithmId::RingRsa)
}

pub fn allreduce_rhd<T: Transport + ?Sized>(
    tensor: Tensor,
    op: ReduceOp,
    transport: &mut T,
) -> Result<(Tensor, CollectiveStats)> {
    run_concrete(tensor, op, transport, AlgorithmId::RhdRsa)
}

/// Allreduce with algorithm selection. `Auto` runs `rhd_rsa` for messages
/// smaller than `switch_bytes` and `ring_rsa` otherwise.
pub fn allreduce<T: Transport + ?Sized>(
    tensor: Tensor,
    op: ReduceOp,
    transport: &mut T,
    algo: AlgorithmId,
    switch_bytes: usize,
) -> Result<(Tensor, CollectiveStats)> {
    if algo == AlgorithmId::Auto && switch_bytes == 0 {
        return Err(Error::Parameter("auto selection needs switch_bytes > 0".into()));
    }
    let concrete = algo.resolve(tensor.byte_len(), switch_bytes);
    run_concrete(tensor, op, transport, concrete)
}

fn run_concrete<T: Transport + ?Sized>(
    mut tensor: Tensor,
    op: ReduceOp,
    transport: &mut T,
    algo: AlgorithmId,
) -> Result<(Tensor, CollectiveStats)> {
    let before = transport.counters();
    let rounds = match tensor.payload_mut() {
        Payload::F32(data) => dispatch(data, op, transport, algo)?,
        Payload::F64(data) => dispatch(data, op, transport, algo)?,
    };
    let delta = transport.counters().since(&before);
    Ok((
        tensor,
        CollectiveStats {
            algorithm: algo,
            rounds,
            messages_per_rank: delta.messages_sent,
            bytes_sent_per_rank: delta.bytes_sent,
        },
    ))
}

fn dispatch<E: Element, T: Transport + ?Sized>(
    data: &mut [E],
    op: ReduceOp,
    t: &mut T,
    algo: AlgorithmId,
) -> Result<u64> {
    match algo {
        AlgorithmId::Flat => flat(data, op, t),
        AlgorithmId::RingRsa => ring(data, op, t),
        AlgorithmId::RhdRsa => rhd(data, op, t),
        AlgorithmId::Auto => unreachable!("auto is resolved before dispatch"),
    }
}

fn decode_exact<E: Element>(bytes: &[u8], expected: usize, from: Rank) -> Result<Vec<E>> {
    let values = E::decode(bytes)?;
    if values.len() != expected {
        return Err(Error::Shape(format!(
            "rank {from} contributed {} elements where {expected} were expected; \
             all ranks must pass tensors of equal length",
            values.len()
        )));
    }
    Ok(values)
}

fn reduce_incoming<E: Element, T: Transport + ?Sized>(
    t: &mut T,
    acc: &mut [E],
    bytes: &[u8],
    from: Rank,
    op: ReduceOp,
) -> Result<()> {
    let incoming = decode_exact::<E>(bytes, acc.len(), from)?;
    reduce_into(acc, &incoming, op)?;
    t.charge_reduction(bytes.len());
    Ok(())
}

fn overwrite<E: Element>(dst: &mut [E], bytes: &[u8], from: Rank) -> Result<()> {
    let incoming = decode_exact::<E>(bytes, dst.len(), from)?;
    dst.copy_from_slice(&incoming);
    Ok(())
}

fn flat<E: Element, T: Transport + ?Sized>(data: &mut [E], op: ReduceOp, t: &mut T) -> Result<u64> {
    let p = t.size();
    if p == 1 {
        return Ok(0);
    }
    if t.rank() == 0 {
        for src in 1..p {
            let bytes = t.recv(src, TAG_FLAT_GATHER)?;
            reduce_incoming(t, data, &bytes, src, op)?;
        }
        let result = E::encode(data);
        for dst in 1..p {
            t.send(dst, TAG_FLAT_BCAST, &result)?;
        }
        Ok(2 * (p as u64 - 1))
    } else {
        t.send(0, TAG_FLAT_GATHER, &E::encode(data))?;
        let bytes = t.recv(0, TAG_FLAT_BCAST)?;
        overwrite(data, &bytes, 0)?;
        Ok(2)
    }
}

fn ring<E: Element, T: Transport + ?Sized>(data: &mut [E], op: ReduceOp, t: &mut T) -> Result<u64> {
    let p = t.size();
    if p == 1 {
        return Ok(0);
    }
    let me = t.rank();
    let chunks = chunk_partition(data.len(), p)?;
    let left = (me + p - 1) % p;
    let right = (me + 1) % p;

    // reduce-scatter: the partial for chunk c travels leftwards and ends at rank c
    for step in 0..p - 1 {
        let send_c = chunks[(me + 1 + step) % p];
        let recv_c = chunks[(me + 2 + step) % p];
        let out = E::encode(&data[send_c.range()]);
        let bytes = t.sendrecv(left, &out, right, TAG_RING_RS)?;
        reduce_incoming(t, &mut data[recv_c.range()], &bytes, right, op)?;
    }

    for step in 0..p - 1 {
        let send_c = chunks[(me + step) % p];
        let recv_c = chunks[(me + 1 + step) % p];
        let out = E::encode(&data[send_c.range()]);
        let bytes = t.sendrecv(left, &out, right, TAG_RING_AG)?;
        overwrite(&mut data[recv_c.range()], &bytes, right)?;
    }
    Ok(2 * (p as u64 - 1))
}

/// Element range covered by blocks `lo..hi`.
fn block_span(blocks: &[Chunk], lo: usize, hi: usize) -> std::ops::Range<usize> {
    debug_assert!(lo < hi);
    let last = blocks[hi - 1];
    blocks[lo].offset..last.offset + last.len
}

fn rhd<E: Element, T: Transport + ?Sized>(data: &mut [E], op: ReduceOp, t: &mut T) -> Result<u64> {
    let p = t.size();
    if p == 1 {
        return Ok(0);
    }
    let me = t.rank();
    let pof2 = 1usize << (usize::BITS - 1 - p.leading_zeros());
    let excess = p - pof2;
    let mut rounds = 0;

    let vrank = if me < 2 * excess {
        rounds += 1;
        if me % 2 == 1 {
            t.send(me - 1, TAG_RHD_FOLD, &E::encode(data))?;
            None
        } else {
            let bytes = t.recv(me + 1, TAG_RHD_FOLD)?;
            reduce_incoming(t, data, &bytes, me + 1, op)?;
            Some(me / 2)
        }
    } else {
        Some(me - excess)
    };
    let real = |v: usize| if v < excess { 2 * v } else { v + excess };

    if let Some(v) = vrank {
        let blocks = chunk_partition(data.len(), pof2)?;
        let (mut lo, mut hi) = (0, pof2);
        let mut history = Vec::new();
        let mut mask = 1;
        while mask < pof2 {
            let pv = v ^ mask;
            let partner = real(pv);
            let mid = (lo + hi) / 2;
            let (keep, give) = if v < pv {
                ((lo, mid), (mid, hi))
            } else {
                ((mid, hi), (lo, mid))
            };
            let out = E::encode(&data[block_span(&blocks, give.0, give.1)]);
            let bytes = t.sendrecv(partner, &out, partner, TAG_RHD_RS)?;
            let kept = block_span(&blocks, keep.0, keep.1);
            reduce_incoming(t, &mut data[kept], &bytes, partner, op)?;
            history.push((lo, hi));
            (lo, hi) = keep;
            mask <<= 1;
            rounds += 1;
        }
        while let Some((parent_lo, parent_hi)) = history.pop() {
            mask >>= 1;
            let partner = real(v ^ mask);
            let theirs = if lo == parent_lo {
                (hi, parent_hi)
            } else {
                (parent_lo, lo)
            };
            let out = E::encode(&data[block_span(&blocks, lo, hi)]);
            let bytes = t.sendrecv(partner, &out, partner, TAG_RHD_AG)?;
            overwrite(&mut data[block_span(&blocks, theirs.0, theirs.1)], &bytes, partner)?;
            (lo, hi) = (parent_lo, parent_hi);
            rounds += 1;
        }
    }

    if me < 2 * excess {
        rounds += 1;
        if me % 2 == 0 {
            t.send(me + 1, TAG_RHD_UNFOLD, &E::encode(data))?;
        } else {
            let bytes = t.recv(me - 1, TAG_RHD_UNFOLD)?;
            overwrite(data, &bytes, me - 1)?;
        }
    }
    Ok(rounds)
}

/// Collects one byte string per rank at rank 0 (rank order). Other ranks get
/// `None`.
pub(crate) fn gather_to_root<T: Transport + ?Sized>(
    t: &mut T,
    payload: Vec<u8>,
) -> Result<Option<Vec<Vec<u8>>>> {
    if t.rank() != 0 {
        t.send(0, TAG_GATHER_BYTES, &payload)?;
        return Ok(None);
    }
    let mut all = Vec::with_capacity(t.size());
    all.push(payload);
    for src in 1..t.size() {
        all.push(t.recv(src, TAG_GATHER_BYTES)?);
    }
    Ok(Some(all))
}

/// Distributes rank 0's `payload` to every rank.
pub(crate) fn broadcast_from_root<T: Transport + ?Sized>(
    t: &mut T,
    payload: Option<Vec<u8>>,
) -> Result<Vec<u8>> {
    if t.rank() == 0 {
        let payload = payload.ok_or_else(|| Error::Protocol("root has nothing to broadcast".into()))?;
        for dst in 1..t.size() {
            t.send(dst, TAG_BCAST_BYTES, &payload)?;
        }
        Ok(payload)
    } else {
        t.recv(0, TAG_BCAST_BYTES)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DType;
    use crate::transport::{LinkModel, NetworkModel, SimConfig, SimNetwork};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const ALGOS: [AlgorithmId; 3] = [AlgorithmId::Flat, AlgorithmId::RingRsa, AlgorithmId::RhdRsa];

    fn sim(p: usize) -> SimNetwork {
        SimNetwork::new(p, SimConfig::new(NetworkModel::uniform(LinkModel::new(1e-6, 1e-9).unwrap())))
            .unwrap()
    }

    fn inputs(p: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..p)
            .map(|_| (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect()
    }

    // brute force: fold the gathered inputs in rank order
    fn oracle(rows: &[Vec<f64>], op: ReduceOp) -> Vec<f64> {
        let mut acc = rows[0].clone();
        for row in &rows[1..] {
            for (a, b) in acc.iter_mut().zip(row) {
                *a = match op {
                    ReduceOp::Sum => *a + b,
                    ReduceOp::Max => a.max(*b),
                };
            }
        }
        acc
    }

    fn run_f64(
        p: usize,
        rows: &[Vec<f64>],
        op: ReduceOp,
        algo: AlgorithmId,
    ) -> (Vec<Vec<f64>>, Vec<CollectiveStats>) {
        let out = sim(p)
            .run(|ep| {
                let t = Tensor::from_f64("x", rows[ep.rank()].clone());
                let (r, stats) = allreduce(t, op, ep, algo, DEFAULT_SWITCH_BYTES)?;
                Ok((r.as_f64().unwrap().to_vec(), stats))
            })
            .unwrap();
        out.results.into_iter().unzip()
    }

    fn assert_close(got: &[f64], want: &[f64], rel: f64) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= rel * w.abs().max(f64::MIN_POSITIVE), "{g} vs {w}");
        }
    }

    #[test]
    fn single_rank_is_identity() {
        for algo in ALGOS {
            let rows = inputs(1, 5, 3);
            let (res, stats) = run_f64(1, &rows, ReduceOp::Sum, algo);
            assert_eq!(res[0], rows[0]);
            assert_eq!(stats[0].messages_per_rank, 0);
        }
    }

    #[test]
    fn constant_rows_sum() {
        for algo in ALGOS {
            let rows: Vec<Vec<f64>> = (0..4).map(|r| vec![r as f64; 4]).collect();
            let (res, stats) = run_f64(4, &rows, ReduceOp::Sum, algo);
            for r in &res {
                assert_eq!(r, &vec![6.0; 4]);
            }
            let expected = match algo {
                AlgorithmId::RingRsa => 6,
                AlgorithmId::RhdRsa => 4,
                _ => continue,
            };
            assert!(stats.iter().all(|s| s.messages_per_rank == expected));
        }
    }

    #[test]
    fn ring_two_ranks() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![10.0, 20.0, 30.0]];
        let (res, _) = run_f64(2, &rows, ReduceOp::Sum, AlgorithmId::RingRsa);
        assert_eq!(res[0], vec![11.0, 22.0, 33.0]);
        assert_eq!(res[1], vec![11.0, 22.0, 33.0]);
    }

    #[test]
    fn degenerate_chunks_still_traverse() {
        let rows = inputs(5, 3, 11);
        let (res, stats) = run_f64(5, &rows, ReduceOp::Sum, AlgorithmId::RingRsa);
        let want = oracle(&rows, ReduceOp::Sum);
        for r in &res {
            assert_close(r, &want, 1e-12);
        }
        assert!(stats.iter().all(|s| s.messages_per_rank == 8));
    }

    #[test]
    fn flat_matches_oracle_exactly() {
        let rows = inputs(3, 17, 5);
        let (res, _) = run_f64(3, &rows, ReduceOp::Sum, AlgorithmId::Flat);
        let want = oracle(&rows, ReduceOp::Sum);
        for r in &res {
            assert_eq!(r, &want);
        }
    }

    #[test]
    fn rhd_power_of_two() {
        let rows = inputs(8, 64, 21);
        let (res, stats) = run_f64(8, &rows, ReduceOp::Sum, AlgorithmId::RhdRsa);
        let want = oracle(&rows, ReduceOp::Sum);
        for r in &res {
            assert_close(r, &want, 1e-12);
            assert_eq!(r, &res[0]);
        }
        assert!(stats.iter().all(|s| s.messages_per_rank == 6));
    }

    #[test]
    fn rhd_folds_non_power_of_two() {
        let rows = inputs(3, 8, 8);
        let (res, stats) = run_f64(3, &rows, ReduceOp::Sum, AlgorithmId::RhdRsa);
        let want = oracle(&rows, ReduceOp::Sum);
        for r in &res {
            assert_close(r, &want, 1e-12);
        }
        for s in &stats {
            assert!(s.messages_per_rank <= 2 * 2 + 2);
        }
        // the folded rank sends once and receives once
        assert_eq!(stats[1].messages_per_rank, 1);
    }

    #[test]
    fn max_is_exact_everywhere() {
        for p in 1..=7 {
            let rows = inputs(p, 13, p as u64);
            let want = oracle(&rows, ReduceOp::Max);
            for algo in ALGOS {
                let (res, _) = run_f64(p, &rows, ReduceOp::Max, algo);
                for r in &res {
                    assert_eq!(r, &want);
                }
            }
        }
    }

    #[test]
    fn float32_within_tolerance() {
        let p = 6;
        let rows = inputs(p, 33, 77);
        let want = oracle(&rows, ReduceOp::Sum);
        for algo in ALGOS {
            let out = sim(p)
                .run(|ep| {
                    let v: Vec<f32> = rows[ep.rank()].iter().map(|&x| x as f32).collect();
                    let (r, _) = allreduce(Tensor::from_f32("x", v), ReduceOp::Sum, ep, algo, 1)?;
                    Ok(r.to_f64_vec())
                })
                .unwrap();
            for r in &out.results {
                assert_close(r, &want, 1e-5);
            }
        }
    }

    #[test]
    fn auto_dispatch_by_size() {
        assert_eq!(AlgorithmId::Auto.resolve(1024, DEFAULT_SWITCH_BYTES), AlgorithmId::RhdRsa);
        assert_eq!(AlgorithmId::Auto.resolve(1 << 20, DEFAULT_SWITCH_BYTES), AlgorithmId::RingRsa);
        assert_eq!(AlgorithmId::Flat.resolve(1, 1 << 30), AlgorithmId::Flat);

        let out = sim(4)
            .run(|ep| {
                let small = Tensor::zeros("s", DType::Float32, 256);
                let big = Tensor::zeros("b", DType::Float32, 1 << 18);
                let (_, a) = allreduce(small, ReduceOp::Sum, ep, AlgorithmId::Auto, DEFAULT_SWITCH_BYTES)?;
                let (_, b) = allreduce(big, ReduceOp::Sum, ep, AlgorithmId::Auto, DEFAULT_SWITCH_BYTES)?;
                Ok((a.algorithm, b.algorithm))
            })
            .unwrap();
        assert_eq!(out.results[0], (AlgorithmId::RhdRsa, AlgorithmId::RingRsa));
    }

    #[test]
    fn auto_needs_switch() {
        let err = sim(1)
            .run(|ep| allreduce(Tensor::zeros("x", DType::Float64, 1), ReduceOp::Sum, ep, AlgorithmId::Auto, 0))
            .unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }

    #[test]
    fn flat_and_ring_agree() {
        let rows = inputs(4, 40, 99);
        let (flat, _) = run_f64(4, &rows, ReduceOp::Sum, AlgorithmId::Flat);
        let (ring, _) = run_f64(4, &rows, ReduceOp::Sum, AlgorithmId::RingRsa);
        assert_close(&ring[0], &flat[0], 1e-12);
    }

    #[test]
    fn mismatched_lengths_are_shape_errors() {
        for algo in ALGOS {
            let err = sim(3)
                .run(|ep| {
                    let n = if ep.rank() == 1 { 7 } else { 9 };
                    allreduce(Tensor::zeros("x", DType::Float64, n), ReduceOp::Sum, ep, algo, 1)
                })
                .unwrap_err();
            assert!(matches!(err, Error::Shape(_)), "{algo}: {err}");
        }
    }

    #[test]
    fn gather_and_broadcast() {
        let out = sim(3)
            .run(|ep| {
                let gathered = gather_to_root(ep, vec![ep.rank() as u8])?;
                let payload = gathered.map(|g| g.concat());
                broadcast_from_root(ep, payload)
            })
            .unwrap();
        assert!(out.results.iter().all(|r| r == &vec![0, 1, 2]));
    }

    #[test]
    fn algorithm_names_roundtrip() {
        for algo in [AlgorithmId::Flat, AlgorithmId::RingRsa, AlgorithmId::RhdRsa, AlgorithmId::Auto] {
            assert_eq!(algo.as_str().parse::<AlgorithmId>().unwrap(), algo);
        }
        assert!("bogus".parse::<AlgorithmId>().is_err());
    }
}

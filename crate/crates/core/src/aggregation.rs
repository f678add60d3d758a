//! Data-parallel gradient aggregation: readiness negotiation, tensor fusion,
//! one allreduce per fused buffer, then averaging.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use crate::collectives::{allreduce, broadcast_from_root, gather_to_root, AlgorithmId, CollectiveStats, DEFAULT_SWITCH_BYTES};
use crate::error::{Error, Result};
use crate::registry::{BufferKind, BufferRegistry};
use crate::tensor::{Chunk, DType, Payload, ReduceOp, Tensor};
use crate::transport::Transport;
use crate::wire::{Reader, Writer};

/// Default fusion threshold (64 MiB). Worth tuning per platform.
pub const DEFAULT_FUSION_THRESHOLD: u64 = 64 * 1024 * 1024;

/// Gradients of one iteration, with unique names.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub iteration: u64,
    tensors: Vec<Tensor>,
}

impl GradientSet {
    pub fn new(iteration: u64, tensors: Vec<Tensor>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &tensors {
            if !seen.insert(t.name()) {
                return Err(Error::Parameter(format!("duplicate tensor name {:?}", t.name())));
            }
        }
        Ok(Self { iteration, tensors })
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name() == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.tensors.iter().map(Tensor::byte_len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    pub threshold_bytes: u64,
}

impl FusionConfig {
    pub fn new(threshold_bytes: u64) -> Result<Self> {
        if threshold_bytes == 0 {
            return Err(Error::Parameter("fusion threshold must be positive".into()));
        }
        Ok(Self { threshold_bytes })
    }
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            threshold_bytes: DEFAULT_FUSION_THRESHOLD,
        }
    }
}

/// Several same-dtype tensors packed back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBuffer {
    names: Vec<String>,
    layout: Vec<Chunk>,
    buffer: Tensor,
}

impl FusedBuffer {
    fn pack(members: &[&Tensor]) -> Self {
        let dtype = members[0].dtype();
        let total: usize = members.iter().map(|t| t.len()).sum();
        let mut payload = match dtype {
            DType::Float32 => Payload::F32(Vec::with_capacity(total)),
            DType::Float64 => Payload::F64(Vec::with_capacity(total)),
        };
        let mut layout = Vec::with_capacity(members.len());
        let mut offset = 0;
        for t in members {
            match (&mut payload, t.payload()) {
                (Payload::F32(dst), Payload::F32(src)) => dst.extend_from_slice(src),
                (Payload::F64(dst), Payload::F64(src)) => dst.extend_from_slice(src),
                _ => unreachable!("fuse never mixes dtypes"),
            }
            layout.push(Chunk { offset, len: t.len() });
            offset += t.len();
        }
        let names: Vec<String> = members.iter().map(|t| t.name().to_string()).collect();
        let label = format!("fused[{}..{}]", names[0], names[names.len() - 1]);
        Self {
            names,
            layout,
            buffer: Tensor::new(label, payload),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn layout(&self) -> &[Chunk] {
        &self.layout
    }

    pub fn buffer(&self) -> &Tensor {
        &self.buffer
    }

    pub fn byte_len(&self) -> usize {
        self.buffer.byte_len()
    }

    pub fn unpack(&self) -> Vec<Tensor> {
        self.unpack_from(&self.buffer).expect("own buffer matches layout")
    }

    /// Splits `packed` (same layout as this buffer) back into member tensors.
    pub fn unpack_from(&self, packed: &Tensor) -> Result<Vec<Tensor>> {
        packed.check_compatible(&self.buffer)?;
        Ok(self
            .names
            .iter()
            .zip(&self.layout)
            .map(|(name, chunk)| {
                let payload = match packed.payload() {
                    Payload::F32(v) => Payload::F32(v[chunk.range()].to_vec()),
                    Payload::F64(v) => Payload::F64(v[chunk.range()].to_vec()),
                };
                Tensor::new(name.clone(), payload)
            })
            .collect())
    }
}

/// Greedy first-fit packing in the given order. A group is closed when the
/// next tensor would push it past the threshold or has a different dtype;
/// a tensor at or above the threshold travels alone.
pub fn fuse(ready: &[Tensor], cfg: &FusionConfig) -> Vec<FusedBuffer> {
    let mut out = Vec::new();
    let mut group: Vec<&Tensor> = Vec::new();
    let mut group_bytes = 0u64;
    for t in ready {
        let bytes = t.byte_len() as u64;
        let fits = group_bytes + bytes <= cfg.threshold_bytes;
        let same_dtype = group.first().is_none_or(|g| g.dtype() == t.dtype());
        if !group.is_empty() && !(fits && same_dtype) {
            out.push(FusedBuffer::pack(&group));
            group.clear();
            group_bytes = 0;
        }
        group.push(t);
        group_bytes += bytes;
    }
    if !group.is_empty() {
        out.push(FusedBuffer::pack(&group));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ReadyEntry {
    name: String,
    schema: Option<(DType, u64)>,
}

fn encode_entries(entries: &[ReadyEntry]) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(entries.len() as u32);
    for e in entries {
        w.str(&e.name);
        match e.schema {
            Some((dtype, len)) => {
                w.u8(1);
                w.u8(dtype.code());
                w.u64(len);
            }
            None => w.u8(0),
        }
    }
    w.finish()
}

fn decode_entries(bytes: &[u8]) -> Result<Vec<ReadyEntry>> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let schema = match r.u8()? {
            0 => None,
            _ => Some((DType::from_code(r.u8()?)?, r.u64()?)),
        };
        entries.push(ReadyEntry { name, schema });
    }
    r.expect_end()?;
    Ok(entries)
}

/// Rank 0 intersects everybody's ready set; with `strict` any difference
/// between ranks is a schema error.
fn resolve_ready(per_rank: Vec<Vec<ReadyEntry>>, strict: bool) -> std::result::Result<Vec<String>, String> {
    let mut common: Option<BTreeMap<String, Option<(DType, u64)>>> = None;
    for (rank, entries) in per_rank.iter().enumerate() {
        let mine: BTreeMap<String, Option<(DType, u64)>> =
            entries.iter().map(|e| (e.name.clone(), e.schema)).collect();
        common = Some(match common {
            None => mine,
            Some(prev) => {
                if strict && prev.len() != mine.len() {
                    return Err(format!("rank {rank} reports {} tensors, rank 0 reports {}", mine.len(), prev.len()));
                }
                let mut kept = BTreeMap::new();
                for (name, schema) in prev {
                    match mine.get(&name) {
                        Some(other) if *other != schema => {
                            return Err(format!("tensor {name:?} has schema {schema:?} on rank 0 but {other:?} on rank {rank}"));
                        }
                        Some(_) => {
                            kept.insert(name, schema);
                        }
                        None if strict => return Err(format!("tensor {name:?} is missing on rank {rank}")),
                        None => {}
                    }
                }
                kept
            }
        });
    }
    Ok(common.unwrap_or_default().into_keys().collect())
}

fn negotiate<T: Transport + ?Sized>(entries: Vec<ReadyEntry>, t: &mut T, strict: bool) -> Result<Vec<String>> {
    let gathered = gather_to_root(t, encode_entries(&entries))?;
    let answer = match gathered {
        Some(all) => {
            let per_rank = all.iter().map(|b| decode_entries(b)).collect::<Result<Vec<_>>>()?;
            let mut w = Writer::default();
            match resolve_ready(per_rank, strict) {
                Ok(names) => {
                    w.u8(0);
                    w.u32(names.len() as u32);
                    for n in &names {
                        w.str(n);
                    }
                }
                Err(msg) => {
                    w.u8(1);
                    w.str(&msg);
                }
            }
            Some(w.finish())
        }
        None => None,
    };
    let bytes = broadcast_from_root(t, answer)?;
    let mut r = Reader::new(&bytes);
    if r.u8()? != 0 {
        return Err(Error::Shape(r.string()?));
    }
    let count = r.u32()? as usize;
    let names = (0..count).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    Ok(names)
}

/// Names ready on every rank, in lexicographic order, identical everywhere.
pub fn negotiate_ready<T: Transport + ?Sized>(local_ready: &[String], t: &mut T) -> Result<Vec<String>> {
    let entries = local_ready
        .iter()
        .map(|n| ReadyEntry {
            name: n.clone(),
            schema: None,
        })
        .collect();
    negotiate(entries, t, false)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregateStats {
    pub allreduce_calls: usize,
    pub fused_bytes: Vec<usize>,
    pub collectives: Vec<CollectiveStats>,
}

/// Configured aggregation pipeline. With a registry attached, every fused
/// buffer is allocated as device memory and classified once before its
/// allreduce.
#[derive(Debug, Clone)]
pub struct Aggregator {
    pub algo: AlgorithmId,
    pub switch_bytes: usize,
    pub fusion: FusionConfig,
    pub registry: Option<Arc<BufferRegistry>>,
}

impl Default for Aggregator {
    fn default() -> Self {
        Self {
            algo: AlgorithmId::Auto,
            switch_bytes: DEFAULT_SWITCH_BYTES,
            fusion: FusionConfig::default(),
            registry: None,
        }
    }
}

impl Aggregator {
    pub fn new(algo: AlgorithmId, fusion: FusionConfig) -> Self {
        Self {
            algo,
            fusion,
            ..Self::default()
        }
    }

    pub fn with_registry(mut self, registry: Arc<BufferRegistry>) -> Self {
        self.registry = Some(registry);
        self
    }

    /// Returns the element-wise mean over all ranks of every gradient, in
    /// lexicographic name order.
    pub fn aggregate<T: Transport + ?Sized>(
        &self,
        grads: GradientSet,
        t: &mut T,
    ) -> Result<(GradientSet, AggregateStats)> {
        let iteration = grads.iteration;
        let entries = grads
            .tensors
            .iter()
            .map(|g| ReadyEntry {
                name: g.name().to_string(),
                schema: Some((g.dtype(), g.len() as u64)),
            })
            .collect();
        let order = negotiate(entries, t, true)?;

        let mut by_name: HashMap<String, Tensor> = grads
            .into_tensors()
            .into_iter()
            .map(|g| (g.name().to_string(), g))
            .collect();
        let ordered: Vec<Tensor> = order
            .iter()
            .map(|n| by_name.remove(n).expect("negotiated names are local"))
            .collect();

        let mut stats = AggregateStats::default();
        let p = t.size() as f64;
        let mut reduced = Vec::with_capacity(ordered.len());
        for fused in fuse(&ordered, &self.fusion) {
            let handle = match &self.registry {
                Some(reg) => {
                    let h = reg.alloc(BufferKind::Device, fused.byte_len().max(1))?;
                    reg.classify(h)?;
                    Some((reg, h))
                }
                None => None,
            };
            let (sum, cstats) = allreduce(fused.buffer().clone(), ReduceOp::Sum, t, self.algo, self.switch_bytes)?;
            if let Some((reg, h)) = handle {
                reg.free(h)?;
            }
            stats.allreduce_calls += 1;
            stats.fused_bytes.push(fused.byte_len());
            stats.collectives.push(cstats);
            for mut member in fused.unpack_from(&sum)? {
                scale_down(&mut member, p);
                reduced.push(member);
            }
        }
        Ok((GradientSet::new(iteration, reduced)?, stats))
    }
}

/// Divides by `p`; float32 values are divided in f64 and rounded once.
fn scale_down(t: &mut Tensor, p: f64) {
    match t.payload_mut() {
        Payload::F32(v) => v.iter_mut().for_each(|x| *x = (*x as f64 / p) as f32),
        Payload::F64(v) => v.iter_mut().for_each(|x| *x /= p),
    }
}

/// One-shot aggregation without a registry.
pub fn aggregate<T: Transport + ?Sized>(
    grads: GradientSet,
    t: &mut T,
    algo: AlgorithmId,
    cfg: FusionConfig,
) -> Result<GradientSet> {
    Aggregator::new(algo, cfg).aggregate(grads, t).map(|(g, _)| g)
}

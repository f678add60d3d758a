//! Benchmark drivers behind the `collectium` CLI: an Allreduce latency sweep
//! over message sizes, a synthetic training benchmark, and the cost-model
//! sweep. Each runs on the simulated network or over TCP sockets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{Aggregator, FusionConfig, GradientSet, DEFAULT_FUSION_THRESHOLD};
use crate::collectives::{allreduce, broadcast_from_root, gather_to_root, AlgorithmId, DEFAULT_SWITCH_BYTES};
use crate::csvfmt::{field, sig9};
use crate::error::{Error, Result};
use crate::paramserver::{ps_training_step, PsTopology, TensorTable};
use crate::registry::{BufferRegistry, CachePolicy, StatsReport};
use crate::simcost::{simulate_training_step, sweep, CostModel, ModelSpec, Strategy, BUILTIN_MODELS};
use crate::tensor::{DType, Payload, Rank, ReduceOp, Tensor};
use crate::transport::{Hostfile, LinkModel, NetworkModel, SimConfig, SimNetwork, SocketTransport, Transport};

/// Group size for socket runs, checked against the hostfile.
pub const ENV_NPROCS: &str = "COLLECTIUM_NPROCS";
/// This process's rank when `--rank` is not given.
pub const ENV_RANK: &str = "COLLECTIUM_RANK";

pub const MICROBENCH_HEADER: &str =
    "message_bytes,algo,p,mean_latency_s,messages_per_rank,min_latency_s,max_latency_s";
pub const TRAIN_HEADER: &str = "model,strategy,p,images_per_sec,ideal,efficiency,grad_digest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Microbench,
    Train,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Sim,
    Socket,
}

macro_rules! str_enum {
    ($ty:ty { $($variant:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $s),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok(Self::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?}", stringify!($ty).to_lowercase()
                    ))),
                }
            }
        }
    };
}

str_enum!(Mode { Microbench => "microbench", Train => "train", Sweep => "sweep" });
str_enum!(TransportKind { Sim => "sim", Socket => "socket" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementType {
    #[default]
    Float32,
    Float64,
}

impl From<ElementType> for DType {
    fn from(e: ElementType) -> Self {
        match e {
            ElementType::Float32 => DType::Float32,
            ElementType::Float64 => DType::Float64,
        }
    }
}

str_enum!(ElementType { Float32 => "float32", Float64 => "float64" });

/// Every knob of a benchmark run. Loaded from JSON; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub mode: Mode,
    pub transport: TransportKind,
    pub algo: AlgorithmId,
    pub switch_bytes: usize,
    pub fusion_threshold: u64,
    pub strategy: Strategy,
    /// Built-in model name or path to a JSON model spec.
    pub model: String,
    /// Group size. Socket runs take it from the hostfile.
    pub p: Option<usize>,
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub seed: u64,
    /// `{rank}` is replaced by the rank of the writing process.
    pub output: Option<String>,
    pub dtype: ElementType,
    pub min_bytes: u64,
    pub max_bytes: u64,
    pub cost: CostModel,
    /// Train bench: gradient elements actually moved per layer.
    pub proxy_elements: usize,
    pub learning_rate: f64,
    /// Train bench: classify every fused buffer through a registry.
    pub cache_policy: Option<CachePolicy>,
    /// Sweep mode.
    pub models: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub p_list: Vec<usize>,
    pub hostfile: Option<String>,
    pub rank: Option<Rank>,
    /// Rendezvous and receive timeout for socket runs.
    pub timeout_s: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Microbench,
            transport: TransportKind::Sim,
            algo: AlgorithmId::Auto,
            switch_bytes: DEFAULT_SWITCH_BYTES,
            fusion_threshold: DEFAULT_FUSION_THRESHOLD,
            strategy: Strategy::HorovodAllreduce,
            model: "resnet50_like".into(),
            p: None,
            warmup_iters: 5,
            timed_iters: 10,
            seed: 0,
            output: None,
            dtype: ElementType::Float32,
            min_bytes: 8,
            max_bytes: 256 * 1024 * 1024,
            cost: CostModel::default(),
            proxy_elements: 1024,
            learning_rate: 0.01,
            cache_policy: None,
            models: BUILTIN_MODELS.iter().map(|s| s.to_string()).collect(),
            strategies: Strategy::ALL.to_vec(),
            p_list: vec![1, 2, 4, 8, 16, 32, 64, 128],
            hostfile: None,
            rank: None,
            timeout_s: 30.0,
        }
    }
}

pub const DEFAULT_SIM_P: usize = 4;

impl BenchConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.timed_iters == 0 {
            return bad("timed_iters must be at least 1".into());
        }
        if self.p == Some(0) {
            return bad("p must be at least 1".into());
        }
        if self.switch_bytes == 0 && self.algo == AlgorithmId::Auto {
            return bad("switch_bytes must be positive with algo auto".into());
        }
        if self.fusion_threshold == 0 {
            return bad("fusion_threshold must be positive".into());
        }
        if self.min_bytes == 0 || self.min_bytes > self.max_bytes {
            return bad(format!("need 0 < min_bytes <= max_bytes, got {}..{}", self.min_bytes, self.max_bytes));
        }
        if self.proxy_elements == 0 {
            return bad("proxy_elements must be positive".into());
        }
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return bad("timeout_s must be positive".into());
        }
        if !self.learning_rate.is_finite() {
            return bad("learning_rate must be finite".into());
        }
        if self.mode == Mode::Sweep && (self.models.is_empty() || self.strategies.is_empty() || self.p_list.is_empty()) {
            return bad("sweep needs models, strategies and p_list".into());
        }
        if self.p_list.contains(&0) {
            return bad("p_list entries must be at least 1".into());
        }
        self.cost.validate().map_err(|e| Error::Config(format!("cost: {e}")))
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            threshold_bytes: self.fusion_threshold,
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let link = LinkModel::new(self.cost.alpha, self.cost.beta)?;
        Ok(SimConfig::new(NetworkModel::uniform(link))
            .with_gamma(self.cost.gamma)
            .with_channels(self.cost.parallel_channels))
    }

    /// Power-of-two message sizes from `min_bytes` to `max_bytes`, rounded
    /// down to whole elements.
    pub fn message_sizes(&self) -> Vec<u64> {
        let elem = DType::from(self.dtype).size() as u64;
        let mut out = Vec::new();
        let mut b = self.min_bytes.next_power_of_two();
        while b <= self.max_bytes {
            let bytes = (b / elem).max(1) * elem;
            if out.last() != Some(&bytes) {
                out.push(bytes);
            }
            b *= 2;
        }
        out
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_s)
    }

    /// The output path for `rank`, if this rank writes one.
    pub fn output_for(&self, rank: Rank) -> Option<String> {
        let out = self.output.as_ref()?;
        if out.contains("{rank}") {
            Some(out.replace("{rank}", &rank.to_string()))
        } else if rank == 0 {
            Some(out.clone())
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroRow {
    pub message_bytes: u64,
    pub algo: AlgorithmId,
    pub p: usize,
    pub mean_latency_s: f64,
    pub messages_per_rank: u64,
    pub min_latency_s: f64,
    pub max_latency_s: f64,
}

pub fn microbench_csv(rows: &[MicroRow]) -> String {
    let mut out = format!("{MICROBENCH_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.message_bytes,
            r.algo,
            r.p,
            sig9(r.mean_latency_s),
            r.messages_per_rank,
            sig9(r.min_latency_s),
            sig9(r.max_latency_s),
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub model: String,
    pub strategy: Strategy,
    pub p: usize,
    pub images_per_sec: f64,
    pub ideal: f64,
    pub efficiency: f64,
    /// SHA-256 chained over every iteration's aggregated tensors.
    pub grad_digest: String,
}

pub fn train_csv(rows: &[TrainRow]) -> String {
    let mut out = format!("{TRAIN_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            field(&r.model),
            r.strategy,
            r.p,
            sig9(r.images_per_sec),
            sig9(r.ideal),
            sig9(r.efficiency),
            r.grad_digest,
        ));
    }
    out
}

/// What a finished run hands back to the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchOutput {
    pub csv: String,
    /// Train mode: this rank's final aggregated tensors.
    pub final_tensors: Vec<Tensor>,
    pub registry: Option<StatsReport>,
}

enum Clock {
    Virtual,
    Wall(Instant),
}

impl Clock {
    fn now<T: Transport + ?Sized>(&self, t: &T) -> Result<f64> {
        match self {
            Clock::Virtual => t.virtual_time(),
            Clock::Wall(start) => Ok(start.elapsed().as_secs_f64()),
        }
    }
}

fn fill(dtype: DType, len: usize, rank: Rank) -> Payload {
    let v = |i: usize| ((i % 97) as f64) * 0.5 + rank as f64;
    match dtype {
        DType::Float32 => Payload::F32((0..len).map(|i| v(i) as f32).collect()),
        DType::Float64 => Payload::F64((0..len).map(v).collect()),
    }
}

/// One rank's share of the latency sweep. Rank 0's measurements are
/// broadcast so every rank reports the same rows.
pub fn microbench_rank<T: Transport + ?Sized>(cfg: &BenchConfig, t: &mut T, wall: bool) -> Result<Vec<MicroRow>> {
    let clock = if wall { Clock::Wall(Instant::now()) } else { Clock::Virtual };
    let dtype = DType::from(cfg.dtype);
    let p = t.size();
    let mut rows = Vec::new();
    for bytes in cfg.message_sizes() {
        let len = bytes as usize / dtype.size();
        let mut tensor = Tensor::new("bench", fill(dtype, len, t.rank()));
        let mut lat = Vec::with_capacity(cfg.timed_iters);
        let mut msgs = None;
        let mut algo = cfg.algo.resolve(bytes as usize, cfg.switch_bytes);
        for iter in 0..cfg.warmup_iters + cfg.timed_iters {
            t.barrier()?;
            let start = clock.now(t)?;
            let (out, stats) = allreduce(tensor, ReduceOp::Sum, t, cfg.algo, cfg.switch_bytes)?;
            t.barrier()?;
            let end = clock.now(t)?;
            tensor = out;
            algo = stats.algorithm;
            match msgs {
                None => msgs = Some(stats.messages_per_rank),
                Some(m) if m != stats.messages_per_rank => {
                    return Err(Error::Invariant(format!(
                        "message count changed between iterations ({m} vs {})",
                        stats.messages_per_rank
                    )));
                }
                Some(_) => {}
            }
            if iter >= cfg.warmup_iters {
                lat.push(end - start);
            }
        }
        let mine = msgs.unwrap_or(0);
        let all = gather_to_root(t, mine.to_le_bytes().to_vec())?;
        let max_msgs = all.map(|v| {
            v.iter()
                .map(|b| u64::from_le_bytes(b.as_slice().try_into().unwrap_or([0; 8])))
                .max()
                .unwrap_or(0)
        });
        rows.push(MicroRow {
            message_bytes: bytes,
            algo,
            p,
            mean_latency_s: lat.iter().sum::<f64>() / lat.len() as f64,
            messages_per_rank: max_msgs.unwrap_or(0),
            min_latency_s: lat.iter().copied().fold(f64::INFINITY, f64::min),
            max_latency_s: lat.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    let root_rows = (t.rank() == 0).then(|| serde_json::to_vec(&rows).expect("rows serialize"));
    let shared = broadcast_from_root(t, root_rows)?;
    serde_json::from_slice(&shared).map_err(|e| Error::Protocol(format!("microbench rows: {e}")))
}

fn grad_seed(seed: u64, iteration: usize, layer: usize, rank: Rank) -> u64 {
    let mut h = Sha256::new();
    for v in [seed, iteration as u64, layer as u64, rank as u64] {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn proxy_len(grad_bytes: u64, cfg: &BenchConfig) -> usize {
    ((grad_bytes / 4) as usize).clamp(1, cfg.proxy_elements)
}

/// Seeded synthetic gradients, capped at `proxy_elements` per layer.
pub fn synth_gradients(model: &ModelSpec, cfg: &BenchConfig, iteration: usize, rank: Rank) -> Vec<Tensor> {
    model
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let len = proxy_len(l.grad_bytes, cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(grad_seed(cfg.seed, iteration, i, rank));
            let payload = match DType::from(cfg.dtype) {
                DType::Float32 => Payload::F32((0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()),
                DType::Float64 => Payload::F64((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            };
            Tensor::new(ModelSpec::layer_name(i), payload)
        })
        .collect()
}

fn hash_tensors(h: &mut Sha256, tensors: &[Tensor]) {
    for t in tensors {
        h.update((t.name().len() as u32).to_le_bytes());
        h.update(t.name().as_bytes());
        h.update([t.dtype().code()]);
        h.update(t.to_bytes());
    }
}

/// Runs the training data path for every warmup and timed iteration on
/// this rank and returns the digest and final tensors. Fails with an
/// invariant error when ranks disagree.
pub fn train_rank<T: Transport + ?Sized>(
    cfg: &BenchConfig,
    model: &ModelSpec,
    registry: Option<&Arc<BufferRegistry>>,
    t: &mut T,
) -> Result<(String, Vec<Tensor>)> {
    let me = t.rank();
    let p = t.size();
    let mut hasher = Sha256::new();
    let mut last = Vec::new();
    let names: Vec<String> = (0..model.layers.len()).map(ModelSpec::layer_name).collect();
    let mut params: Vec<Tensor> = model
        .layers
        .iter()
        .zip(&names)
        .map(|(l, n)| Tensor::zeros(n.as_str(), cfg.dtype.into(), proxy_len(l.grad_bytes, cfg)))
        .collect();
    let topo = PsTopology::round_robin((0..p).collect(), (0..p).collect(), &names)?;
    let table = TensorTable::new();

    for iteration in 0..cfg.warmup_iters + cfg.timed_iters {
        let grads = synth_gradients(model, cfg, iteration, me);
        let result = match cfg.strategy {
            Strategy::HorovodAllreduce | Strategy::BaiduRing => {
                let (algo, fusion) = if cfg.strategy == Strategy::BaiduRing {
                    (AlgorithmId::RingRsa, FusionConfig { threshold_bytes: 1 })
                } else {
                    (cfg.algo, cfg.fusion())
                };
                let mut agg = Aggregator {
                    algo,
                    switch_bytes: cfg.switch_bytes,
                    fusion,
                    registry: None,
                };
                if let Some(reg) = registry {
                    agg = agg.with_registry(Arc::clone(reg));
                }
                agg.aggregate(GradientSet::new(iteration as u64, grads)?, t)?.0.into_tensors()
            }
            Strategy::PsPull => {
                let updated = ps_training_step(&topo, &table, Some(&grads), &params, cfg.learning_rate, t)?
                    .ok_or_else(|| Error::Invariant(format!("rank {me} is a worker but got no params")))?;
                if !table.is_quiescent() {
                    return Err(Error::Invariant(format!("rank {me} tensor table not empty after step")));
                }
                params = updated.clone();
                updated
            }
        };
        hash_tensors(&mut hasher, &result);
        last = result;
    }
    let digest = hex::encode(hasher.finalize());

    let all = gather_to_root(t, digest.as_bytes().to_vec())?;
    let verdict = all.map(|ds| match ds.iter().position(|d| d != &ds[0]) {
        None => vec![0u8],
        Some(r) => {
            let mut v = vec![1u8];
            v.extend_from_slice(format!("rank {r} digest differs from rank 0").as_bytes());
            v
        }
    });
    let verdict = broadcast_from_root(t, verdict)?;
    if verdict.first() != Some(&0) {
        return Err(Error::Invariant(String::from_utf8_lossy(&verdict[1..]).into_owned()));
    }
    Ok((digest, last))
}

fn train_row(cfg: &BenchConfig, model: &ModelSpec, p: usize, digest: String) -> Result<TrainRow> {
    let report = simulate_training_step(model, p, cfg.strategy, &cfg.cost, &cfg.fusion())?;
    Ok(TrainRow {
        model: model.name.clone(),
        strategy: cfg.strategy,
        p,
        images_per_sec: report.images_per_sec,
        ideal: report.ideal_images_per_sec,
        efficiency: report.efficiency,
        grad_digest: digest,
    })
}

fn sim_p(cfg: &BenchConfig) -> usize {
    cfg.p.unwrap_or(DEFAULT_SIM_P)
}

pub fn run_microbench(cfg: &BenchConfig) -> Result<Vec<MicroRow>> {
    let net = SimNetwork::new(sim_p(cfg), cfg.sim_config()?)?;
    let out = net.run(|ep| microbench_rank(cfg, ep, false))?;
    Ok(out.results.into_iter().next().unwrap_or_default())
}

/// Simulated train bench; returns the CSV row plus rank 0's final tensors.
pub fn run_train_bench(cfg: &BenchConfig) -> Result<(TrainRow, Vec<Tensor>, Option<StatsReport>)> {
    let model = ModelSpec::resolve(&cfg.model)?;
    let p = sim_p(cfg);
    let registry = cfg.cache_policy.map(|pol| Arc::new(BufferRegistry::new(pol)));
    let net = SimNetwork::new(p, cfg.sim_config()?)?;
    let out = net.run(|ep| train_rank(cfg, &model, registry.as_ref(), ep))?;
    let (digest, tensors) = out.results.into_iter().next().expect("p >= 1");
    Ok((train_row(cfg, &model, p, digest)?, tensors, registry.map(|r| r.report())))
}

pub fn run_sweep(cfg: &BenchConfig) -> Result<String> {
    let models = cfg
        .models
        .iter()
        .map(|m| ModelSpec::resolve(m))
        .collect::<Result<Vec<_>>>()?;
    let rows = sweep(&models, &cfg.strategies, &cfg.p_list, &cfg.cost, &cfg.fusion())?;
    Ok(crate::simcost::sweep_csv(&rows))
}

/// Resolves this process's rank from the flag, else `COLLECTIUM_RANK`.
pub fn resolve_rank(flag: Option<Rank>) -> Result<Rank> {
    if let Some(r) = flag {
        return Ok(r);
    }
    let raw = std::env::var(ENV_RANK)
        .map_err(|_| Error::Config(format!("socket transport needs --rank or {ENV_RANK}")))?;
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{ENV_RANK}={raw:?} is not a rank")))
}

fn check_nprocs(hostfile: &Hostfile) -> Result<()> {
    if let Ok(raw) = std::env::var(ENV_NPROCS) {
        let n: usize = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{ENV_NPROCS}={raw:?} is not a number")))?;
        if n != hostfile.len() {
            return Err(Error::Config(format!(
                "{ENV_NPROCS}={n} but the hostfile lists {} ranks",
                hostfile.len()
            )));
        }
    }
    Ok(())
}

/// Connects `rank` to the group in `hostfile` and runs `cfg` over sockets.
pub fn launch_socket_group(hostfile: &Hostfile, rank: Rank, cfg: &BenchConfig) -> Result<BenchOutput> {
    check_nprocs(hostfile)?;
    if rank >= hostfile.len() {
        return Err(Error::Config(format!("rank {rank} is not in a hostfile of {} ranks", hostfile.len())));
    }
    if let Some(p) = cfg.p {
        if p != hostfile.len() {
            return Err(Error::Config(format!("p = {p} but the hostfile lists {} ranks", hostfile.len())));
        }
    }
    let mut t = SocketTransport::connect(hostfile, rank, cfg.timeout())?;
    t.set_recv_timeout(cfg.timeout());
    let out = run_on(cfg, &mut t)?;
    t.barrier()?;
    Ok(out)
}

/// Runs one rank of `cfg` over an already connected socket transport.
pub fn run_on(cfg: &BenchConfig, t: &mut SocketTransport) -> Result<BenchOutput> {
    match cfg.mode {
        Mode::Microbench => Ok(BenchOutput {
            csv: microbench_csv(&microbench_rank(cfg, t, true)?),
            final_tensors: Vec::new(),
            registry: None,
        }),
        Mode::Train => {
            let model = ModelSpec::resolve(&cfg.model)?;
            let registry = cfg.cache_policy.map(|pol| Arc::new(BufferRegistry::new(pol)));
            let (digest, tensors) = train_rank(cfg, &model, registry.as_ref(), t)?;
            let row = train_row(cfg, &model, t.size(), digest)?;
            Ok(BenchOutput {
                csv: train_csv(&[row]),
                final_tensors: tensors,
                registry: registry.map(|r| r.report()),
            })
        }
        Mode::Sweep => Ok(BenchOutput {
            csv: run_sweep(cfg)?,
            final_tensors: Vec::new(),
            registry: None,
        }),
    }
}

/// Runs `cfg` in this process: the whole simulated group, or this rank of a
/// socket group (rank from the config or `COLLECTIUM_RANK`).
pub fn run(cfg: &BenchConfig) -> Result<BenchOutput> {
    cfg.validate()?;
    match (cfg.transport, cfg.mode) {
        (_, Mode::Sweep) => Ok(BenchOutput {
            csv: run_sweep(cfg)?,
            final_tensors: Vec::new(),
            registry: None,
        }),
        (TransportKind::Sim, Mode::Microbench) => Ok(BenchOutput {
            csv: microbench_csv(&run_microbench(cfg)?),
            final_tensors: Vec::new(),
            registry: None,
        }),
        (TransportKind::Sim, Mode::Train) => {
            let (row, tensors, registry) = run_train_bench(cfg)?;
            Ok(BenchOutput {
                csv: train_csv(&[row]),
                final_tensors: tensors,
                registry,
            })
        }
        (TransportKind::Socket, _) => {
            let path = cfg
                .hostfile
                .as_ref()
                .ok_or_else(|| Error::Config("socket transport needs a hostfile".into()))?;
            let hostfile = Hostfile::load(Path::new(path)).map_err(|e| match e {
                Error::Io(io) => Error::Config(format!("{path}: {io}")),
                other => other,
            })?;
            launch_socket_group(&hostfile, resolve_rank(cfg.rank)?, cfg)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcost::predict_allreduce_time;
    use crate::transport::socket::run_local;

    fn small(mode: Mode) -> BenchConfig {
        BenchConfig {
            mode,
            min_bytes: 8,
            max_bytes: 4096,
            warmup_iters: 1,
            timed_iters: 3,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn defaults_and_validation() {
        let cfg = BenchConfig::default();
        assert_eq!((cfg.warmup_iters, cfg.timed_iters), (5, 10));
        cfg.validate().unwrap();
        assert!(BenchConfig::from_json(r#"{"timed_iters": 0}"#).is_err());
        let err = BenchConfig::from_json("{\n  \"mode\": \"train\",\n  \"bogus\": 1\n}").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(BenchConfig::from_json(r#"{"mode": "nope"}"#).is_err());
        let cfg = BenchConfig::from_json(r#"{"mode": "sweep", "algo": "ring_rsa", "p": 3}"#).unwrap();
        assert_eq!((cfg.mode, cfg.algo, cfg.p), (Mode::Sweep, AlgorithmId::RingRsa, Some(3)));
    }

    #[test]
    fn message_sizes_are_powers_of_two() {
        let cfg = small(Mode::Microbench);
        assert_eq!(cfg.message_sizes(), vec![8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096]);
        let d = BenchConfig::default().message_sizes();
        assert_eq!((d[0], *d.last().unwrap(), d.len()), (8, 256 << 20, 26));
    }

    #[test]
    fn sim_latency_matches_prediction() {
        let cfg = BenchConfig {
            p: Some(4),
            algo: AlgorithmId::RingRsa,
            min_bytes: 64,
            max_bytes: 64 << 10,
            cost: CostModel::new(1e-6, 1e-9, 0.0).unwrap(),
            ..small(Mode::Microbench)
        };
        for row in run_microbench(&cfg).unwrap() {
            let want = predict_allreduce_time(AlgorithmId::RingRsa, row.message_bytes, 4, &cfg.cost).unwrap();
            assert!((row.mean_latency_s - want).abs() <= 1e-9 * want, "{row:?} vs {want}");
            assert_eq!(row.messages_per_rank, 6);
        }
    }

    #[test]
    fn auto_switch_in_rows() {
        let cfg = BenchConfig {
            p: Some(16),
            min_bytes: 8,
            max_bytes: 1 << 20,
            warmup_iters: 0,
            timed_iters: 1,
            ..BenchConfig::default()
        };
        let rows = run_microbench(&cfg).unwrap();
        assert_eq!(rows.first().unwrap().algo, AlgorithmId::RhdRsa);
        assert_eq!(rows.last().unwrap().algo, AlgorithmId::RingRsa);
    }

    #[test]
    fn single_rank_latency_is_zero() {
        let cfg = BenchConfig { p: Some(1), ..small(Mode::Microbench) };
        for row in run_microbench(&cfg).unwrap() {
            assert_eq!(row.mean_latency_s, 0.0);
            assert_eq!(row.messages_per_rank, 0);
        }
    }

    #[test]
    fn sim_runs_are_reproducible() {
        for mode in [Mode::Microbench, Mode::Train] {
            let cfg = BenchConfig {
                p: Some(3),
                model: "mobilenet_like".into(),
                ..small(mode)
            };
            assert_eq!(run(&cfg).unwrap().csv, run(&cfg).unwrap().csv);
        }
    }

    #[test]
    fn train_single_rank_is_ideal() {
        let cfg = BenchConfig {
            p: Some(1),
            ..small(Mode::Train)
        };
        let (row, _, _) = run_train_bench(&cfg).unwrap();
        assert_eq!(row.efficiency, 1.0);
        let model = ModelSpec::resolve("resnet50_like").unwrap();
        let want = model.batch_size as f64 / (model.forward_s + model.backward_s());
        assert!((row.images_per_sec - want).abs() <= 1e-9 * want);
    }

    #[test]
    fn train_strategies_run() {
        for strategy in Strategy::ALL {
            let cfg = BenchConfig {
                p: Some(3),
                strategy,
                model: "mobilenet_like".into(),
                proxy_elements: 16,
                cache_policy: Some(CachePolicy::InterceptCache),
                ..small(Mode::Train)
            };
            let out = run(&cfg).unwrap();
            assert!(out.csv.starts_with(TRAIN_HEADER));
            assert_eq!(out.final_tensors.len(), 83);
        }
    }

    #[test]
    fn socket_train_matches_sim() {
        let cfg = BenchConfig {
            model: "mobilenet_like".into(),
            proxy_elements: 32,
            ..small(Mode::Train)
        };
        let sim = run(&BenchConfig { p: Some(2), ..cfg.clone() }).unwrap();
        let sock = run_local(2, Duration::from_secs(20), |t| run_on(&cfg, t)).unwrap();
        assert_eq!(sock[0].final_tensors, sock[1].final_tensors);
        assert_eq!(sock[0].final_tensors, sim.final_tensors);
        assert_eq!(sock[0].csv, sim.csv);
    }

    #[test]
    fn socket_microbench_rows_agree() {
        let cfg = BenchConfig {
            max_bytes: 256,
            ..small(Mode::Microbench)
        };
        let out = run_local(3, Duration::from_secs(20), |t| run_on(&cfg, t)).unwrap();
        assert_eq!(out[0].csv, out[1].csv);
        assert_eq!(out[0].csv, out[2].csv);
        assert_eq!(out[0].csv.lines().count(), 1 + 6);
    }

    #[test]
    fn output_paths() {
        let cfg = BenchConfig {
            output: Some("out-{rank}.csv".into()),
            ..BenchConfig::default()
        };
        assert_eq!(cfg.output_for(1).unwrap(), "out-1.csv");
        let cfg = BenchConfig {
            output: Some("out.csv".into()),
            ..BenchConfig::default()
        };
        assert_eq!(cfg.output_for(0).unwrap(), "out.csv");
        assert!(cfg.output_for(1).is_none());
    }

    #[test]
    fn sweep_mode_csv() {
        let cfg = BenchConfig {
            mode: Mode::Sweep,
            p_list: vec![1, 8],
            ..BenchConfig::default()
        };
        let csv = run(&cfg).unwrap().csv;
        assert_eq!(csv.lines().count(), 1 + 3 * 3 * 2);
    }
}

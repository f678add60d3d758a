//! Alpha-beta-gamma cost model for the Allreduce algorithms and a
//! training-step simulator that overlaps gradient communication with the
//! backward pass.

use std::collections::BinaryHeap;
use std::cmp::Reverse;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::aggregation::FusionConfig;
use crate::collectives::{AlgorithmId, DEFAULT_SWITCH_BYTES};
use crate::csvfmt::{field, sig9};
use crate::error::{Error, Result};

/// Per-message, per-byte and per-reduced-byte costs plus the number of
/// transfers a rank can have in flight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Charged once per collective call (pointer classification by the driver).
    pub driver_query_delay: f64,
    pub parallel_channels: usize,
}

impl Default for CostModel {
    /// The shipped model: 5 us latency, 1 GB/s per link, 4 GB/s reduction,
    /// pointer cache enabled (no driver queries), one channel.
    fn default() -> Self {
        Self {
            alpha: 5e-6,
            beta: 1e-9,
            gamma: 2.5e-10,
            driver_query_delay: 0.0,
            parallel_channels: 1,
        }
    }
}

impl CostModel {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let m = Self {
            alpha,
            beta,
            gamma,
            ..Self::default()
        };
        m.validate()?;
        Ok(m)
    }

    /// No communication cost at all.
    pub fn free() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            driver_query_delay: 0.0,
            parallel_channels: 1,
        }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.parallel_channels = channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("driver_query_delay", self.driver_query_delay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.parallel_channels == 0 {
            return Err(Error::Parameter("parallel_channels must be at least 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("cost model: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    fn transfer(&self, bytes: f64) -> f64 {
        self.alpha + bytes * self.beta
    }
}

/// Predicted completion time of one allreduce of `n_bytes` over `p` ranks.
/// `auto` resolves with the default 128 KiB switch.
pub fn predict_allreduce_time(algo: AlgorithmId, n_bytes: u64, p: usize, m: &CostModel) -> Result<f64> {
    predict_with_switch(algo, n_bytes, p, m, DEFAULT_SWITCH_BYTES)
}

pub fn predict_with_switch(algo: AlgorithmId, n_bytes: u64, p: usize, m: &CostModel, switch_bytes: usize) -> Result<f64> {
    if p == 0 {
        return Err(Error::Parameter("p must be at least 1".into()));
    }
    if p == 1 {
        return Ok(0.0);
    }
    let n = n_bytes as f64;
    let pf = p as f64;
    let t = match algo.resolve(n_bytes as usize, switch_bytes) {
        AlgorithmId::Flat => 2.0 * (pf - 1.0) * m.alpha + 2.0 * (pf - 1.0) * n * m.beta + (pf - 1.0) * n * m.gamma,
        AlgorithmId::RingRsa => {
            2.0 * (pf - 1.0) * m.alpha + 2.0 * ((pf - 1.0) / pf) * n * m.beta + ((pf - 1.0) / pf) * n * m.gamma
        }
        AlgorithmId::RhdRsa => {
            let pof2 = 1usize << (usize::BITS - 1 - p.leading_zeros());
            let q = pof2 as f64;
            let core = if pof2 > 1 {
                2.0 * q.log2() * m.alpha + 2.0 * ((q - 1.0) / q) * n * m.beta + ((q - 1.0) / q) * n * m.gamma
            } else {
                0.0
            };
            if pof2 == p {
                core
            } else {
                // fold (send + reduce) and unfold (send) around the core
                2.0 * m.alpha + 2.0 * n * m.beta + n * m.gamma + core
            }
        }
        AlgorithmId::Auto => unreachable!("resolved above"),
    };
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Fused allreduce with the auto algorithm.
    #[serde(alias = "horovod")]
    HorovodAllreduce,
    /// One ring allreduce per tensor, no fusion.
    #[serde(alias = "baidu")]
    BaiduRing,
    /// Parameter servers co-located with every worker, pull model.
    #[serde(alias = "ps")]
    PsPull,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::HorovodAllreduce, Strategy::BaiduRing, Strategy::PsPull];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::HorovodAllreduce => "horovod_allreduce",
            Strategy::BaiduRing => "baidu_ring",
            Strategy::PsPull => "ps_pull",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "horovod_allreduce" | "horovod" => Ok(Strategy::HorovodAllreduce),
            "baidu_ring" | "baidu" => Ok(Strategy::BaiduRing),
            "ps_pull" | "ps" => Ok(Strategy::PsPull),
            other => Err(Error::Parameter(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub grad_bytes: u64,
    /// Backward compute for this layer, seconds per batch.
    pub backward_s: f64,
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Forward order; gradients become ready in reverse.
    pub layers: Vec<LayerSpec>,
    pub forward_s: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Parameter(format!("model {:?} has no layers", self.name)));
        }
        if !(self.forward_s.is_finite() && self.forward_s > 0.0) || self.batch_size == 0 {
            return Err(Error::Parameter(format!("model {:?}: forward_s and batch_size must be positive", self.name)));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.grad_bytes == 0 || !(l.backward_s.is_finite() && l.backward_s > 0.0) {
                return Err(Error::Parameter(format!("model {:?}: layer {i} needs positive size and time", self.name)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("model spec: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    /// A built-in name or a path to a JSON spec.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        if let Some(m) = builtin_model(name_or_path) {
            return Ok(m);
        }
        let path = Path::new(name_or_path);
        if path.exists() {
            return Self::from_json(&std::fs::read_to_string(path)?);
        }
        Err(Error::Config(format!(
            "unknown model {name_or_path:?}; built-ins are {}",
            BUILTIN_MODELS.join(", ")
        )))
    }

    pub fn total_grad_bytes(&self) -> u64 {
        self.layers.iter().map(|l| l.grad_bytes).sum()
    }

    /// Summed in backward (reverse layer) order.
    pub fn backward_s(&self) -> f64 {
        self.layers.iter().rev().fold(0.0, |t, l| t + l.backward_s)
    }

    /// Forward plus backward time for one batch.
    pub fn compute_s(&self) -> f64 {
        self.forward_s + self.backward_s()
    }

    pub fn single_images_per_sec(&self) -> f64 {
        self.batch_size as f64 / self.compute_s()
    }

    pub fn layer_name(i: usize) -> String {
        format!("layer{i:04}")
    }

    /// Multiplies every compute time by `k`.
    pub fn scale_compute(&self, k: f64) -> Self {
        let mut m = self.clone();
        m.forward_s *= k;
        m.layers.iter_mut().for_each(|l| l.backward_s *= k);
        m
    }
}

pub const BUILTIN_MODELS: [&str; 3] = ["mobilenet_like", "resnet50_like", "nasnet_like"];

/// Synthetic layer table. Later layers hold more parameters, earlier layers
/// more compute; a small deterministic jitter keeps sizes uneven.
fn synth(name: &str, layers: usize, params: u64, images_per_sec: f64) -> ModelSpec {
    let batch = default_batch();
    let step = batch as f64 / images_per_sec;
    let forward_s = step / 3.0;
    let backward_total = step - forward_s;
    let last = (layers - 1).max(1) as f64;
    let size_w: Vec<f64> = (0..layers)
        .map(|i| {
            let x = i as f64 / last;
            (1.0 + 3.0 * x * x) * (0.6 + 0.08 * ((i * 37) % 11) as f64)
        })
        .collect();
    let time_w: Vec<f64> = (0..layers).map(|i| 2.0 - i as f64 / last).collect();
    let (sw, tw): (f64, f64) = (size_w.iter().sum(), time_w.iter().sum());
    let total_bytes = params * 4;
    let specs = size_w
        .iter()
        .zip(&time_w)
        .map(|(s, t)| LayerSpec {
            grad_bytes: ((total_bytes as f64 * s / sw / 4.0).round() as u64).max(1) * 4,
            backward_s: backward_total * t / tw,
        })
        .collect();
    ModelSpec {
        name: name.into(),
        layers: specs,
        forward_s,
        batch_size: batch,
    }
}

/// Calibration artifacts, not measured data: parameter counts in ratio of
/// roughly 1 : 6 : 21 and single-device throughput decreasing with size.
pub fn builtin_model(name: &str) -> Option<ModelSpec> {
    match name {
        "mobilenet_like" => Some(synth(name, 83, 4_200_000, 2000.0)),
        "resnet50_like" => Some(synth(name, 161, 25_600_000, 220.0)),
        "nasnet_like" => Some(synth(name, 512, 88_900_000, 30.0)),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub images_per_sec: f64,
    pub ideal_images_per_sec: f64,
    pub efficiency: f64,
    pub compute_s: f64,
    pub exposed_comm_s: f64,
    pub step_s: f64,
}

/// Earliest-free channel pool.
struct Channels(BinaryHeap<Reverse<OrderedFloat<f64>>>);

impl Channels {
    fn new(k: usize) -> Self {
        Self((0..k).map(|_| Reverse(OrderedFloat(0.0))).collect())
    }

    /// Runs a job of `duration` no earlier than `ready`; returns its end.
    fn run(&mut self, ready: f64, duration: f64) -> f64 {
        let Reverse(OrderedFloat(free)) = self.0.pop().expect("at least one channel");
        let end = ready.max(free) + duration;
        self.0.push(Reverse(OrderedFloat(end)));
        end
    }
}

/// (ready time, bytes) per layer in the order gradients appear.
fn ready_schedule(model: &ModelSpec) -> Vec<(usize, f64, u64)> {
    let mut t = 0.0;
    model
        .layers
        .iter()
        .enumerate()
        .rev()
        .map(|(i, l)| {
            t += l.backward_s;
            (i, t, l.grad_bytes)
        })
        .collect()
}

/// Greedy fusion over ready order, same rule as the aggregation module.
fn fuse_sizes(sizes: &[(f64, u64)], threshold: u64) -> Vec<(f64, u64)> {
    let mut out = Vec::new();
    let mut cur: Option<(f64, u64)> = None;
    for &(ready, bytes) in sizes {
        cur = match cur {
            Some((r, b)) if b + bytes <= threshold => Some((r.max(ready), b + bytes)),
            Some(done) => {
                out.push(done);
                Some((ready, bytes))
            }
            None => Some((ready, bytes)),
        };
    }
    out.extend(cur);
    out
}

/// Communication finish time (relative to backward start) for one step.
fn comm_finish(model: &ModelSpec, p: usize, strategy: Strategy, m: &CostModel, fusion: &FusionConfig) -> Result<f64> {
    let ready = ready_schedule(model);
    let mut channels = Channels::new(m.parallel_channels);
    let mut finish = 0.0f64;
    match strategy {
        Strategy::HorovodAllreduce | Strategy::BaiduRing => {
            let items: Vec<(f64, u64)> = ready.iter().map(|&(_, r, b)| (r, b)).collect();
            let (jobs, algo) = if strategy == Strategy::HorovodAllreduce {
                (fuse_sizes(&items, fusion.threshold_bytes), AlgorithmId::Auto)
            } else {
                (items, AlgorithmId::RingRsa)
            };
            for (r, bytes) in jobs {
                let d = predict_allreduce_time(algo, bytes, p, m)? + m.driver_query_delay;
                finish = finish.max(channels.run(r, d));
            }
        }
        Strategy::PsPull => {
            // Tensors are sharded round-robin by layer index over p PS
            // processes, one per worker. Each PS serves its shards through its
            // own channel pool: p - 1 remote pushes, the reduction, then
            // p - 1 remote pulls.
            let mut pools: Vec<Channels> = (0..p).map(|_| Channels::new(m.parallel_channels)).collect();
            for &(layer, r, bytes) in &ready {
                let pool = &mut pools[layer % p];
                let b = bytes as f64;
                let mut pushed = r;
                for _ in 1..p {
                    pushed = pushed.max(pool.run(r, m.transfer(b)));
                }
                let reduced = pushed + (p - 1) as f64 * b * m.gamma;
                let mut done = reduced;
                for _ in 1..p {
                    done = done.max(pool.run(reduced, m.transfer(b)));
                }
                finish = finish.max(done);
            }
        }
    }
    Ok(finish)
}

/// Predicted throughput of one synchronous step on `p` ranks.
pub fn simulate_training_step(
    model: &ModelSpec,
    p: usize,
    strategy: Strategy,
    costs: &CostModel,
    fusion: &FusionConfig,
) -> Result<ThroughputReport> {
    model.validate()?;
    costs.validate()?;
    if p == 0 {
        return Err(Error::Parameter("p must be at least 1".into()));
    }
    let compute_s = model.compute_s();
    let exposed = if p == 1 {
        0.0
    } else {
        (comm_finish(model, p, strategy, costs, fusion)? - model.backward_s()).max(0.0)
    };
    let step_s = compute_s + exposed;
    let single = model.single_images_per_sec();
    let images_per_sec = (p * model.batch_size) as f64 / step_s;
    let ideal = single * p as f64;
    Ok(ThroughputReport {
        images_per_sec,
        ideal_images_per_sec: ideal,
        efficiency: compute_s / step_s,
        compute_s,
        exposed_comm_s: exposed,
        step_s,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub strategy: Strategy,
    pub p: usize,
    pub report: ThroughputReport,
}

pub const SWEEP_HEADER: &str = "model,strategy,p,images_per_sec,ideal,efficiency,exposed_comm_s";

fn sweep_cells<'a>(
    models: &'a [ModelSpec],
    strategies: &'a [Strategy],
    p_list: &'a [usize],
) -> Result<Vec<(&'a ModelSpec, Strategy, usize)>> {
    if models.is_empty() || strategies.is_empty() || p_list.is_empty() {
        return Err(Error::Parameter("sweep needs at least one model, strategy and p".into()));
    }
    let mut cells = Vec::with_capacity(models.len() * strategies.len() * p_list.len());
    for m in models {
        for &s in strategies {
            for &p in p_list {
                cells.push((m, s, p));
            }
        }
    }
    Ok(cells)
}

fn eval_cell(cell: &(&ModelSpec, Strategy, usize), costs: &CostModel, fusion: &FusionConfig) -> Result<SweepRow> {
    let (m, s, p) = *cell;
    Ok(SweepRow {
        model: m.name.clone(),
        strategy: s,
        p,
        report: simulate_training_step(m, p, s, costs, fusion)?,
    })
}

/// Cartesian product in model, strategy, p order, one cell at a time.
pub fn sweep_sequential(
    models: &[ModelSpec],
    strategies: &[Strategy],
    p_list: &[usize],
    costs: &CostModel,
    fusion: &FusionConfig,
) -> Result<Vec<SweepRow>> {
    sweep_cells(models, strategies, p_list)?
        .iter()
        .map(|c| eval_cell(c, costs, fusion))
        .collect()
}

/// Same rows as [`sweep_sequential`]; cells are evaluated on the rayon pool
/// when the `parallel` feature is on.
pub fn sweep(
    models: &[ModelSpec],
    strategies: &[Strategy],
    p_list: &[usize],
    costs: &CostModel,
    fusion: &FusionConfig,
) -> Result<Vec<SweepRow>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        sweep_cells(models, strategies, p_list)?
            .par_iter()
            .map(|c| eval_cell(c, costs, fusion))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        sweep_sequential(models, strategies, p_list, costs, fusion)
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            field(&r.model),
            r.strategy,
            r.p,
            sig9(r.report.images_per_sec),
            sig9(r.report.ideal_images_per_sec),
            sig9(r.report.efficiency),
            sig9(r.report.exposed_comm_s),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    fn unit_costs() -> CostModel {
        CostModel::new(1e-6, 1e-9, 0.0).unwrap()
    }

    fn models() -> Vec<ModelSpec> {
        BUILTIN_MODELS.iter().map(|n| builtin_model(n).unwrap()).collect()
    }

    #[test]
    fn closed_forms() {
        let m = unit_costs();
        let ring = predict_allreduce_time(AlgorithmId::RingRsa, 1024, 16, &m).unwrap();
        assert!(rel(ring, 30e-6 + 2.0 * (15.0 / 16.0) * 1024.0 * 1e-9) < 1e-12);
        assert!((ring - 3.192e-5).abs() < 1e-8);
        let rhd = predict_allreduce_time(AlgorithmId::RhdRsa, 1024, 16, &m).unwrap();
        assert!(rel(rhd, 8e-6 + 1.92e-6) < 1e-12);
        for algo in [AlgorithmId::Flat, AlgorithmId::RingRsa, AlgorithmId::RhdRsa, AlgorithmId::Auto] {
            assert_eq!(predict_allreduce_time(algo, 1 << 20, 1, &m).unwrap(), 0.0);
        }
        let flat = predict_allreduce_time(AlgorithmId::Flat, 100, 4, &m).unwrap();
        assert!(rel(flat, 6e-6 + 600.0 * 1e-9) < 1e-12);
    }

    #[test]
    fn auto_switches_at_128k() {
        let m = unit_costs();
        let p = 8;
        let small = 128 * 1024 - 1;
        assert_eq!(
            predict_allreduce_time(AlgorithmId::Auto, small, p, &m).unwrap(),
            predict_allreduce_time(AlgorithmId::RhdRsa, small, p, &m).unwrap()
        );
        assert_eq!(
            predict_allreduce_time(AlgorithmId::Auto, small + 1, p, &m).unwrap(),
            predict_allreduce_time(AlgorithmId::RingRsa, small + 1, p, &m).unwrap()
        );
    }

    #[test]
    fn rhd_beats_ring_for_small_messages() {
        for alpha in [1e-7, 1e-6, 1e-5, 1e-4] {
            let m = CostModel::new(alpha, 1e-9, 1e-10).unwrap();
            for p in [4, 8, 16, 64] {
                let r = predict_allreduce_time(AlgorithmId::RingRsa, 64, p, &m).unwrap();
                let h = predict_allreduce_time(AlgorithmId::RhdRsa, 64, p, &m).unwrap();
                assert!(h < r, "alpha={alpha} p={p}");
            }
        }
    }

    #[test]
    fn single_rank_is_ideal() {
        for model in models() {
            for s in Strategy::ALL {
                let r = simulate_training_step(&model, 1, s, &CostModel::default(), &FusionConfig::default()).unwrap();
                assert_eq!(r.efficiency, 1.0);
                assert_eq!(r.images_per_sec, r.ideal_images_per_sec);
            }
        }
    }

    #[test]
    fn free_network_is_ideal() {
        for model in models() {
            for s in Strategy::ALL {
                for p in [2, 16, 128] {
                    let r = simulate_training_step(&model, p, s, &CostModel::free(), &FusionConfig::default()).unwrap();
                    assert_eq!(r.efficiency, 1.0, "{} {s} {p}", model.name);
                }
            }
        }
    }

    fn eff(model: &str, p: usize, s: Strategy, m: &CostModel) -> f64 {
        simulate_training_step(&builtin_model(model).unwrap(), p, s, m, &FusionConfig::default())
            .unwrap()
            .efficiency
    }

    #[test]
    fn model_size_ordering_at_128() {
        let m = CostModel::default();
        let s = Strategy::HorovodAllreduce;
        let (a, b, c) = (eff("mobilenet_like", 128, s, &m), eff("resnet50_like", 128, s, &m), eff("nasnet_like", 128, s, &m));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn single_channel_ps_is_worst_for_nasnet() {
        let m = CostModel::default();
        let ps1 = eff("nasnet_like", 128, Strategy::PsPull, &m);
        assert!(ps1 < eff("nasnet_like", 128, Strategy::PsPull, &m.with_channels(8)));
        for s in [Strategy::HorovodAllreduce, Strategy::BaiduRing] {
            assert!(ps1 < eff("nasnet_like", 128, s, &m), "{s}");
        }
    }

    #[test]
    fn throughput_grows_with_p() {
        let rows = sweep(&models(), &Strategy::ALL, &[1, 2, 4, 8], &CostModel::default(), &FusionConfig::default()).unwrap();
        for w in rows.windows(2) {
            if w[0].model == w[1].model && w[0].strategy == w[1].strategy {
                assert!(w[1].report.images_per_sec >= w[0].report.images_per_sec, "{w:?}");
            }
        }
    }

    #[test]
    fn costlier_latency_never_helps() {
        let base = CostModel::default();
        let doubled = CostModel {
            alpha: base.alpha * 2.0,
            ..base
        };
        for model in models() {
            for s in Strategy::ALL {
                for p in [2, 3, 8, 32, 128] {
                    let f = FusionConfig::default();
                    let a = simulate_training_step(&model, p, s, &base, &f).unwrap().efficiency;
                    let b = simulate_training_step(&model, p, s, &doubled, &f).unwrap().efficiency;
                    assert!(b <= a, "{} {s} {p}", model.name);
                }
            }
        }
    }

    #[test]
    fn more_compute_never_hurts_efficiency() {
        for model in models() {
            let big = model.scale_compute(10.0);
            for s in Strategy::ALL {
                for p in [2, 16, 128] {
                    let f = FusionConfig::default();
                    let m = CostModel::default();
                    let a = simulate_training_step(&model, p, s, &m, &f).unwrap().efficiency;
                    let b = simulate_training_step(&big, p, s, &m, &f).unwrap().efficiency;
                    assert!(b >= a, "{} {s} {p}", model.name);
                }
            }
        }
    }

    #[test]
    fn ideal_formula_and_bounds() {
        let rows = sweep(&models(), &Strategy::ALL, &[1, 3, 16, 128], &CostModel::default(), &FusionConfig::default()).unwrap();
        for r in &rows {
            let single = builtin_model(&r.model).unwrap().single_images_per_sec();
            assert!(rel(r.report.ideal_images_per_sec, single * r.p as f64) < 1e-9);
            assert!(r.report.efficiency > 0.0 && r.report.efficiency <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn parallel_and_sequential_sweeps_agree() {
        let args = (models(), Strategy::ALL, [1, 2, 64]);
        let a = sweep(&args.0, &args.1, &args.2, &CostModel::default(), &FusionConfig::default()).unwrap();
        let b = sweep_sequential(&args.0, &args.1, &args.2, &CostModel::default(), &FusionConfig::default()).unwrap();
        assert_eq!(sweep_csv(&a), sweep_csv(&b));
        assert!(sweep_csv(&a).starts_with(SWEEP_HEADER));
        assert_eq!(sweep_csv(&a).lines().count(), 1 + 3 * 3 * 3);
    }

    #[test]
    fn builtins_are_well_formed() {
        let ms = models();
        for m in &ms {
            m.validate().unwrap();
            assert_eq!(m.batch_size, 64);
        }
        let bytes: Vec<f64> = ms.iter().map(|m| m.total_grad_bytes() as f64).collect();
        assert!((bytes[1] / bytes[0] - 6.0).abs() < 0.5);
        assert!((bytes[2] / bytes[0] - 21.0).abs() < 1.0);
        let ips: Vec<f64> = ms.iter().map(ModelSpec::single_images_per_sec).collect();
        assert!(ips[0] > ips[1] && ips[1] > ips[2]);
    }

    #[test]
    fn json_roundtrip_and_errors() {
        let m = CostModel::default();
        assert_eq!(CostModel::from_json(&serde_json::to_string(&m).unwrap()).unwrap(), m);
        assert!(CostModel::from_json(r#"{"alpha": -1}"#).is_err());
        assert!(CostModel::from_json(r#"{"parallel_channels": 0}"#).is_err());
        let spec = builtin_model("mobilenet_like").unwrap();
        assert_eq!(ModelSpec::from_json(&serde_json::to_string(&spec).unwrap()).unwrap(), spec);
        assert!(ModelSpec::resolve("no_such_model").is_err());
        assert!("bogus".parse::<Strategy>().is_err());
        assert_eq!("ps_pull".parse::<Strategy>().unwrap(), Strategy::PsPull);
    }

    #[test]
    fn print_calibration() {
        let m = CostModel::default();
        for name in BUILTIN_MODELS {
            for s in Strategy::ALL {
                for ch in [1, 8] {
                    eprintln!("{name} {s} ch{ch} p128 eff={:.3}", eff(name, 128, s, &m.with_channels(ch)));
                }
            }
        }
    }
}

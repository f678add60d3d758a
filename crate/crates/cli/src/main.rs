//! `collectium`: Allreduce microbenchmarks, synthetic training benchmarks and
//! cost-model sweeps over a simulated network or TCP sockets.
//!
//! Exit codes: 0 success, 2 configuration error, 3 transport error,
//! 4 invariant violation detected during the run.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use collectium::bench::{self, BenchConfig, TransportKind};
use collectium::Error;
use serde_json::{Map, Value};

#[derive(Debug, Parser)]
#[command(name = "collectium", version, about)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,

    /// microbench | train | sweep
    #[arg(long)]
    mode: Option<String>,
    /// sim | socket
    #[arg(long)]
    transport: Option<String>,
    /// flat | ring_rsa | rhd_rsa | auto
    #[arg(long)]
    algo: Option<String>,
    #[arg(long)]
    switch_bytes: Option<u64>,
    #[arg(long)]
    fusion_threshold: Option<u64>,
    /// horovod_allreduce | baidu_ring | ps_pull
    #[arg(long)]
    strategy: Option<String>,
    /// Built-in model name or path to a JSON model spec.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    p: Option<u64>,
    #[arg(long)]
    warmup_iters: Option<u64>,
    #[arg(long)]
    timed_iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path; `{rank}` expands to the rank. Default: stdout.
    #[arg(long)]
    output: Option<String>,
    /// float32 | float64
    #[arg(long)]
    dtype: Option<String>,
    #[arg(long)]
    min_bytes: Option<u64>,
    #[arg(long)]
    max_bytes: Option<u64>,
    #[arg(long)]
    proxy_elements: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// no_cache | lazy_cache | intercept_cache
    #[arg(long)]
    cache_policy: Option<String>,
    /// Comma-separated models for sweep mode.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    /// Comma-separated strategies for sweep mode.
    #[arg(long, value_delimiter = ',')]
    strategies: Option<Vec<String>>,
    /// Comma-separated group sizes for sweep mode.
    #[arg(long, value_delimiter = ',')]
    p_list: Option<Vec<u64>>,
    #[arg(long)]
    hostfile: Option<String>,
    /// This process's rank; falls back to COLLECTIUM_RANK.
    #[arg(long)]
    rank: Option<u64>,
    #[arg(long)]
    timeout_s: Option<f64>,

    /// Cost model: seconds per message.
    #[arg(long)]
    alpha: Option<f64>,
    /// Cost model: seconds per byte.
    #[arg(long)]
    beta: Option<f64>,
    /// Cost model: seconds per reduced byte.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    driver_query_delay: Option<f64>,
    #[arg(long)]
    parallel_channels: Option<u64>,
}

impl Cli {
    /// Flag values as config keys, skipping unset flags.
    fn overrides(&self) -> (Map<String, Value>, Map<String, Value>) {
        let mut top = Map::new();
        let mut put = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                top.insert(key.to_string(), v);
            }
        };
        let s = |v: &Option<String>| v.clone().map(Value::from);
        put("mode", s(&self.mode));
        put("transport", s(&self.transport));
        put("algo", s(&self.algo));
        put("switch_bytes", self.switch_bytes.map(Value::from));
        put("fusion_threshold", self.fusion_threshold.map(Value::from));
        put("strategy", s(&self.strategy));
        put("model", s(&self.model));
        put("p", self.p.map(Value::from));
        put("warmup_iters", self.warmup_iters.map(Value::from));
        put("timed_iters", self.timed_iters.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("output", s(&self.output));
        put("dtype", s(&self.dtype));
        put("min_bytes", self.min_bytes.map(Value::from));
        put("max_bytes", self.max_bytes.map(Value::from));
        put("proxy_elements", self.proxy_elements.map(Value::from));
        put("learning_rate", self.learning_rate.map(Value::from));
        put("cache_policy", s(&self.cache_policy));
        put("models", self.models.clone().map(Value::from));
        put("strategies", self.strategies.clone().map(Value::from));
        put("p_list", self.p_list.clone().map(Value::from));
        put("hostfile", s(&self.hostfile));
        put("rank", self.rank.map(Value::from));
        put("timeout_s", self.timeout_s.map(Value::from));

        let mut cost = Map::new();
        for (key, v) in [
            ("alpha", self.alpha.map(Value::from)),
            ("beta", self.beta.map(Value::from)),
            ("gamma", self.gamma.map(Value::from)),
            ("driver_query_delay", self.driver_query_delay.map(Value::from)),
            ("parallel_channels", self.parallel_channels.map(Value::from)),
        ] {
            if let Some(v) = v {
                cost.insert(key.into(), v);
            }
        }
        (top, cost)
    }

    fn resolve(&self) -> Result<BenchConfig, Error> {
        let base = match &self.config {
            Some(path) => BenchConfig::load(path)?,
            None => BenchConfig::default(),
        };
        let mut value = serde_json::to_value(&base).expect("config serializes");
        let (top, cost) = self.overrides();
        let obj = value.as_object_mut().expect("config is an object");
        for (k, v) in top {
            obj.insert(k, v);
        }
        if let Some(Value::Object(c)) = obj.get_mut("cost") {
            c.extend(cost);
        }
        let cfg: BenchConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        e if e.is_transport() => 3,
        Error::StalledProducer(_) | Error::Protocol(_) => 3,
        _ => 4,
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let mut cfg = cli.resolve()?;
    let rank = match cfg.transport {
        TransportKind::Socket => {
            let r = bench::resolve_rank(cfg.rank)?;
            cfg.rank = Some(r);
            r
        }
        TransportKind::Sim => 0,
    };
    let out = bench::run(&cfg)?;
    match cfg.output_for(rank) {
        Some(path) => std::fs::write(&path, &out.csv).map_err(|e| Error::Config(format!("{path}: {e}")))?,
        None if rank == 0 => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(out.csv.as_bytes())?;
            stdout.flush()?;
        }
        None => {}
    }
    if let Some(report) = out.registry {
        eprintln!("registry: {}", serde_json::to_string(&report).expect("stats serialize"));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("collectium: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Runs the `collectium` binary as separate processes.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output};
use std::time::Instant;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_collectium"));
    c.env_remove("COLLECTIUM_RANK").env_remove("COLLECTIUM_NPROCS");
    c
}

fn hostfile(dir: &Path, n: usize) -> PathBuf {
    let listeners: Vec<TcpListener> = (0..n).map(|_| TcpListener::bind("127.0.0.1:0").unwrap()).collect();
    let text: String = listeners
        .iter()
        .enumerate()
        .map(|(r, l)| format!("{r} 127.0.0.1 {}\n", l.local_addr().unwrap().port()))
        .collect();
    let path = dir.join("hosts");
    std::fs::write(&path, text).unwrap();
    path
}

fn train_args(c: &mut Command, hosts: &Path, out: &Path) {
    c.args(["--mode", "train", "--transport", "socket", "--model", "mobilenet_like"])
        .args(["--timed-iters", "3", "--warmup-iters", "1", "--proxy-elements", "64", "--timeout-s", "20"])
        .arg("--hostfile")
        .arg(hosts)
        .arg("--output")
        .arg(out);
}

fn wait_all(children: Vec<Child>) -> Vec<Output> {
    children.into_iter().map(|c| c.wait_with_output().unwrap()).collect()
}

fn read_pair(dir: &Path) -> (String, String) {
    let r = |i: usize| std::fs::read_to_string(dir.join(format!("out-{i}.csv"))).unwrap();
    (r(0), r(1))
}

#[test]
fn two_process_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let hosts = hostfile(dir.path(), 2);
    let children = (0..2)
        .map(|r| {
            let mut c = bin();
            train_args(&mut c, &hosts, &dir.path().join("out-{rank}.csv"));
            c.args(["--rank", &r.to_string()]).spawn().unwrap()
        })
        .collect();
    for out in wait_all(children) {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let (a, b) = read_pair(dir.path());
    assert_eq!(a, b);
    assert!(a.starts_with("model,strategy,p,images_per_sec,ideal,efficiency,grad_digest\n"));
}

#[test]
fn rank_from_environment_matches_flag() {
    let run = |use_env: bool| {
        let dir = tempfile::tempdir().unwrap();
        let hosts = hostfile(dir.path(), 2);
        let children = (0..2)
            .map(|r| {
                let mut c = bin();
                train_args(&mut c, &hosts, &dir.path().join("out-{rank}.csv"));
                if use_env {
                    c.env("COLLECTIUM_RANK", r.to_string()).env("COLLECTIUM_NPROCS", "2");
                } else {
                    c.args(["--rank", &r.to_string()]);
                }
                c.spawn().unwrap()
            })
            .collect();
        for out in wait_all(children) {
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        }
        read_pair(dir.path())
    };
    assert_eq!(run(true), run(false));
}

#[test]
fn missing_rank_times_out() {
    let dir = tempfile::tempdir().unwrap();
    let hosts = hostfile(dir.path(), 2);
    let start = Instant::now();
    let out = bin()
        .args(["--mode", "train", "--transport", "socket", "--rank", "0", "--timeout-s", "1"])
        .arg("--hostfile")
        .arg(&hosts)
        .output()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(secs < 10.0, "took {secs} s");
    assert!(String::from_utf8_lossy(&out.stderr).contains("timed out"));
}

#[test]
fn nprocs_mismatch_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let hosts = hostfile(dir.path(), 2);
    let out = bin()
        .args(["--transport", "socket"])
        .arg("--hostfile")
        .arg(&hosts)
        .env("COLLECTIUM_RANK", "0")
        .env("COLLECTIUM_NPROCS", "3")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"mode": "sweep", "models": ["resnet50_like"], "p_list": [1, 16], "strategies": ["ps_pull"]}"#)
        .unwrap();
    let out = bin().arg("--config").arg(&cfg).args(["--p-list", "1,2,4"]).output().unwrap();
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(3).unwrap().starts_with("resnet50_like,ps_pull,4,"));
}

#[test]
fn config_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{\n  \"mode\": \"train\",\n  \"timed_itres\": 3\n}\n").unwrap();
    let out = bin().arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("timed_itres") && err.contains("line 3"), "{err}");

    let out = bin().args(["--timed-iters", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sim_output_is_reproducible() {
    let run = || {
        bin()
            .args(["--mode", "microbench", "--p", "5", "--max-bytes", "65536", "--seed", "3"])
            .output()
            .unwrap()
            .stdout
    };
    let a = run();
    assert!(!a.is_empty());
    assert_eq!(a, run());
}

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::PathBuf;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

use converse_core::catalog::load_catalog;
use converse_core::env::EpisodeConfig;

const BIN: &str = env!("CARGO_BIN_EXE_converse-mcts");

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    /// A minimal catalog plus a small config pointing at it.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let w = Work { dir };
        let out = w.run(&["generate", "--seed", "1", "--users", "8", "--items", "30", "--types", "4", "--values-per-type", "3", "--values-per-item", "4", "--interactions", "5", "--out", "cat.tsv"]);
        assert!(out.status.success());
        std::fs::write(
            w.path("small.toml"),
            "seed = 3\n[catalog]\npath = \"cat.tsv\"\n[encoder]\nd = 8\nheads = 2\n[train]\nsteps = 12\nbatch_size = 8\nwarmup = 8\nlr = 0.001\neval_every = 6\n[planner]\nn = 4\n",
        )
        .unwrap();
        w
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(BIN);
        c.current_dir(self.dir.path()).args(args).env_remove("CONVERSE_MCTS_LOG");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn read(&self, p: &str) -> String {
        std::fs::read_to_string(self.path(p)).unwrap()
    }
}

fn jsonl(text: &str) -> Vec<serde_json::Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn generate_is_deterministic_and_loads_back() {
    let w = Work::new();
    w.ok(&["generate", "--seed", "1", "--users", "8", "--items", "30", "--types", "4", "--values-per-type", "3", "--values-per-item", "4", "--interactions", "5", "--out", "again.tsv"]);
    assert_eq!(w.read("cat.tsv"), w.read("again.tsv"));
    let c = load_catalog(&w.path("cat.tsv")).unwrap();
    assert_eq!((c.n_users(), c.n_items(), c.n_values()), (8, 30, 12));
    w.ok(&["generate", "--seed", "2", "--out", "other.tsv"]);
    assert_ne!(w.read("cat.tsv"), w.read("other.tsv"));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let w = Work::new();
    let out = w.run(&["generate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    let out = w.run(&["--config", "small.toml", "eval", "--policy", "oracle"]);
    assert_eq!(out.status.code(), Some(2));
    let out = w.run(&["train", "--mode", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_print_one_line() {
    let w = Work::new();
    let out = w.run(&["--config", "small.toml", "eval", "--policy", "agent"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    std::fs::write(w.path("bad.toml"), "sead = 1\n").unwrap();
    let out = w.run(&["--config", "bad.toml", "train"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn smoke_train_is_fast() {
    let w = Work::new();
    let t = Instant::now();
    w.ok(&["--config", "small.toml", "--out", "smoke", "train", "--steps", "1", "--rollouts", "1"]);
    assert!(t.elapsed() < Duration::from_secs(60));
    for f in ["metrics.jsonl", "timing.jsonl", "final.ckpt", "best.ckpt", "config.toml"] {
        assert!(w.path("smoke").join(f).exists(), "{f}");
    }
    assert_eq!(jsonl(&w.read("smoke/metrics.jsonl")).len(), 1);
}

#[test]
fn sapient_e_mode_is_audited_and_resume_continues() {
    let w = Work::new();
    w.ok(&["--config", "small.toml", "--out", "e", "train", "--mode", "sapient-e"]);
    let recs = jsonl(&w.read("e/metrics.jsonl"));
    assert_eq!(recs.len(), 12);
    assert!(recs.iter().all(|r| r["mode"] == "sapient-e" && r["trajectories_stored"] == 4));
    assert!(recs.iter().filter(|r| !r["losses"].is_null()).all(|r| r["trajectories_ranked"] == 4 && !r["losses"]["listwise"].is_null()));

    w.ok(&["--config", "small.toml", "--out", "e2", "train", "--mode", "sapient-e", "--resume", "e/final.ckpt", "--steps", "3"]);
    let steps: Vec<u64> = jsonl(&w.read("e2/metrics.jsonl")).iter().map(|r| r["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![13, 14, 15]);
}

#[test]
fn training_and_eval_are_deterministic() {
    let w = Work::new();
    w.ok(&["--config", "small.toml", "--out", "a", "train"]);
    w.ok(&["--config", "small.toml", "--out", "b", "train"]);
    assert_eq!(w.read("a/metrics.jsonl"), w.read("b/metrics.jsonl"));
    assert_eq!(std::fs::read(w.path("a/final.ckpt")).unwrap(), std::fs::read(w.path("b/final.ckpt")).unwrap());

    let first = w.ok(&["--config", "small.toml", "--out", "ev1", "eval", "--checkpoint", "a/best.ckpt"]);
    let second = w.ok(&["--config", "small.toml", "--out", "ev2", "eval", "--checkpoint", "a/best.ckpt"]);
    assert_eq!(first, second);
    assert_eq!(w.read("ev1/episodes.jsonl"), w.read("ev2/episodes.jsonl"));
    let line = &jsonl(&w.read("ev1/eval.jsonl"))[0];
    assert_eq!(line["policy"], "agent");
    let sr = line["report"]["sr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&sr));
}

#[test]
fn baselines_need_no_checkpoint() {
    let w = Work::new();
    let out = w.ok(&["--config", "small.toml", "--out", "g", "eval", "--policy", "abs-greedy", "--split", "valid"]);
    assert!(out.contains("abs-greedy"));
    let out = w.ok(&["--config", "small.toml", "--out", "m", "eval", "--policy", "max-entropy"]);
    assert!(out.contains("max-entropy"));
    let episodes = jsonl(&w.read("m/episodes.jsonl"));
    assert!(episodes.iter().all(|e| e["trace"][0]["kind"] == "seed"));
}

#[test]
fn emit_plots_writes_both_sweeps() {
    let w = Work::new();
    w.ok(&["--config", "small.toml", "--out", "p", "eval", "--policy", "abs-greedy", "--emit-plots", "--grid-w", "0,1.5", "--grid-n", "1,2", "--steps", "2"]);
    let by_w = w.read("p/sr_vs_w.tsv");
    let by_n = w.read("p/sr_vs_n.tsv");
    assert_eq!(by_w.lines().next(), Some("w\tsr\tat\thdcg"));
    assert_eq!(by_w.lines().count(), 3);
    assert_eq!(by_n.lines().count(), 3);
    assert!(by_n.lines().nth(2).unwrap().starts_with("2\t"));
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace().find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('='))).unwrap()
}

#[test]
fn plan_dump_matches_recomputed_means() {
    let w = Work::new();
    w.ok(&["--config", "small.toml", "--out", "a", "train"]);
    let dump = w.ok(&["--config", "small.toml", "plan", "--checkpoint", "a/best.ckpt", "--user", "2", "--rollouts", "9"]);
    let trajectories: Vec<&str> = dump.lines().filter(|l| l.starts_with("trajectory=")).collect();
    assert_eq!(trajectories.len(), 9);
    let root = dump.lines().find(|l| l.starts_with("node=0 ")).unwrap();
    assert_eq!(field(root, "V"), "9");

    // independent discounted tail sums over the listed rewards
    let gamma = EpisodeConfig::default().gamma;
    let mut returns: HashMap<(usize, char), Vec<f64>> = HashMap::new();
    for t in &trajectories {
        let rewards: Vec<f64> = field(t, "rewards").split(',').map(|r| r.parse().unwrap()).collect();
        let edges: Vec<(usize, char)> = field(t, "edges")
            .split(',')
            .map(|e| {
                let (n, k) = e.split_once(':').unwrap();
                (n.parse().unwrap(), k.chars().next().unwrap())
            })
            .collect();
        // rollout steps below the leaf carry rewards but no tree edge
        assert!(!edges.is_empty() && edges.len() <= rewards.len());
        for (k, edge) in edges.into_iter().enumerate() {
            let tail: f64 = rewards[k..].iter().enumerate().map(|(j, r)| gamma.powi(j as i32) * r).sum();
            returns.entry(edge).or_default().push(tail);
        }
    }
    assert!(!returns.is_empty());
    for ((node, kind), rs) in returns {
        let line = dump.lines().find(|l| l.starts_with(&format!("node={node} "))).unwrap();
        let (q_key, n_key) = if kind == 'A' { ("q_ask", "n_ask") } else { ("q_rec", "n_rec") };
        assert_eq!(field(line, n_key).parse::<usize>().unwrap(), rs.len());
        let q: f64 = field(line, q_key).parse().unwrap();
        let mean = rs.iter().sum::<f64>() / rs.len() as f64;
        // the dump prints six decimals
        assert!((q - mean).abs() < 1e-6, "node {node} {kind}: {q} vs {mean}");
    }
}

#[test]
fn log_level_comes_from_the_environment() {
    let w = Work::new();
    let quiet = w.run(&["--config", "small.toml", "--out", "q", "train", "--steps", "1"]);
    assert!(!String::from_utf8_lossy(&quiet.stderr).contains("INFO"));
    let loud = w.cmd(&["--config", "small.toml", "--out", "l", "train", "--steps", "1"]).env("CONVERSE_MCTS_LOG", "info").output().unwrap();
    assert!(String::from_utf8_lossy(&loud.stderr).contains("INFO"));
}

fn http_get(addr: &str, path: &str) -> String {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).unwrap();
    buf
}

#[test]
fn serve_exposes_checkpoints_and_ui() {
    let w = Work::new();
    w.ok(&["--config", "small.toml", "--out", "a", "train", "--steps", "2"]);
    std::fs::create_dir(w.path("ui")).unwrap();
    std::fs::write(w.path("ui/index.html"), "<p>client</p>").unwrap();
    let mut child = w
        .cmd(&["--config", "small.toml", "serve", "--checkpoint", "a/best.ckpt", "--addr", "127.0.0.1:0", "--ui", "ui"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();
    let cks = http_get(&addr, "/checkpoints");
    let cats = http_get(&addr, "/catalogs");
    let ui = http_get(&addr, "/index.html");
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(cks.starts_with("HTTP/1.1 200") && cks.contains("\"id\":\"best\""), "{cks}");
    assert!(cats.contains("\"id\":\"default\""));
    assert!(ui.contains("<p>client</p>"));
}

#[test]
fn serve_rejects_a_foreign_checkpoint() {
    let w = Work::new();
    w.ok(&["--config", "small.toml", "--out", "a", "train", "--steps", "1"]);
    let out = w.run(&["serve", "--checkpoint", "a/final.ckpt", "--addr", "127.0.0.1:0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

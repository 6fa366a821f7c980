use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn nora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nora"))
        .args(args)
        .env_remove("NORA_WORKERS")
        .output()
        .expect("binary runs")
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn kinds(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("record.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            v["kind"].as_str().unwrap().to_string()
        })
        .collect()
}

/// Python child for the external-target protocol that exits once a shared
/// counter passes `limit` evaluations.
fn dying_target(dir: &Path, limit: usize) -> String {
    let script = dir.join("child.py");
    fs::write(
        &script,
        format!(
            r#"
import json, os, signal, sys
signal.signal(signal.SIGPIPE, signal.SIG_DFL)
counter = os.path.join(os.path.dirname(os.path.abspath(__file__)), "count")
print(json.dumps({{"protocol": "nora-target/1", "dim": 2}}), flush=True)
for line in sys.stdin:
    n = int(open(counter).read()) if os.path.exists(counter) else 0
    open(counter, "w").write(str(n + 1))
    if n >= {limit}:
        sys.exit(1)
    req = json.loads(line)
    print(json.dumps({{"id": req["id"], "logp": -sum(v * v for v in req["x"]) * 4}}), flush=True)
"#
        ),
    )
    .unwrap();
    format!("python3 {}", script.display())
}

#[test]
fn run_writes_every_output_and_spends_the_budget() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = nora(&[
        "run",
        "--target",
        "ring",
        "--budget",
        "14",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
        "--dump-deadpoints",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["status"], "ok");
    assert_eq!(s["n_evals"], 14);
    assert!(s["kl"].as_f64().unwrap() >= 0.0);
    for phase in ["fit", "acquisition", "evaluation", "metrics", "total"] {
        assert!(s["wall_clock_s"][phase].as_f64().unwrap() >= 0.0);
    }
    let k = kinds(&out);
    assert_eq!(k.first().unwrap(), "plan");
    assert_eq!(k.last().unwrap(), "final");
    assert!(k[1..k.len() - 1].iter().all(|x| x == "iteration"));
    let chain = fs::read_to_string(out.join("chain.txt")).unwrap();
    assert!(chain.starts_with("# weight log_target x1 x2"));
    assert!(out.join("surrogate.json").is_file());
    assert!(out.join("deadpoints/final.txt").is_file());
    assert!(out.join("deadpoints/iter_0001.txt").is_file());
}

#[test]
fn seqopt_summary_has_the_same_schema() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (strategy, out) in [("nora", &a), ("seqopt", &b)] {
        let o = nora(&[
            "run",
            "--target",
            "curved_degeneracy",
            "--budget",
            "10",
            "--strategy",
            strategy,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    let keys = |v: Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    let (sa, sb) = (summary(&a), summary(&b));
    assert_eq!(sb["strategy"], "seqopt");
    assert_eq!(sb["n_evals"], 10);
    assert_eq!(keys(sa), keys(sb));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"schema": "nora-run/1", "target": "gaussian_random:2:3", "budget": 30, "seed": 5}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = nora(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--budget",
        "9",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["n_evals"], 9);
    assert_eq!(s["seed"], 5);
    assert_eq!(s["target"], "gaussian_random:2:3");
}

#[test]
fn invalid_input_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    assert_eq!(
        nora(&["run", "--budget", "10", "--out", out]).status.code(),
        Some(2)
    );
    assert_eq!(
        nora(&["run", "--target", "nope", "--budget", "10", "--out", out])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        nora(&["run", "--target", "ring", "--budget", "2", "--out", out])
            .status
            .code(),
        Some(2)
    );

    let cfg = dir.path().join("bad.json");
    fs::write(
        &cfg,
        r#"{"schema": "nora-run/1", "target": "ring", "budget": 10, "budgte": 3}"#,
    )
    .unwrap();
    let o = nora(&["run", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("budgte"));

    let bench = dir.path().join("bench.json");
    fs::write(
        &bench,
        r#"{"schema": "nora-bench/1", "runs": [{"target": "ring", "budget": 10}], "seeds": []}"#,
    )
    .unwrap();
    assert_eq!(
        nora(&["bench", "--config", bench.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );

    let chain = dir.path().join("chain.txt");
    fs::write(&chain, "1 0 0.5\n1 0 0.5 0.2\n").unwrap();
    assert_eq!(
        nora(&["kl", chain.to_str().unwrap(), "ring"]).status.code(),
        Some(2)
    );
    assert_eq!(
        nora(&["kl", "/nonexistent/chain.txt", "ring"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn runtime_failure_keeps_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let config = serde_json::json!({
        "schema": "nora-run/1",
        "target": {"external": {"command": dying_target(dir.path(), 10), "lower": [-1, -1], "upper": [1, 1]}},
        "budget": 30,
    });
    fs::write(&cfg, config.to_string()).unwrap();
    let out = dir.path().join("out");
    let o = nora(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let s = summary(&out);
    assert_eq!(s["status"], "failed");
    assert!(!s["error"].as_str().unwrap().is_empty());
    let k = kinds(&out);
    assert_eq!(k[0], "plan");
    assert!(k.len() >= 2, "initial design recorded");
    assert!(!k.contains(&"final".to_string()));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let outs: Vec<_> = (0..2).map(|i| dir.path().join(format!("o{i}"))).collect();
    for out in &outs {
        let o = nora(&[
            "run",
            "--target",
            "gaussian_random:2:1",
            "--budget",
            "12",
            "--seed",
            "7",
            "--workers",
            "2",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    for f in ["record.jsonl", "chain.txt", "surrogate.json"] {
        assert_eq!(
            fs::read(outs[0].join(f)).unwrap(),
            fs::read(outs[1].join(f)).unwrap(),
            "{f}"
        );
    }
}

fn kl_lines(args: &[&str]) -> Vec<(String, f64)> {
    let o = nora(args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| {
            let mut it = l.split_whitespace();
            (
                it.next().unwrap().to_string(),
                it.next().unwrap().parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn kl_command() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for (seed, out) in [("1", &a), ("2", &b)] {
        let o = nora(&[
            "run",
            "--target",
            "ring",
            "--budget",
            "16",
            "--seed",
            seed,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    let ca = a.join("chain.txt");
    let ca = ca.to_str().unwrap();
    let cb = b.join("chain.txt");

    let own = kl_lines(&["kl", ca, ca]);
    assert_eq!(own.len(), 4);
    assert!(own.iter().all(|(_, v)| v.abs() < 1e-12), "{own:?}");

    // Same truth sample as the run, so the value is recomputed exactly.
    let vs_truth = kl_lines(&["kl", ca, "ring"]);
    let s = summary(&a);
    assert_eq!(vs_truth[0].0, "kl_symmetric_mc");
    assert!((vs_truth[0].1 - s["kl"].as_f64().unwrap()).abs() < 1e-12);
    assert!((vs_truth[3].1 - s["kl_gaussian"].as_f64().unwrap()).abs() < 1e-12);

    let pair = kl_lines(&["kl", ca, cb.to_str().unwrap()]);
    assert!(pair[0].1 > 0.0);

    // Without a surrogate snapshot only the Gaussian approximation is available.
    let lone = dir.path().join("lone.txt");
    fs::copy(&cb, &lone).unwrap();
    let only = kl_lines(&["kl", lone.to_str().unwrap(), ca]);
    assert_eq!(only.len(), 1);
    assert_eq!(only[0].0, "kl_symmetric_gaussian");
}

#[test]
fn bench_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("b{i}"));
        let spec = serde_json::json!({
            "schema": "nora-bench/1",
            "runs": [
                {"label": "nora", "target": "curved_degeneracy", "budget": 12},
                {"label": "seqopt", "target": "curved_degeneracy", "budget": 12, "strategy": "seqopt"},
            ],
            "seeds": [0, 1, 2],
            "jobs": 2,
            "out": out,
        });
        let cfg = dir.path().join(format!("bench{i}.json"));
        fs::write(&cfg, spec.to_string()).unwrap();
        let o = nora(&["bench", "--config", cfg.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let kl = fs::read_to_string(out.join("kl_nora.csv")).unwrap();
        assert!(kl.starts_with("n_evals,q25,q50,q75\n"));
        assert!(kl.lines().last().unwrap().starts_with("12,"));
        let timing = fs::read_to_string(out.join("bench_timing.csv")).unwrap();
        assert_eq!(timing.lines().count(), 3);
        texts.push(
            [
                "bench_kl.csv",
                "bench_runs.csv",
                "kl_nora.csv",
                "kl_seqopt.csv",
            ]
            .map(|f| fs::read_to_string(out.join(f)).unwrap()),
        );
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn bench_fails_when_most_runs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let spec = serde_json::json!({
        "schema": "nora-bench/1",
        "runs": [{"target": {"external": {"command": "exit 0", "lower": [0, 0], "upper": [1, 1]}}, "budget": 8}],
        "seeds": [0, 1],
        "out": dir.path().join("out"),
    });
    let cfg = dir.path().join("bench.json");
    fs::write(&cfg, spec.to_string()).unwrap();
    let o = nora(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let runs = fs::read_to_string(dir.path().join("out/bench_runs.csv")).unwrap();
    assert_eq!(runs.matches(",failed,").count(), 2);
}

#[test]
fn targets_list() {
    let o = nora(&["targets", "list"]);
    let text = String::from_utf8(o.stdout).unwrap();
    for name in [
        "curved_degeneracy",
        "ring",
        "himmelblau2d",
        "himmelblau4d",
        "gaussian_random",
    ] {
        assert!(text.contains(name));
    }
}

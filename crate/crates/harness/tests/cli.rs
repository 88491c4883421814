use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tlgrpo_harness::commands::Dataset;
use tlgrpo_harness::data::RunLog;
use tlgrpo_harness::EvalReport;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tlgrpo"));
    cmd.env("RUST_LOG", "error");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let text = format!(
        r#"
[train]
algorithm = "tl-grpo"
batch_queries = 4
group_size = 4
max_turns = 3
iterations = 3
seed = 5
checkpoint_every = 2

[env]
max_turns = 3
train_queries = 24
eval_queries_per_task = 4
train_tasks = [{{ id = "a", seed = 1, dim = 4 }}, {{ id = "b", seed = 2, dim = 6 }}]
ood_tasks = [{{ id = "c", seed = 3, dim = 4 }}]

[exec]
threads = 2

[paths]
data_dir = "{0}/data"
log_dir = "{0}/logs"
checkpoint_dir = "{0}/ckpt"
"#,
        dir.display()
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    let out = ok(&["synth", "--config", cfg]);
    assert!(out.contains("24 train, 8 in-domain and 4 held-out"), "{out}");
    let data = Dataset::load(&tmp.path().join("data")).unwrap();
    assert_eq!(data.tasks.len(), 3);

    let out = ok(&["train", "--config", cfg]);
    assert!(out.contains("tl-grpo"), "{out}");
    let ckpt = tmp.path().join("ckpt/tl-grpo-final.json");
    assert!(ckpt.exists());
    assert!(tmp.path().join("ckpt/tl-grpo-000002.json").exists());
    let train_log = tmp.path().join("logs/train-tl-grpo.jsonl");
    assert!(ok(&["verify-log", train_log.to_str().unwrap()]).starts_with("ok: train"));

    let out_dir = tmp.path().join("eval");
    let mut logs = Vec::new();
    for (method, protocol) in [("policy", "multi-turn"), ("policy", "st-iter"), ("bo", "multi-turn"), ("random", "multi-turn")] {
        ok(&[
            "eval", "--config", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--split", "all", "--method", method, "--protocol",
            protocol, "--out-dir", out_dir.to_str().unwrap(),
        ]);
        let proto = if method == "policy" { protocol } else { "none" };
        let log = out_dir.join(format!("eval-{method}-{proto}-all.jsonl"));
        let report = out_dir.join(format!("eval-{method}-{proto}-all.report.json"));
        let verified = ok(&["verify-log", log.to_str().unwrap(), "--report", report.to_str().unwrap()]);
        assert!(verified.contains("12 queries"), "{verified}");
        let r: EvalReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(r.per_turn_mean.len(), 4);
        assert!(r.scores.values().all(|s| (0.0..=1.0).contains(s)));
        logs.push(log);
    }

    let csv = tmp.path().join("turns.csv");
    let mut args = vec!["report", "--csv", csv.to_str().unwrap()];
    args.extend(logs.iter().map(|p| p.to_str().unwrap()));
    ok(&args);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * 4);
    assert!(text.starts_with("method,protocol,split,turn,mean_score,mean_history_best,queries"));
}

#[test]
fn tampered_report_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    ok(&["synth", "--config", cfg]);
    ok(&["eval", "--config", cfg, "--method", "random"]);
    let log = tmp.path().join("logs/eval-random-none-in.jsonl");
    let report_path = tmp.path().join("logs/eval-random-none-in.report.json");
    let mut report: EvalReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    report.overall_mean += 1e-9;
    fs::write(&report_path, serde_json::to_string(&report).unwrap()).unwrap();
    let out = run(&["verify-log", log.to_str().unwrap(), "--report", report_path.to_str().unwrap()]);
    assert!(!out.status.success());

    // A corrupt line is tolerated by `report` but rejected by `verify-log`.
    let mut text = fs::read_to_string(&log).unwrap();
    text.push_str("{garbage\n");
    fs::write(&log, text).unwrap();
    let summary = ok(&["report", log.to_str().unwrap()]);
    assert!(summary.contains("skipped 1 corrupt"), "{summary}");
    assert!(!run(&["verify-log", log.to_str().unwrap()]).status.success());
    assert_eq!(RunLog::read(&log).unwrap().skipped, 1);
}

#[test]
fn train_algorithm_flag_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    ok(&["synth", "--config", cfg]);
    let out = ok(&["train", "--config", cfg, "--algorithm", "traj-grpo"]);
    assert!(out.contains("traj-grpo"));
    assert!(tmp.path().join("logs/train-traj-grpo.jsonl").exists());

    assert!(!run(&["train", "--config", cfg, "--algorithm", "ppo"]).status.success());
    let missing = run(&["train", "--config", tmp.path().join("nope.toml").to_str().unwrap()]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.toml"));
    let no_args = run(&["train"]);
    assert!(!no_args.status.success());
    assert!(String::from_utf8_lossy(&no_args.stderr).contains("Usage"));

    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[train]\nbogus = 1\n").unwrap();
    assert!(!run(&["synth", "--config", bad.to_str().unwrap()]).status.success());
}

fn score_files(dir: &Path, gbw: f64) -> (PathBuf, PathBuf) {
    let specs = dir.join("specs.toml");
    fs::write(
        &specs,
        r#"
[[objective]]
name = "gain"
kind = "lower"
target = 79.14
unit = "dB"

[[objective]]
name = "gbw"
kind = "lower"
target = 590000.0
unit = "Hz"

[[objective]]
name = "pw"
kind = "upper"
target = 17.77e-6
unit = "W"

[[objective]]
name = "pm"
kind = "lower"
target = 70.95
unit = "deg"
"#,
    )
    .unwrap();
    let metrics = dir.join("metrics.toml");
    fs::write(&metrics, format!("gain = 64.5553\ngbw = {gbw:?}\npw = 6.29918e-06\npm = 89.5388\n")).unwrap();
    (specs, metrics)
}

fn performance(out: &str) -> f64 {
    out.lines().find_map(|l| l.strip_prefix("P = ")).unwrap().trim().parse().unwrap()
}

#[test]
fn score_example_query() {
    let tmp = tempfile::tempdir().unwrap();
    // The example design misses the bandwidth target by far more than its tolerance.
    let (specs, metrics) = score_files(tmp.path(), 23314.7);
    let out = ok(&["score", "--specs", specs.to_str().unwrap(), "--metrics", metrics.to_str().unwrap()]);
    assert_eq!(performance(&out), 0.0);

    // With bandwidth met, only gain is in its quadratic transition band.
    let (specs, metrics) = score_files(tmp.path(), 600000.0);
    let out = ok(&["score", "--specs", specs.to_str().unwrap(), "--metrics", metrics.to_str().unwrap()]);
    let tau = 0.2 * 79.14;
    let x: f64 = (64.5553 - (79.14 - tau)) / tau;
    let expected = (x * x).powf(0.25);
    assert!((performance(&out) - expected).abs() < 1e-6, "{out}");

    let broken = tmp.path().join("broken.toml");
    fs::write(&broken, "[[objective]]\nname = \"gain\"\nkind = \"lower\"\ntarget = \n").unwrap();
    let out = run(&["score", "--specs", broken.to_str().unwrap(), "--metrics", metrics.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn master_and_worker_serve_over_the_cli() {
    use std::time::Duration;
    use tlgrpo_simnet::SimClient;

    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    ok(&["synth", "--config", cfg.to_str().unwrap()]);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut master = bin().args(["serve-master", "--bind", &addr]).spawn().unwrap();
    let tasks = tmp.path().join("data/tasks.json");
    let mut worker = bin().args(["serve-worker", "--master", &addr, "--tasks", tasks.to_str().unwrap(), "--id", "cli"]).spawn().unwrap();

    let data = Dataset::load(&tmp.path().join("data")).unwrap();
    let q = &data.eval_in[0];
    let task = data.tasks.iter().find(|t| t.task_id == q.task_id).unwrap();
    let client = (0..100)
        .find_map(|_| {
            std::thread::sleep(Duration::from_millis(50));
            SimClient::connect(&addr, Duration::from_secs(20)).ok()
        })
        .unwrap();
    let remote = client.submit(&q.task_id, tlgrpo_simnet::protocol::variables_from_params(&q.initial_params)).unwrap();
    let local = task.simulate(&tlgrpo_core::surrogate::ActionVector(q.initial_params.clone())).unwrap();
    assert_eq!(remote, local);

    client.shutdown_master().unwrap();
    assert!(master.wait().unwrap().success());
    assert!(worker.wait().unwrap().success());
}

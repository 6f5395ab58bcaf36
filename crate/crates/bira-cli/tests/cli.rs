//! End-to-end tests of the `bira` binary: exit codes, file layout, CSV
//! contracts, determinism, and the teacher HTTP path against a local mock
//! endpoint.

use std::io::{Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn bira() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bira"))
}

/// A config small enough that the full pipeline runs in seconds.
fn tiny_config(out_dir: &Path) -> String {
    format!(
        r#"{{
  "run_name": "tiny",
  "seed": 11,
  "out_dir": "{}",
  "variant": "sft-then-dpo",
  "train_sets": ["D_m"],
  "train_scale": "probe",
  "corpus": {{ "n_pairs": 12, "modulus": 7, "chain_len_min": 2, "chain_len_max": 3, "probe_pairs": 3, "holdout_pairs": 4 }},
  "model": {{ "d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "context_len": 128 }},
  "sft": {{ "epochs": 2, "batch_size": 4, "eval_every_epochs": 1,
           "schedule": {{ "peak_lr": 1e-3, "min_lr": 0.0, "warmup_ratio": 0.05, "restarts": 0 }},
           "grad_clip": 1.0, "weight_decay": 1e-6 }},
  "dpo": {{ "beta": 0.6, "epochs": 1, "batch_size": 4,
           "schedule": {{ "peak_lr": 1e-5, "min_lr": 0.0, "warmup_ratio": 0.0, "restarts": 0 }},
           "grad_clip": 1.0, "weight_decay": 0.0, "logprob_cap": 1000 }},
  "dpo_beta_probe": 0.2,
  "probe": {{ "cap": 1000, "influence_pairs": 2, "influence_etas": [1e-4], "accuracy_max_new": 32 }}
}}"#,
        out_dir.display()
    )
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, tiny_config(&dir.join("out"))).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn full_pipeline_produces_reports_and_charts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = run(bira().args(["all", "--config"]).arg(&config));
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    let reports = dir.path().join("out/tiny/reports");
    let probe_csv = std::fs::read_to_string(reports.join("probe_report.csv")).unwrap();
    assert!(
        probe_csv.starts_with("stage,epoch,train_set,test_set,kind,alp_pos,alp_neg,margin,n,cap\n")
    );
    let influence = std::fs::read_to_string(reports.join("influence.csv")).unwrap();
    assert!(influence.starts_with("eta,probe_id,update_id,predicted,actual,ratio\n"));
    let accuracy = std::fs::read_to_string(reports.join("accuracy.csv")).unwrap();
    assert!(accuracy.starts_with("stage,epoch,train_set,test_set,accuracy,unparseable\n"));
    for chart in ["alp_pos.svg", "alp_neg.svg", "margin.svg"] {
        let svg = std::fs::read_to_string(reports.join(chart)).unwrap();
        assert!(svg.contains("<polyline"), "{chart} has no polylines");
    }
    assert!(reports.join("summary.txt").exists());
    assert!(dir.path().join("out/tiny/manifest.json").exists());
    // Vocab manifest: one token per line.
    let vocab = std::fs::read_to_string(dir.path().join("out/tiny/data/vocab.txt")).unwrap();
    assert!(vocab.lines().count() >= 20);
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let first = run(bira().args(["gen-data", "--config"]).arg(&config));
    assert!(first.status.success());
    let second = run(bira().args(["gen-data", "--config"]).arg(&config));
    assert_eq!(second.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&second.stderr);
    assert!(stderr.starts_with("error[config]:"), "{stderr}");
    assert_eq!(
        stderr.trim().lines().count(),
        1,
        "single-line error contract"
    );
    let third = run(bira()
        .args(["gen-data", "--force", "--config"])
        .arg(&config));
    assert!(third.status.success());
}

#[test]
fn unknown_config_fields_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"run_name": "x", "learning_rate": 0.1}"#).unwrap();
    let out = run(bira().args(["gen-data", "--config"]).arg(&path));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn probe_without_checkpoints_exits_3_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    assert!(run(bira().args(["gen-data", "--config"]).arg(&config))
        .status
        .success());
    let out = run(bira().args(["probe", "--config"]).arg(&config));
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sft-epoch-000.bira"), "{stderr}");
}

#[test]
fn train_rejects_unknown_stage() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = run(bira()
        .args(["train", "--stage", "rlhf", "--config"])
        .arg(&config));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_override_changes_the_data() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    assert!(run(bira().args(["gen-data", "--config"]).arg(&config))
        .status
        .success());
    let base = std::fs::read_to_string(dir.path().join("out/tiny/data/forward.jsonl")).unwrap();
    let out = run(bira()
        .args(["gen-data", "--force", "--seed", "99", "--config"])
        .arg(&config));
    assert!(out.status.success());
    let reseeded = std::fs::read_to_string(dir.path().join("out/tiny/data/forward.jsonl")).unwrap();
    assert_ne!(base, reseeded);
}

#[test]
fn show_config_round_trips_through_gen_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bira().args(["show-config"]));
    assert!(out.status.success());
    let mut cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["out_dir"] = serde_json::json!(dir.path().join("out").display().to_string());
    // Keep the default corpus size but only generate (no training) for speed.
    let path = dir.path().join("default.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let out = run(bira().args(["gen-data", "--config"]).arg(&path));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // Default corpus mirrors the thousand-pair setup with 50-pair probes.
    let forward =
        std::fs::read_to_string(dir.path().join("out/default/data/forward.jsonl")).unwrap();
    assert_eq!(forward.lines().count(), 1000);
    let probe =
        std::fs::read_to_string(dir.path().join("out/default/data/probe_train_mixed.jsonl"))
            .unwrap();
    assert_eq!(probe.lines().count(), 100);
}

/// Minimal chat-completion mock: accepts POSTs and replies with a fixed
/// inverted QA payload.
fn spawn_mock_teacher(replies: usize) -> (String, std::thread::JoinHandle<usize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut served = 0;
        for _ in 0..replies {
            let Ok((mut stream, _)) = listener.accept() else {
                break;
            };
            let mut buf = vec![0u8; 65536];
            let mut total = 0;
            // Read until the end of the JSON body (requests are small).
            loop {
                match stream.read(&mut buf[total..]) {
                    Ok(0) => break,
                    Ok(n) => {
                        total += n;
                        let text = String::from_utf8_lossy(&buf[..total]);
                        if let Some(body_at) = text.find("\r\n\r\n") {
                            let headers = &text[..body_at];
                            let content_len = headers
                                .lines()
                                .find_map(|l| {
                                    l.to_ascii_lowercase()
                                        .strip_prefix("content-length:")
                                        .map(|v| v.trim().parse::<usize>().unwrap())
                                })
                                .unwrap_or(0);
                            if text[body_at + 4..].len() >= content_len {
                                break;
                            }
                        }
                    }
                    Err(_) => break,
                }
            }
            let content = "New Question: What gives 42?\\nNew Answer: Six times seven.";
            let body = format!(
                "{{\"choices\":[{{\"message\":{{\"role\":\"assistant\",\"content\":\"{content}\"}}}}]}}"
            );
            let response = format!(
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(response.as_bytes()).unwrap();
            served += 1;
        }
        served
    });
    (format!("http://{addr}/v1/chat/completions"), handle)
}

#[test]
fn teacher_inversion_runs_over_real_http_and_caches() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    // Seed file with two QA pairs in the run directory.
    let run_dir = dir.path().join("out/tiny");
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(
        run_dir.join("teacher_seed.jsonl"),
        "{\"question\":\"What is 6*7?\",\"answer\":\"42\"}\n{\"question\":\"What is 2+2?\",\"answer\":\"4\"}\n",
    )
    .unwrap();

    let (url, handle) = spawn_mock_teacher(2);
    let out = run(bira()
        .args(["gen-data", "--force", "--config"])
        .arg(&config)
        .env("TEACHER_URL", &url)
        .env("TEACHER_MODEL", "mock-teacher"));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(handle.join().unwrap(), 2);

    let pairs = std::fs::read_to_string(run_dir.join("data/teacher_pairs.jsonl")).unwrap();
    assert_eq!(pairs.lines().count(), 2);
    assert!(pairs.contains("What gives 42?"));
    // One cache file per request hash.
    let cache_files = std::fs::read_dir(run_dir.join("data/teacher_cache"))
        .unwrap()
        .count();
    assert_eq!(cache_files, 2);

    // A rerun is served entirely from the cache: no listener this time.
    let out = run(bira()
        .args(["gen-data", "--force", "--config"])
        .arg(&config)
        .env("TEACHER_URL", "http://127.0.0.1:1/unreachable")
        .env("TEACHER_MODEL", "mock-teacher"));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn without_teacher_env_the_seed_file_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let run_dir = dir.path().join("out/tiny");
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(
        run_dir.join("teacher_seed.jsonl"),
        "{\"question\":\"q\",\"answer\":\"a\"}\n",
    )
    .unwrap();
    let out = run(bira()
        .args(["gen-data", "--force", "--config"])
        .arg(&config)
        .env_remove("TEACHER_URL"));
    assert!(out.status.success());
    assert!(!run_dir.join("data/teacher_pairs.jsonl").exists());
}

#[test]
fn staged_train_runs_keep_both_stages_in_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    assert!(run(bira().args(["gen-data", "--config"]).arg(&config)).status.success());
    assert!(run(bira().args(["train", "--stage", "sft", "--config"]).arg(&config)).status.success());
    assert!(run(bira().args(["train", "--stage", "dpo", "--config"]).arg(&config)).status.success());
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/tiny/manifest.json")).unwrap(),
    )
    .unwrap();
    let stages: std::collections::HashSet<&str> = manifest["checkpoints"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["stage"].as_str().unwrap())
        .collect();
    assert!(stages.contains("sft"), "sft entries were dropped: {stages:?}");
    assert!(stages.contains("dpo"), "dpo entries missing: {stages:?}");
}

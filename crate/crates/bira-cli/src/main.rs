//! `bira` - orchestrates the alignment-lab pipeline from a single JSON config.
//!
//! Subcommands: gen-data, train, probe, report, all. Every error exits
//! nonzero with a single machine-parseable `error[kind]:` line; exit codes
//! are 2 (config), 3 (data), 4 (numeric), 5 (io/network).

use bira_core::corpus::teacher::{ChatRequest, ChatTransport, TeacherClient, TeacherConfig};
use bira_core::error::{Error, Result};
use bira_core::pipeline::{
    cmd_all, cmd_gen_data, cmd_probe, cmd_report, cmd_train, ExperimentConfig,
};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "bira",
    version,
    about = "Bidirectional reasoning alignment lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate datasets, probe sets, and the vocab manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overwrite an existing data directory.
        #[arg(long)]
        force: bool,
    },
    /// Run the training stage(s) for the configured pipeline variant.
    Train {
        #[command(flatten)]
        common: Common,
        /// Restrict to one stage ("sft" or "dpo").
        #[arg(long)]
        stage: Option<String>,
    },
    /// Evaluate all checkpoints: ALP/margin probes, influence, accuracy.
    Probe {
        #[command(flatten)]
        common: Common,
    },
    /// Emit SVG charts and the plain-text summary from the probe CSVs.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Full pipeline: gen-data, train, probe, report.
    All {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        force: bool,
    },
    /// Write the default config (or the full-scale variant) to stdout.
    ShowConfig {
        /// Emit the full-scale single-direction training defaults instead.
        #[arg(long)]
        full_scale: bool,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Chat-completion transport over HTTP (the de-facto JSON shape).
struct UreqTransport {
    url: String,
    token: Option<String>,
}

impl ChatTransport for UreqTransport {
    fn complete(&self, req: &ChatRequest) -> Result<String> {
        let mut r = ureq::post(&self.url).set("Content-Type", "application/json");
        if let Some(token) = &self.token {
            r = r.set("Authorization", &format!("Bearer {token}"));
        }
        let body = serde_json::to_value(req).expect("request serializes");
        let resp = r
            .send_json(body)
            .map_err(|e| Error::net(format!("teacher endpoint: {e}")))?;
        let json: serde_json::Value = resp
            .into_json()
            .map_err(|e| Error::net(format!("teacher endpoint reply: {e}")))?;
        json.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(String::from)
            .ok_or_else(|| {
                Error::data(format!(
                    "teacher reply missing choices[0].message.content: {json}"
                ))
            })
    }
}

#[derive(serde::Deserialize)]
struct TeacherSeedPair {
    question: String,
    answer: String,
}

/// When TEACHER_URL is set and `<run>/teacher_seed.jsonl` exists, invert each
/// of its QA pairs through the teacher endpoint and write
/// `<run>/data/teacher_pairs.jsonl`. Replies are cached under
/// `<run>/data/teacher_cache/`.
fn maybe_run_teacher(cfg: &ExperimentConfig) -> Result<usize> {
    let seed_path = cfg.run_dir().join("teacher_seed.jsonl");
    if !seed_path.exists() {
        return Ok(0);
    }
    let Some(mut teacher_cfg) = TeacherConfig::from_env() else {
        eprintln!(
            "note: {} present but TEACHER_URL is not set; skipping teacher inversion",
            seed_path.display()
        );
        return Ok(0);
    };
    teacher_cfg.cache_dir = Some(cfg.data_dir().join("teacher_cache"));
    let transport = UreqTransport {
        url: teacher_cfg.url.clone(),
        token: teacher_cfg.token.clone(),
    };
    let client = TeacherClient::new(Some(teacher_cfg), transport)?;

    let text = std::fs::read_to_string(&seed_path)
        .map_err(|e| Error::io(seed_path.display().to_string(), e))?;
    let mut out = String::new();
    let mut count = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: TeacherSeedPair = serde_json::from_str(line)
            .map_err(|e| Error::data(format!("{}: line {}: {e}", seed_path.display(), i + 1)))?;
        let (new_q, new_a) = client.invert(&pair.question, &pair.answer)?;
        out.push_str(
            &serde_json::json!({
                "pair_id": format!("teacher-{i:06}"),
                "question": pair.question,
                "answer": pair.answer,
                "reverse_question": new_q,
                "reverse_answer": new_a,
            })
            .to_string(),
        );
        out.push('\n');
        count += 1;
    }
    let out_path = cfg.data_dir().join("teacher_pairs.jsonl");
    std::fs::write(&out_path, out).map_err(|e| Error::io(out_path.display().to_string(), e))?;
    println!("teacher: inverted {count} pairs -> {}", out_path.display());
    Ok(count)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, force } => {
            let cfg = load_config(&common)?;
            let s = cmd_gen_data(&cfg, force)?;
            maybe_run_teacher(&cfg)?;
            println!(
                "gen-data: {} forward pairs, {} mixed examples, probe train {} -> {}",
                s.n_forward,
                s.n_mixed,
                s.n_probe_train,
                cfg.data_dir().display()
            );
        }
        Command::Train { common, stage } => {
            let cfg = load_config(&common)?;
            let s = cmd_train(&cfg, stage.as_deref())?;
            println!("train: wrote {} checkpoints", s.checkpoints_written);
            for (k, v) in &s.final_losses {
                println!("  {k}: final loss {v:.6}");
            }
        }
        Command::Probe { common } => {
            let cfg = load_config(&common)?;
            let s = cmd_probe(&cfg)?;
            println!(
                "probe: {} probe rows, {} influence records, {} accuracy rows -> {}",
                s.probe_rows,
                s.influence_rows,
                s.accuracy_rows,
                cfg.reports_dir().display()
            );
        }
        Command::Report { common } => {
            let cfg = load_config(&common)?;
            let s = cmd_report(&cfg)?;
            println!(
                "report: {}/{} expected-direction checks passed",
                s.checks_passed, s.checks_total
            );
            for c in &s.charts {
                println!("  chart {}", c.display());
            }
            println!("  summary {}", s.summary_path.display());
        }
        Command::All { common, force } => {
            let cfg = load_config(&common)?;
            let s = cmd_all(&cfg, force)?;
            maybe_run_teacher(&cfg)?;
            println!(
                "all: {} checkpoints, {} probe rows, {}/{} checks passed",
                s.train.checkpoints_written,
                s.probe.probe_rows,
                s.report.checks_passed,
                s.report.checks_total
            );
            println!("  summary {}", s.report.summary_path.display());
        }
        Command::ShowConfig { full_scale } => {
            let cfg = if full_scale {
                ExperimentConfig::full_scale_default()
            } else {
                ExperimentConfig::default()
            };
            println!("{}", cfg.to_json());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => {}
        Err(e) => {
            let line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {}", e.kind(), line);
            std::process::exit(e.exit_code());
        }
    }
}

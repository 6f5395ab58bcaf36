//! Browser demo: generate forward/reverse chain pairs, train the tiny model
//! live on forward-only / reverse-only / mixed data, and watch the ALP and
//! margin dynamics (plus a first-order influence scatter) as SVG charts.

use bira_core::checkpoint::f32_roundtrip;
use bira_core::corpus::{
    build_preference_pairs, generate_pairs, DatasetName, DatasetSpec, Example,
};
use bira_core::dpo::{encode_preference_pair, DpoConfig, DpoTrainer, EncodedPair, ReferenceModel};
use bira_core::model::{ModelConfig, ModelParams};
use bira_core::probes::{influence_predict, margin_stats, AlpStats};
use bira_core::sft::{SftConfig, SftTrainer};
use bira_core::svg::{render_line_chart, ChartSpec, Series};
use bira_core::textcodec::{EncodedSequence, Vocab};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

fn err_js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[derive(Serialize)]
struct PairView {
    question: String,
    cot: String,
    answer: String,
}

#[derive(Serialize)]
struct PairJson {
    start: u64,
    result: u64,
    forward: PairView,
    reverse: PairView,
}

fn view(e: &Example) -> PairView {
    PairView {
        question: e.question.join(" "),
        cot: e.cot.join(" "),
        answer: e.answer.join(" "),
    }
}

/// Generate one forward/reverse pair for the explorer panel.
#[wasm_bindgen]
pub fn generate_pair(
    seed: u32,
    len_min: u32,
    len_max: u32,
    modulus: u32,
) -> Result<String, JsValue> {
    let spec = DatasetSpec {
        name: DatasetName::Forward,
        n_pairs: 1,
        seed: seed as u64,
        chain_length_range: (len_min as usize, len_max as usize),
        modulus: modulus as u64,
    };
    let mut pairs = generate_pairs(seed as u64, &spec).map_err(err_js)?;
    let (chain, fwd, rev) = pairs.remove(0);
    serde_json::to_string(&PairJson {
        start: chain.start,
        result: chain.result,
        forward: view(&fwd),
        reverse: view(&rev),
    })
    .map_err(err_js)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub seed: u32,
    pub pairs: usize,
    pub test_pairs: usize,
    pub modulus: u32,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub sft_epochs: usize,
    pub dpo_epochs: usize,
    pub sft_lr: f64,
    pub dpo_lr: f64,
    pub dpo_beta: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            seed: 42,
            pairs: 12,
            test_pairs: 8,
            modulus: 7,
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            sft_epochs: 10,
            dpo_epochs: 5,
            sft_lr: 2e-3,
            dpo_lr: 3e-4,
            dpo_beta: 0.2,
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Sft,
    Dpo,
    Done,
}

struct TrackedRun {
    label: &'static str,
    sft: Option<SftTrainer>,
    dpo: Option<DpoTrainer>,
    /// (timeline x, stats) per evaluated epoch, on this run's test pairing.
    history: Vec<(f64, AlpStats)>,
}

/// Live training session: one model per training set (forward, reverse,
/// mixed), stepped one epoch at a time so the page stays responsive.
#[wasm_bindgen]
pub struct LabSession {
    cfg: DemoConfig,
    phase: Phase,
    epoch: usize,
    runs: Vec<TrackedRun>,
    test_items: Vec<Vec<EncodedPair>>, // per run: its in-distribution test items
    dpo_pairs: Vec<EncodedPair>,
    train_mixed_enc: Vec<EncodedSequence>,
}

const CONTEXT_LEN: usize = 192;

fn encode_all(vocab: &Vocab, set: &[Example]) -> Result<Vec<EncodedSequence>, JsValue> {
    set.iter()
        .map(|e| vocab.encode_example(e, CONTEXT_LEN).map_err(err_js))
        .collect()
}

#[wasm_bindgen]
impl LabSession {
    /// Build corpora and the three trainers from a JSON config (any subset of
    /// the DemoConfig fields).
    #[wasm_bindgen(constructor)]
    pub fn new(config_json: &str) -> Result<LabSession, JsValue> {
        let cfg: DemoConfig = if config_json.trim().is_empty() {
            DemoConfig::default()
        } else {
            serde_json::from_str(config_json).map_err(err_js)?
        };
        let vocab = Vocab::synthetic();
        let total = cfg.pairs + cfg.test_pairs;
        let spec = DatasetSpec {
            name: DatasetName::Mixed,
            n_pairs: total,
            seed: cfg.seed as u64,
            chain_length_range: (2, 4),
            modulus: cfg.modulus as u64,
        };
        let generated = generate_pairs(cfg.seed as u64, &spec).map_err(err_js)?;
        let fwd: Vec<Example> = generated.iter().map(|(_, f, _)| f.clone()).collect();
        let rev: Vec<Example> = generated.iter().map(|(_, _, r)| r.clone()).collect();
        let (train_f, test_f) = fwd.split_at(cfg.pairs);
        let (train_r, test_r) = rev.split_at(cfg.pairs);
        let train_m: Vec<Example> = train_f
            .iter()
            .zip(train_r)
            .flat_map(|(f, r)| [f.clone(), r.clone()])
            .collect();

        let items = |examples: &[Example]| -> Result<Vec<EncodedPair>, JsValue> {
            build_preference_pairs(examples)
                .map_err(err_js)?
                .iter()
                .map(|p| encode_preference_pair(&vocab, p, CONTEXT_LEN).map_err(err_js))
                .collect()
        };
        let test_union: Vec<Example> = test_f.iter().chain(test_r.iter()).cloned().collect();
        let all_test_items = items(&test_union)?;
        let test_f_items: Vec<EncodedPair> = all_test_items
            .iter()
            .zip(&test_union)
            .filter(|(_, e)| e.direction == bira_core::corpus::Direction::Forward)
            .map(|(i, _)| i.clone())
            .collect();
        let test_r_items: Vec<EncodedPair> = all_test_items
            .iter()
            .zip(&test_union)
            .filter(|(_, e)| e.direction == bira_core::corpus::Direction::Reverse)
            .map(|(i, _)| i.clone())
            .collect();

        let model_cfg = ModelConfig {
            d_model: cfg.d_model,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            d_ff: cfg.d_ff,
            context_len: CONTEXT_LEN,
            vocab_size: vocab.size(),
            init_seed: cfg.seed as u64 ^ 0x6d6f_64656c,
        };
        let init = ModelParams::init(model_cfg).map_err(err_js)?;

        let sft_config = |seed: u64| {
            let mut c = SftConfig {
                epochs: cfg.sft_epochs,
                batch_size: 4,
                eval_every_epochs: 1,
                seed,
                ..SftConfig::default()
            };
            c.schedule.peak_lr = cfg.sft_lr;
            c.schedule.min_lr = cfg.sft_lr / 10.0;
            c
        };

        let mk_run =
            |label: &'static str, set: &[Example], seed: u64| -> Result<TrackedRun, JsValue> {
                let data = encode_all(&vocab, set)?;
                let trainer =
                    SftTrainer::new(init.clone(), data, sft_config(seed)).map_err(err_js)?;
                Ok(TrackedRun {
                    label,
                    sft: Some(trainer),
                    dpo: None,
                    history: Vec::new(),
                })
            };
        let runs = vec![
            mk_run("D_f on T_f", train_f, 1)?,
            mk_run("D_r on T_r", train_r, 2)?,
            mk_run("D_m on T_m", &train_m, 3)?,
        ];

        let dpo_pairs = items(&train_m)?;
        let train_mixed_enc = encode_all(&vocab, &train_m)?;

        let mut session = LabSession {
            cfg,
            phase: Phase::Sft,
            epoch: 0,
            runs,
            test_items: vec![test_f_items, test_r_items, all_test_items],
            dpo_pairs,
            train_mixed_enc,
        };
        session.evaluate(0.0).map_err(err_js)?;
        Ok(session)
    }

    /// Advance one epoch (all three models) and return a status JSON:
    /// {phase, epoch, done, losses: {label: loss}}.
    pub fn step(&mut self) -> Result<String, JsValue> {
        let phase_label = match self.phase {
            Phase::Sft => "sft",
            Phase::Dpo => "dpo",
            Phase::Done => "done",
        };
        match self.phase {
            Phase::Sft => {
                let mut losses = Vec::new();
                for run in &mut self.runs {
                    let trainer = run.sft.as_mut().expect("sft trainer in sft phase");
                    let log = trainer.step_epoch().map_err(err_js)?;
                    let mean = log.iter().map(|l| l.loss).sum::<f64>() / log.len().max(1) as f64;
                    losses.push((run.label, mean));
                }
                self.epoch += 1;
                self.evaluate(self.epoch as f64).map_err(err_js)?;
                let done_sft = self
                    .runs
                    .iter()
                    .all(|r| r.sft.as_ref().map(|t| t.done()).unwrap_or(true));
                if done_sft {
                    self.begin_dpo()?;
                }
                Ok(self.status(phase_label, losses))
            }
            Phase::Dpo => {
                let mut losses = Vec::new();
                for run in &mut self.runs {
                    let trainer = run.dpo.as_mut().expect("dpo trainer in dpo phase");
                    let log = trainer.step_epoch().map_err(err_js)?;
                    let mean = log.iter().map(|l| l.loss).sum::<f64>() / log.len().max(1) as f64;
                    losses.push((run.label, mean));
                }
                self.epoch += 1;
                self.evaluate(self.epoch as f64).map_err(err_js)?;
                if self
                    .runs
                    .iter()
                    .all(|r| r.dpo.as_ref().map(|t| t.done()).unwrap_or(true))
                {
                    self.phase = Phase::Done;
                }
                Ok(self.status(phase_label, losses))
            }
            Phase::Done => Ok(self.status(phase_label, vec![])),
        }
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// SVG chart of the margin (ALP(y+) - ALP(y-)) per model over epochs.
    pub fn margin_chart(&self) -> String {
        self.chart("Margin = ALP(y+) - ALP(y-)", "margin", |s| s.margin)
    }

    /// SVG chart of ALP for one side ("chosen" or "rejected").
    pub fn alp_chart(&self, side: &str) -> String {
        if side == "rejected" {
            self.chart("ALP of rejected responses (y-)", "ALP(y-)", |s| s.alp_neg)
        } else {
            self.chart("ALP of preferred responses (y+)", "ALP(y+)", |s| s.alp_pos)
        }
    }

    /// First-order influence on the mixed model's current parameters: sampled
    /// (probe, update) pairs with predicted vs actual log-prob changes.
    /// Returns JSON {records: [{predicted, actual, ratio}], svg}.
    pub fn influence_scatter(&self, eta: f64, samples: u32) -> Result<String, JsValue> {
        let params = self.mixed_params();
        let data = &self.train_mixed_enc;
        let mut rng = bira_core::rng::Rng::derive(self.cfg.seed as u64, "demo-influence", 0);
        let mut records = Vec::new();
        for _ in 0..samples.min(64) {
            let a = rng.below(data.len() as u64) as usize;
            let b = rng.below(data.len() as u64) as usize;
            let rec = influence_predict(params, "p", &data[a], "u", &data[b], eta, 1000)
                .map_err(err_js)?;
            records.push(rec);
        }
        let svg = influence_svg(&records);
        let json_records: Vec<serde_json::Value> = records
            .iter()
            .map(|r| {
                serde_json::json!({
                    "predicted": r.predicted_delta,
                    "actual": r.actual_delta,
                    "ratio": r.ratio,
                })
            })
            .collect();
        serde_json::to_string(&serde_json::json!({ "records": json_records, "svg": svg }))
            .map_err(err_js)
    }

    fn status(&self, phase: &str, losses: Vec<(&'static str, f64)>) -> String {
        let losses_json: serde_json::Map<String, serde_json::Value> = losses
            .into_iter()
            .map(|(k, v)| (k.to_string(), serde_json::json!(v)))
            .collect();
        serde_json::json!({
            "phase": phase,
            "epoch": self.epoch,
            "done": self.phase == Phase::Done,
            "losses": losses_json,
        })
        .to_string()
    }

    fn begin_dpo(&mut self) -> Result<(), JsValue> {
        if self.cfg.dpo_epochs == 0 {
            self.phase = Phase::Done;
            return Ok(());
        }
        let mut dpo_cfg = DpoConfig {
            beta: self.cfg.dpo_beta,
            epochs: self.cfg.dpo_epochs,
            batch_size: 4,
            seed: self.cfg.seed as u64 ^ 0xd90,
            ..DpoConfig::default()
        };
        dpo_cfg.schedule.peak_lr = self.cfg.dpo_lr;
        for run in &mut self.runs {
            let sft = run.sft.take().expect("sft trainer present");
            let policy = f32_roundtrip(&sft.params);
            let reference = ReferenceModel::new(&policy);
            run.dpo = Some(
                DpoTrainer::new(policy, &reference, self.dpo_pairs.clone(), dpo_cfg.clone())
                    .map_err(err_js)?,
            );
        }
        self.phase = Phase::Dpo;
        Ok(())
    }

    fn run_params(&self, idx: usize) -> &ModelParams {
        let run = &self.runs[idx];
        match (&run.sft, &run.dpo) {
            (_, Some(t)) => &t.params,
            (Some(t), None) => &t.params,
            (None, None) => unreachable!("run always has a live trainer"),
        }
    }

    fn mixed_params(&self) -> &ModelParams {
        self.run_params(2)
    }

    fn evaluate(&mut self, x: f64) -> bira_core::Result<()> {
        for i in 0..self.runs.len() {
            let stats = margin_stats(self.run_params(i), &self.test_items[i], 1000)?;
            self.runs[i].history.push((x, stats));
        }
        Ok(())
    }

    fn chart(&self, title: &str, ylabel: &str, pick: impl Fn(&AlpStats) -> f64) -> String {
        let series: Vec<Series> = self
            .runs
            .iter()
            .map(|r| Series {
                name: r.label.to_string(),
                points: r.history.iter().map(|(x, s)| (*x, pick(s))).collect(),
            })
            .collect();
        render_line_chart(
            &ChartSpec {
                title,
                x_label: "epoch (SFT then DPO)",
                y_label: ylabel,
                width: 780,
                height: 400,
            },
            &series,
        )
    }
}

/// Scatter of predicted vs actual log-prob changes with the y = x diagonal.
fn influence_svg(records: &[bira_core::probes::InfluenceRecord]) -> String {
    let (w, h) = (420.0, 420.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 30.0, 50.0);
    let vals: Vec<f64> = records
        .iter()
        .flat_map(|r| [r.predicted_delta, r.actual_delta])
        .collect();
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi.is_finite() && lo < hi {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    } else {
        (-1.0, 1.0)
    };
    let sx = |v: f64| ml + (v - lo) / (hi - lo) * (w - ml - mr);
    let sy = |v: f64| mt + (h - mt - mb) - (v - lo) / (hi - lo) * (h - mt - mb);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    out.push_str(&format!(
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" font-weight=\"bold\">predicted vs actual delta log-prob</text>\n",
        w / 2.0
    ));
    out.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n",
        sx(lo),
        sy(lo),
        sx(hi),
        sy(hi)
    ));
    out.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#333\"/>\n<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"#333\"/>\n",
        h - mb,
        w - mr,
        h - mb,
        h - mb
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">actual</text>\n",
        (ml + w - mr) / 2.0,
        h - 14.0
    ));
    out.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 14 {})\">predicted</text>\n",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0
    ));
    for r in records {
        out.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3.2\" fill=\"#1f77b4\" fill-opacity=\"0.75\"/>\n",
            sx(r.actual_delta),
            sy(r.predicted_delta)
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn explorer_pair_is_well_formed() {
        let json = generate_pair(5, 2, 4, 7).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["forward"]["question"].as_str().unwrap().contains("START"));
        assert!(v["reverse"]["question"]
            .as_str()
            .unwrap()
            .contains("RESULT"));
        assert!(v["forward"]["cot"].as_str().unwrap().contains('='));
    }

    #[test]
    fn session_trains_through_both_phases() {
        let cfg = r#"{"pairs": 4, "test_pairs": 2, "sft_epochs": 2, "dpo_epochs": 1,
                      "d_model": 16, "n_heads": 2, "d_ff": 32, "sft_lr": 1e-3}"#;
        let mut session = LabSession::new(cfg).unwrap();
        let mut steps = 0;
        while !session.is_done() {
            let status = session.step().unwrap();
            let v: serde_json::Value = serde_json::from_str(&status).unwrap();
            assert!(v["epoch"].as_u64().unwrap() as usize <= 3);
            steps += 1;
            assert!(steps <= 3, "session did not terminate");
        }
        let margin = session.margin_chart();
        assert_eq!(margin.matches("<polyline").count(), 3);
        let alp = session.alp_chart("chosen");
        assert!(alp.contains("ALP(y+)"));
        let inf = session.influence_scatter(1e-4, 4).unwrap();
        let v: serde_json::Value = serde_json::from_str(&inf).unwrap();
        assert_eq!(v["records"].as_array().unwrap().len(), 4);
        assert!(v["svg"].as_str().unwrap().contains("circle"));
    }
}

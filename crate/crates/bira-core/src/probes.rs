//! Measurement instruments for the learning-dynamics analysis: per-token
//! average log-probability (ALP) of preferred and rejected responses, the
//! margin between them, first-order influence predictions, and oracle-graded
//! task accuracy.

use crate::corpus::{Example, PreferencePair};
use crate::dpo::{encode_preference_pair, EncodedPair};
use crate::error::{Error, Result};
use crate::model::{backward, forward, greedy_decode, logprob_sequence, softmax_row, ModelParams};
use crate::sft::sft_grad;
use crate::textcodec::{parse_number, EncodedSequence, Role, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Chosen,
    Rejected,
}

/// ALP of both response sides over a probe set, and their margin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlpStats {
    pub alp_pos: f64,
    pub alp_neg: f64,
    pub margin: f64,
    pub n: usize,
    pub cap: usize,
}

/// Mean over examples of (summed response log-prob / tokens used), the
/// two-level mean with the per-sequence length normalization applied first.
pub fn alp(params: &ModelParams, items: &[EncodedPair], side: Side, cap: usize) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::data("alp: empty probe set"));
    }
    let mut total = 0.0;
    for item in items {
        let seq = match side {
            Side::Chosen => &item.chosen,
            Side::Rejected => &item.rejected,
        };
        let (sum, used) = logprob_sequence(params, seq, cap)?;
        total += sum / used as f64;
    }
    Ok(total / items.len() as f64)
}

/// ALP of y+ and y- plus the margin between them.
pub fn margin_stats(params: &ModelParams, items: &[EncodedPair], cap: usize) -> Result<AlpStats> {
    let alp_pos = alp(params, items, Side::Chosen, cap)?;
    let alp_neg = alp(params, items, Side::Rejected, cap)?;
    Ok(AlpStats {
        alp_pos,
        alp_neg,
        margin: alp_pos - alp_neg,
        n: items.len(),
        cap,
    })
}

/// Encode a probe set (paired examples) once for repeated evaluation.
pub fn encode_probe_items(
    vocab: &Vocab,
    items: &[PreferencePair],
    context_len: usize,
) -> Result<Vec<EncodedPair>> {
    items
        .iter()
        .map(|p| encode_preference_pair(vocab, p, context_len))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "sft")]
    Sft,
    #[serde(rename = "dpo")]
    Dpo,
    #[serde(rename = "direct-dpo")]
    DirectDpo,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Dpo => "dpo",
            Stage::DirectDpo => "direct-dpo",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrainSet {
    #[serde(rename = "D_f")]
    Forward,
    #[serde(rename = "D_r")]
    Reverse,
    #[serde(rename = "D_m")]
    Mixed,
}

impl TrainSet {
    pub fn label(&self) -> &'static str {
        match self {
            TrainSet::Forward => "D_f",
            TrainSet::Reverse => "D_r",
            TrainSet::Mixed => "D_m",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TestSet {
    Forward,
    Reverse,
    Mixed,
}

impl TestSet {
    pub fn label(&self) -> &'static str {
        match self {
            TestSet::Forward => "T_f",
            TestSet::Reverse => "T_r",
            TestSet::Mixed => "T_m",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairingKind {
    InDistribution,
    OutOfDistribution,
}

impl PairingKind {
    pub fn label(&self) -> &'static str {
        match self {
            PairingKind::InDistribution => "in-distribution",
            PairingKind::OutOfDistribution => "out-of-distribution",
        }
    }
}

/// The train/test pairings evaluated for a given training set: the matching
/// in-distribution test set, plus the opposite-direction out-of-distribution
/// set for the single-direction models.
pub fn pairings_for(train_set: TrainSet) -> Vec<(TestSet, PairingKind)> {
    match train_set {
        TrainSet::Forward => vec![
            (TestSet::Forward, PairingKind::InDistribution),
            (TestSet::Reverse, PairingKind::OutOfDistribution),
        ],
        TrainSet::Reverse => vec![
            (TestSet::Reverse, PairingKind::InDistribution),
            (TestSet::Forward, PairingKind::OutOfDistribution),
        ],
        TrainSet::Mixed => vec![(TestSet::Mixed, PairingKind::InDistribution)],
    }
}

#[derive(Debug, Clone)]
pub struct ProbeRow {
    pub stage: Stage,
    pub epoch: usize,
    pub train_set: TrainSet,
    pub test_set: TestSet,
    pub kind: PairingKind,
    pub stats: AlpStats,
}

/// Checkpoints of one training stage for one training set.
pub struct StageCheckpoints<'a> {
    pub stage: Stage,
    pub train_set: TrainSet,
    pub checkpoints: &'a [(usize, ModelParams)],
}

/// Encoded probe test sets, indexed by name.
pub struct ProbeTestSets {
    pub forward: Vec<EncodedPair>,
    pub reverse: Vec<EncodedPair>,
    pub mixed: Vec<EncodedPair>,
}

impl ProbeTestSets {
    pub fn get(&self, set: TestSet) -> &[EncodedPair] {
        match set {
            TestSet::Forward => &self.forward,
            TestSet::Reverse => &self.reverse,
            TestSet::Mixed => &self.mixed,
        }
    }
}

/// Evaluate every checkpoint of every run against its designated pairings.
/// Row order is deterministic: (stage, epoch, train set, test set).
pub fn evaluate_probe_suite(
    runs: &[StageCheckpoints<'_>],
    tests: &ProbeTestSets,
    cap: usize,
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    for run in runs {
        for (epoch, params) in run.checkpoints {
            for (test_set, kind) in pairings_for(run.train_set) {
                let stats = margin_stats(params, tests.get(test_set), cap)?;
                rows.push(ProbeRow {
                    stage: run.stage,
                    epoch: *epoch,
                    train_set: run.train_set,
                    test_set,
                    kind,
                    stats,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        a.stage
            .cmp(&b.stage)
            .then(a.epoch.cmp(&b.epoch))
            .then(a.train_set.cmp(&b.train_set))
            .then(a.test_set.cmp(&b.test_set))
    });
    Ok(rows)
}

/// Exact CSV schema: stage,epoch,train_set,test_set,kind,alp_pos,alp_neg,margin,n,cap
pub fn render_probe_csv(rows: &[ProbeRow]) -> String {
    let mut out =
        String::from("stage,epoch,train_set,test_set,kind,alp_pos,alp_neg,margin,n,cap\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.9e},{:.9e},{:.9e},{},{}\n",
            r.stage.label(),
            r.epoch,
            r.train_set.label(),
            r.test_set.label(),
            r.kind.label(),
            r.stats.alp_pos,
            r.stats.alp_neg,
            r.stats.margin,
            r.stats.n,
            r.stats.cap
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct InfluenceRecord {
    pub probe_id: String,
    pub update_id: String,
    pub eta: f64,
    pub predicted_delta: f64,
    pub actual_delta: f64,
    /// predicted / actual; None when the actual change is degenerately small.
    pub ratio: Option<f64>,
}

/// influence.csv schema: eta,probe_id,update_id,predicted,actual,ratio
pub fn render_influence_csv(records: &[InfluenceRecord]) -> String {
    let mut out = String::from("eta,probe_id,update_id,predicted,actual,ratio\n");
    for r in records {
        let ratio = match r.ratio {
            Some(x) => format!("{x:.9e}"),
            None => "degenerate".to_string(),
        };
        out.push_str(&format!(
            "{:.3e},{},{},{:.9e},{:.9e},{}\n",
            r.eta, r.probe_id, r.update_id, r.predicted_delta, r.actual_delta, ratio
        ));
    }
    out
}

/// Gradient of the summed response log-probability of `seq` (within cap).
fn logprob_grad(params: &ModelParams, seq: &EncodedSequence, cap: usize) -> Result<ModelParams> {
    let v = params.config.vocab_size;
    let (logits, trace) = forward(params, &seq.ids)?;
    let mut dlogits = vec![0.0; logits.len()];
    let mut used = 0;
    for t in 1..seq.ids.len() {
        if seq.role_mask[t] != Role::Response {
            continue;
        }
        let probs = softmax_row(&logits[(t - 1) * v..t * v]);
        let drow = &mut dlogits[(t - 1) * v..t * v];
        for (i, p) in probs.iter().enumerate() {
            drow[i] -= p;
        }
        drow[seq.ids[t] as usize] += 1.0;
        used += 1;
        if used == cap {
            break;
        }
    }
    if used == 0 {
        return Err(Error::data("influence: probe has no response tokens"));
    }
    let mut grads = params.zeros_like();
    backward(params, &trace, &dlogits, &mut grads)?;
    Ok(grads)
}

/// First-order influence of one SGD step on a probe example's summed response
/// log-probability. The prediction is the negated inner product of the probe's
/// log-prob gradient with the update example's loss gradient, scaled by eta;
/// the actual change takes one plain SGD step (not Adam: the first-order view
/// presumes an unpreconditioned gradient step) and re-measures.
pub fn influence_predict(
    params: &ModelParams,
    probe_id: &str,
    probe: &EncodedSequence,
    update_id: &str,
    update: &EncodedSequence,
    eta: f64,
    cap: usize,
) -> Result<InfluenceRecord> {
    let g_probe = logprob_grad(params, probe, cap)?;
    let (_, g_update) = sft_grad(params, &[update])?;
    let predicted_delta = -eta * g_probe.dot(&g_update);

    let (before, _) = logprob_sequence(params, probe, cap)?;
    let mut stepped = params.clone();
    stepped.axpy(-eta, &g_update);
    let (after, _) = logprob_sequence(&stepped, probe, cap)?;
    let actual_delta = after - before;

    let ratio = if actual_delta.abs() > 1e-300 {
        Some(predicted_delta / actual_delta)
    } else {
        None
    };
    if !predicted_delta.is_finite() || !actual_delta.is_finite() {
        return Err(Error::numeric("influence produced non-finite deltas"));
    }
    Ok(InfluenceRecord {
        probe_id: probe_id.to_string(),
        update_id: update_id.to_string(),
        eta,
        predicted_delta,
        actual_delta,
        ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AccuracyStats {
    pub total: usize,
    pub correct: usize,
    pub wrong: usize,
    pub unparseable: usize,
}

impl AccuracyStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Greedy-decode each question and grade the answer span (after SEP_A) by
/// exact match against the example's ground-truth answer. Generations without
/// a parseable answer count as wrong and are tallied separately.
pub fn task_accuracy(
    params: &ModelParams,
    examples: &[Example],
    vocab: &Vocab,
    max_new: usize,
) -> Result<AccuracyStats> {
    let mut stats = AccuracyStats {
        total: examples.len(),
        correct: 0,
        wrong: 0,
        unparseable: 0,
    };
    let sep_a = vocab.special().sep_a;
    for e in examples {
        let prompt = vocab.encode_prompt(e.direction, &e.question, params.config.context_len)?;
        let out = greedy_decode(params, &prompt, max_new, vocab.special().eos)?;
        let answer_ids: Option<&[u32]> = if out.hit_eos {
            out.generated
                .iter()
                .position(|&t| t == sep_a)
                .map(|i| &out.generated[i + 1..])
        } else {
            None
        };
        let parsed = answer_ids.and_then(|ids| {
            let names: Vec<String> = ids
                .iter()
                .map(|&t| vocab.name(t).map(String::from))
                .collect::<Result<_>>()
                .ok()?;
            parse_number(&names)
        });
        match parsed {
            Some(value) => {
                let expected = parse_number(&e.answer).ok_or_else(|| {
                    Error::data(format!("example {} has no numeric answer", e.id))
                })?;
                if value == expected {
                    stats.correct += 1;
                } else {
                    stats.wrong += 1;
                }
            }
            None => stats.unparseable += 1,
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct AccuracyRow {
    pub stage: Stage,
    pub epoch: usize,
    pub train_set: TrainSet,
    pub test_set: TestSet,
    pub stats: AccuracyStats,
}

/// accuracy.csv schema: stage,epoch,train_set,test_set,accuracy,unparseable
pub fn render_accuracy_csv(rows: &[AccuracyRow]) -> String {
    let mut out = String::from("stage,epoch,train_set,test_set,accuracy,unparseable\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{}\n",
            r.stage.label(),
            r.epoch,
            r.train_set.label(),
            r.test_set.label(),
            r.stats.accuracy(),
            r.stats.unparseable
        ));
    }
    out
}

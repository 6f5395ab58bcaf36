//! Direct preference optimization against a frozen reference model.
//!
//! For a pair (x, y+, y-) the implicit-reward margin is
//! `m = beta * [(S(y+) - S_ref(y+)) - (S(y-) - S_ref(y-))]` with S the summed
//! response log-probability (capped), and the loss is `softplus(-m)`.

use crate::checkpoint::f32_roundtrip;
use crate::corpus::PreferencePair;
use crate::error::{Error, Result};
use crate::model::{
    backward, forward, log_softmax_row, logprob_sequence, softmax_row, ModelParams,
};
use crate::optim::{adam_step, clip_global_norm, lr_at, AdamConfig, OptimState, ScheduleSpec};
use crate::rng::Rng;
use crate::textcodec::{EncodedSequence, Role, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoConfig {
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: ScheduleSpec,
    pub grad_clip: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub logprob_cap: usize,
    #[serde(default)]
    pub max_steps: Option<u64>,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.6,
            epochs: 7,
            batch_size: 8,
            // The original-scale study trains at 5e-7; at desk scale that
            // moves the margin by less than 1e-6 per stage, so the default is
            // scaled up. The configured value is echoed in every report header.
            schedule: ScheduleSpec {
                peak_lr: 1e-5,
                min_lr: 0.0,
                warmup_ratio: 0.0,
                restarts: 0,
            },
            grad_clip: 1.0,
            weight_decay: 0.0,
            adam: AdamConfig::default(),
            logprob_cap: 1000,
            max_steps: None,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta <= 0.0 {
            return Err(Error::config(format!(
                "beta {} must be positive",
                self.beta
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("dpo epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("dpo batch_size must be at least 1"));
        }
        if self.logprob_cap == 0 {
            return Err(Error::config("logprob_cap must be at least 1"));
        }
        Ok(())
    }
}

/// Frozen snapshot of the policy taken at DPO start. Constructed through the
/// f32 storage round-trip so it is byte-identical to the checkpoint it came
/// from, and never mutated afterwards.
#[derive(Debug, Clone)]
pub struct ReferenceModel {
    params: ModelParams,
}

impl ReferenceModel {
    pub fn new(params: &ModelParams) -> ReferenceModel {
        ReferenceModel {
            params: f32_roundtrip(params),
        }
    }

    /// Wrap parameters exactly as given (used when they already came off disk).
    pub fn from_loaded(params: ModelParams) -> ReferenceModel {
        ReferenceModel { params }
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }
}

/// A preference pair encoded against a vocabulary: both sequences share the
/// prompt (and its direction token) and differ in the response.
#[derive(Debug, Clone)]
pub struct EncodedPair {
    pub pair_id: String,
    pub chosen: EncodedSequence,
    pub rejected: EncodedSequence,
}

pub fn encode_preference_pair(
    vocab: &Vocab,
    pair: &PreferencePair,
    context_len: usize,
) -> Result<EncodedPair> {
    Ok(EncodedPair {
        pair_id: pair.pair_id.clone(),
        chosen: vocab.encode_prompt_response(
            pair.prompt_direction,
            &pair.prompt,
            &pair.chosen,
            context_len,
        )?,
        rejected: vocab.encode_prompt_response(
            pair.prompt_direction,
            &pair.prompt,
            &pair.rejected,
            context_len,
        )?,
    })
}

/// Numerically stable softplus(x) = ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss and implicit-reward margin for one pair. With the policy equal to the
/// reference the margin is exactly zero and the loss is ln 2.
pub fn dpo_loss(
    params: &ModelParams,
    reference: &ReferenceModel,
    pair: &EncodedPair,
    beta: f64,
    cap: usize,
) -> Result<(f64, f64)> {
    let (s_pos, _) = logprob_sequence(params, &pair.chosen, cap)?;
    let (s_neg, _) = logprob_sequence(params, &pair.rejected, cap)?;
    let (r_pos, _) = logprob_sequence(reference.params(), &pair.chosen, cap)?;
    let (r_neg, _) = logprob_sequence(reference.params(), &pair.rejected, cap)?;
    let margin = beta * ((s_pos - r_pos) - (s_neg - r_neg));
    Ok((softplus(-margin), margin))
}

/// Add `coeff * (onehot(target) - softmax)` into dlogits at each response
/// position within the cap — the gradient of the summed log-probability.
fn add_logprob_grad(
    logits: &[f64],
    seq: &EncodedSequence,
    vocab_size: usize,
    cap: usize,
    coeff: f64,
    dlogits: &mut [f64],
) {
    let mut used = 0;
    for t in 1..seq.ids.len() {
        if seq.role_mask[t] != Role::Response {
            continue;
        }
        let row = &logits[(t - 1) * vocab_size..t * vocab_size];
        let probs = softmax_row(row);
        let drow = &mut dlogits[(t - 1) * vocab_size..t * vocab_size];
        for (i, p) in probs.iter().enumerate() {
            drow[i] -= coeff * p;
        }
        drow[seq.ids[t] as usize] += coeff;
        used += 1;
        if used == cap {
            break;
        }
    }
}

pub struct DpoBatchEval {
    pub loss: f64,
    pub mean_margin: f64,
    /// Fraction of pairs with a positive margin.
    pub pref_accuracy: f64,
}

/// Mean loss over a batch plus its exact gradient. Reference scores may be
/// passed in precomputed (they never change during an epoch).
pub fn dpo_grad_batch(
    params: &ModelParams,
    reference: &ReferenceModel,
    batch: &[&EncodedPair],
    ref_scores: Option<&[(f64, f64)]>,
    beta: f64,
    cap: usize,
    grads: &mut ModelParams,
) -> Result<DpoBatchEval> {
    if batch.is_empty() {
        return Err(Error::data("dpo: empty batch"));
    }
    let v = params.config.vocab_size;
    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut margin_sum = 0.0;
    let mut wins = 0usize;
    for (i, pair) in batch.iter().enumerate() {
        let (chosen_logits, chosen_trace) = forward(params, &pair.chosen.ids)?;
        let (rejected_logits, rejected_trace) = forward(params, &pair.rejected.ids)?;
        let s_pos = sum_response_logprob(&chosen_logits, &pair.chosen, v, cap);
        let s_neg = sum_response_logprob(&rejected_logits, &pair.rejected, v, cap);
        let (r_pos, r_neg) = match ref_scores {
            Some(scores) => scores[i],
            None => (
                logprob_sequence(reference.params(), &pair.chosen, cap)?.0,
                logprob_sequence(reference.params(), &pair.rejected, cap)?.0,
            ),
        };
        let margin = beta * ((s_pos - r_pos) - (s_neg - r_neg));
        loss += softplus(-margin) * inv_b;
        margin_sum += margin;
        if margin > 0.0 {
            wins += 1;
        }
        // dLoss/dmargin = -sigmoid(-margin)
        let g = sigmoid(-margin);
        let mut d_chosen = vec![0.0; chosen_logits.len()];
        add_logprob_grad(
            &chosen_logits,
            &pair.chosen,
            v,
            cap,
            -g * beta * inv_b,
            &mut d_chosen,
        );
        // The accumulated coefficient is negative of the chosen one, so the
        // update raises chosen and lowers rejected log-probabilities.
        let mut d_rejected = vec![0.0; rejected_logits.len()];
        add_logprob_grad(
            &rejected_logits,
            &pair.rejected,
            v,
            cap,
            g * beta * inv_b,
            &mut d_rejected,
        );
        // Note the signs: loss gradients, so chosen gets softmax-minus-onehot
        // scaled positively.
        backward(params, &chosen_trace, &d_chosen, grads)?;
        backward(params, &rejected_trace, &d_rejected, grads)?;
    }
    Ok(DpoBatchEval {
        loss,
        mean_margin: margin_sum * inv_b,
        pref_accuracy: wins as f64 / batch.len() as f64,
    })
}

fn sum_response_logprob(logits: &[f64], seq: &EncodedSequence, v: usize, cap: usize) -> f64 {
    let mut sum = 0.0;
    let mut used = 0;
    for t in 1..seq.ids.len() {
        if seq.role_mask[t] != Role::Response {
            continue;
        }
        sum += log_softmax_row(&logits[(t - 1) * v..t * v])[seq.ids[t] as usize];
        used += 1;
        if used == cap {
            break;
        }
    }
    sum
}

#[derive(Debug, Clone, Serialize)]
pub struct DpoStepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mean_margin: f64,
    pub pref_accuracy: f64,
}

/// Render a DPO step log as CSV
/// (`step,epoch,lr,loss,mean_margin,pref_accuracy`).
pub fn render_dpo_log(log: &[DpoStepLog]) -> String {
    let mut out = String::from("step,epoch,lr,loss,mean_margin,pref_accuracy\n");
    for l in log {
        out.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.6}\n",
            l.step, l.epoch, l.lr, l.loss, l.mean_margin, l.pref_accuracy
        ));
    }
    out
}

pub struct DpoRun {
    pub params: ModelParams,
    pub opt: OptimState,
    pub checkpoints: Vec<(usize, ModelParams)>,
    pub log: Vec<DpoStepLog>,
}

/// Incremental DPO driver: owns the pairs, their fixed reference scores, and
/// the optimizer state, advancing one epoch per call.
pub struct DpoTrainer {
    config: DpoConfig,
    schedule: crate::optim::ScheduleConfig,
    pairs: Vec<EncodedPair>,
    ref_scores: Vec<(f64, f64)>,
    reference: ReferenceModel,
    total_steps: u64,
    pub params: ModelParams,
    pub opt: OptimState,
    epoch: usize,
    step: u64,
    hit_step_cap: bool,
}

impl DpoTrainer {
    pub fn new(
        params: ModelParams,
        reference: &ReferenceModel,
        pairs: Vec<EncodedPair>,
        config: DpoConfig,
    ) -> Result<DpoTrainer> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(Error::data("train_dpo: no preference pairs"));
        }
        let steps_per_epoch = pairs.len().div_ceil(config.batch_size) as u64;
        let total_steps = match config.max_steps {
            Some(cap) => (steps_per_epoch * config.epochs as u64).min(cap.max(1)),
            None => steps_per_epoch * config.epochs as u64,
        };
        let schedule = config.schedule.with_total_steps(total_steps)?;

        // Reference scores are fixed for the whole run; compute them once.
        let mut ref_scores = Vec::with_capacity(pairs.len());
        for pair in &pairs {
            ref_scores.push((
                logprob_sequence(reference.params(), &pair.chosen, config.logprob_cap)?.0,
                logprob_sequence(reference.params(), &pair.rejected, config.logprob_cap)?.0,
            ));
        }
        let opt = OptimState::new(&params);
        Ok(DpoTrainer {
            config,
            schedule,
            pairs,
            ref_scores,
            reference: reference.clone(),
            total_steps,
            params,
            opt,
            epoch: 0,
            step: 0,
            hit_step_cap: false,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.config.epochs || self.hit_step_cap
    }

    pub fn step_epoch(&mut self) -> Result<Vec<DpoStepLog>> {
        if self.done() {
            return Err(Error::config("step_epoch called after the final epoch"));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        Rng::derive(self.config.seed, "dpo-shuffle", epoch as u64).shuffle(&mut order);
        let mut log = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            if self.step >= self.total_steps {
                self.hit_step_cap = true;
                break;
            }
            let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &self.pairs[i]).collect();
            let batch_refs: Vec<(f64, f64)> = chunk.iter().map(|&i| self.ref_scores[i]).collect();
            let mut grads = self.params.zeros_like();
            let eval = dpo_grad_batch(
                &self.params,
                &self.reference,
                &batch,
                Some(&batch_refs),
                self.config.beta,
                self.config.logprob_cap,
                &mut grads,
            )?;
            clip_global_norm(&mut grads, self.config.grad_clip)?;
            self.step += 1;
            let lr = lr_at(&self.schedule, self.step)?;
            adam_step(
                &mut self.params,
                &grads,
                &mut self.opt,
                &self.config.adam,
                lr,
                self.config.weight_decay,
            )?;
            log.push(DpoStepLog {
                step: self.step,
                epoch,
                lr,
                loss: eval.loss,
                mean_margin: eval.mean_margin,
                pref_accuracy: eval.pref_accuracy,
            });
        }
        self.epoch = epoch;
        Ok(log)
    }
}

/// Train the policy against the frozen reference. The checkpoint callback
/// fires at epoch 0 (the start state) and after every epoch.
pub fn train_dpo(
    params: ModelParams,
    reference: &ReferenceModel,
    pairs: &[EncodedPair],
    config: &DpoConfig,
    mut on_checkpoint: impl FnMut(usize, &ModelParams, &OptimState) -> Result<()>,
) -> Result<DpoRun> {
    let mut trainer = DpoTrainer::new(params, reference, pairs.to_vec(), config.clone())?;
    let mut checkpoints = Vec::new();
    let mut log = Vec::new();

    on_checkpoint(0, &trainer.params, &trainer.opt)?;
    checkpoints.push((0, trainer.params.clone()));

    while !trainer.done() {
        log.extend(trainer.step_epoch()?);
        let epoch = trainer.epoch();
        on_checkpoint(epoch, &trainer.params, &trainer.opt)?;
        checkpoints.push((epoch, trainer.params.clone()));
    }

    Ok(DpoRun {
        params: trainer.params,
        opt: trainer.opt,
        checkpoints,
        log,
    })
}

/// The ablation loop: DPO straight from the untrained initialization, with
/// that same initialization frozen as the reference.
pub fn run_direct_dpo(
    init: ModelParams,
    pairs: &[EncodedPair],
    config: &DpoConfig,
    on_checkpoint: impl FnMut(usize, &ModelParams, &OptimState) -> Result<()>,
) -> Result<DpoRun> {
    let reference = ReferenceModel::new(&init);
    train_dpo(
        f32_roundtrip(&init),
        &reference,
        pairs,
        config,
        on_checkpoint,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_preference_pairs, generate_pairs, DatasetName, DatasetSpec};
    use crate::model::ModelConfig;
    use crate::textcodec::Vocab;

    fn model_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            context_len: 128,
            vocab_size: vocab,
            init_seed: 11,
        }
    }

    fn encoded_pairs(n: usize, seed: u64) -> (Vocab, Vec<EncodedPair>) {
        let vocab = Vocab::synthetic();
        let spec = DatasetSpec {
            name: DatasetName::Mixed,
            n_pairs: n,
            seed,
            chain_length_range: (1, 2),
            modulus: 13,
        };
        let generated = generate_pairs(seed, &spec).unwrap();
        let dataset: Vec<_> = generated.into_iter().flat_map(|(_, f, r)| [f, r]).collect();
        let pairs = build_preference_pairs(&dataset).unwrap();
        let encoded = pairs
            .iter()
            .map(|p| encode_preference_pair(&vocab, p, 128).unwrap())
            .collect();
        (vocab, encoded)
    }

    #[test]
    fn policy_equal_to_reference_gives_ln2_loss_and_zero_margin() {
        let (vocab, pairs) = encoded_pairs(2, 1);
        let p = f32_roundtrip(&ModelParams::init(model_cfg(vocab.size())).unwrap());
        let reference = ReferenceModel::new(&p);
        for pair in &pairs {
            let (loss, m) = dpo_loss(&p, &reference, pair, 0.6, 1000).unwrap();
            assert_eq!(m, 0.0);
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
        }
    }

    #[test]
    fn softplus_value_from_independent_oracle() {
        // softplus(-0.6) computed through the sigmoid identity
        // -ln(sigmoid(0.6)) as an independent route.
        let via_sigmoid = -sigmoid(0.6).ln();
        let direct = softplus(-0.6);
        assert!((via_sigmoid - direct).abs() < 1e-15);
        assert!((direct - 0.4374879504858856).abs() < 1e-12, "{direct}");
    }

    #[test]
    fn swapping_chosen_and_rejected_negates_the_margin() {
        let (vocab, pairs) = encoded_pairs(3, 2);
        let p = ModelParams::init(model_cfg(vocab.size())).unwrap();
        let mut q = p.clone();
        // Make the policy differ from the reference so margins are nonzero.
        for x in &mut q.head.data {
            *x += 0.01;
        }
        let reference = ReferenceModel::new(&p);
        for pair in &pairs {
            let swapped = EncodedPair {
                pair_id: pair.pair_id.clone(),
                chosen: pair.rejected.clone(),
                rejected: pair.chosen.clone(),
            };
            let (_, m) = dpo_loss(&q, &reference, pair, 0.6, 1000).unwrap();
            let (_, m_swapped) = dpo_loss(&q, &reference, &swapped, 0.6, 1000).unwrap();
            assert_eq!(m, -m_swapped);
        }
    }

    #[test]
    fn margin_is_linear_in_beta() {
        let (vocab, pairs) = encoded_pairs(2, 3);
        let p = ModelParams::init(model_cfg(vocab.size())).unwrap();
        let mut q = p.clone();
        q.head.data[5] += 0.2;
        let reference = ReferenceModel::new(&p);
        let (_, m1) = dpo_loss(&q, &reference, &pairs[0], 0.2, 1000).unwrap();
        let (_, m3) = dpo_loss(&q, &reference, &pairs[0], 0.6, 1000).unwrap();
        assert!((m3 - 3.0 * m1).abs() < 1e-12, "{m3} vs 3 * {m1}");
    }

    #[test]
    fn loss_pair_sum_is_convex_around_zero() {
        for m in [-2.0, -0.5, 0.0, 0.3, 1.7] {
            let total = softplus(-m) + softplus(m);
            assert!(
                total >= 2.0 * std::f64::consts::LN_2 - 1e-15,
                "m={m}: {total}"
            );
            if m == 0.0 {
                assert!((total - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        let (vocab, pairs) = encoded_pairs(1, 4);
        let p0 = ModelParams::init(model_cfg(vocab.size())).unwrap();
        let mut p = p0.clone();
        p.head.data[3] += 0.05; // move off the reference so gradients are informative
        let reference = ReferenceModel::new(&p0);
        let batch: Vec<&EncodedPair> = pairs.iter().take(2).collect();

        let mut grads = p.zeros_like();
        let eval = dpo_grad_batch(&p, &reference, &batch, None, 0.6, 1000, &mut grads).unwrap();
        assert!(eval.loss.is_finite());

        let loss_at = |params: &ModelParams| -> f64 {
            batch
                .iter()
                .map(|pair| dpo_loss(params, &reference, pair, 0.6, 1000).unwrap().0)
                .sum::<f64>()
                / batch.len() as f64
        };

        let eps = 1e-4;
        // Spot-check a slice of every tensor kind rather than every element;
        // the exhaustive sweep lives in the acceptance suite.
        let n_tensors = p.tensors().len();
        for ti in 0..n_tensors {
            let len = p.tensors()[ti].1.len();
            for ei in [0usize, len / 2, len - 1] {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].1.data[ei] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].1.data[ei] -= eps;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
                let analytic = grads.tensors()[ti].1.data[ei];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(
                    ((numeric - analytic) / denom).abs() < 1e-3,
                    "tensor {} [{}]: analytic {} vs numeric {}",
                    p.tensors()[ti].0,
                    ei,
                    analytic,
                    numeric
                );
            }
        }
    }

    #[test]
    fn seven_epochs_emit_eight_checkpoints_and_start_at_ln2() {
        let (vocab, pairs) = encoded_pairs(4, 5);
        let init = f32_roundtrip(&ModelParams::init(model_cfg(vocab.size())).unwrap());
        let reference = ReferenceModel::new(&init);
        let config = DpoConfig {
            epochs: 7,
            batch_size: 4,
            seed: 5,
            schedule: ScheduleSpec {
                peak_lr: 1e-5,
                min_lr: 0.0,
                warmup_ratio: 0.0,
                restarts: 0,
            },
            ..DpoConfig::default()
        };
        let run = train_dpo(init, &reference, &pairs, &config, |_, _, _| Ok(())).unwrap();
        assert_eq!(run.checkpoints.len(), 8);
        assert_eq!(run.checkpoints[0].0, 0);
        assert_eq!(run.checkpoints.last().unwrap().0, 7);
        // First step's loss is ln 2 (policy started at the reference).
        let first = &run.log[0];
        assert!(
            (first.loss - std::f64::consts::LN_2).abs() < 1e-6,
            "{}",
            first.loss
        );
    }

    #[test]
    fn reference_bytes_are_untouched_by_training() {
        let (vocab, pairs) = encoded_pairs(3, 6);
        let init = f32_roundtrip(&ModelParams::init(model_cfg(vocab.size())).unwrap());
        let reference = ReferenceModel::new(&init);
        let before = crate::checkpoint::serialize_checkpoint(reference.params(), None);
        let config = DpoConfig {
            epochs: 2,
            batch_size: 2,
            seed: 1,
            ..DpoConfig::default()
        };
        let _ = train_dpo(init, &reference, &pairs, &config, |_, _, _| Ok(())).unwrap();
        let after = crate::checkpoint::serialize_checkpoint(reference.params(), None);
        assert_eq!(before, after);
    }

    #[test]
    fn margin_growth_is_monotone_on_the_pinned_run() {
        let (vocab, pairs) = encoded_pairs(4, 7);
        let init = f32_roundtrip(&ModelParams::init(model_cfg(vocab.size())).unwrap());
        let reference = ReferenceModel::new(&init);
        let config = DpoConfig {
            epochs: 5,
            batch_size: 8,
            seed: 7,
            schedule: ScheduleSpec {
                peak_lr: 1e-4,
                min_lr: 1e-5,
                warmup_ratio: 0.0,
                restarts: 0,
            },
            ..DpoConfig::default()
        };
        let run = train_dpo(init.clone(), &reference, &pairs, &config, |_, _, _| Ok(())).unwrap();
        // Mean margin per epoch, non-decreasing on this pinned seed.
        let epoch_mean = |e: usize| {
            let xs: Vec<f64> = run
                .log
                .iter()
                .filter(|l| l.epoch == e)
                .map(|l| l.mean_margin)
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let means: Vec<f64> = (1..=5).map(epoch_mean).collect();
        for w in means.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "epoch means not monotone: {means:?}");
        }
    }

    #[test]
    fn direct_dpo_with_zero_steps_leaves_the_model_unchanged() {
        let (vocab, pairs) = encoded_pairs(2, 8);
        let init = ModelParams::init(model_cfg(vocab.size())).unwrap();
        let config = DpoConfig {
            epochs: 1,
            max_steps: Some(0),
            seed: 0,
            ..DpoConfig::default()
        };
        // max_steps 0 is clamped to 1 by the schedule; use lr 0 instead to get
        // a true no-op pass.
        let mut config = config;
        config.max_steps = None;
        config.schedule.peak_lr = 0.0;
        config.schedule.min_lr = 0.0;
        let run = run_direct_dpo(init.clone(), &pairs, &config, |_, _, _| Ok(())).unwrap();
        assert_eq!(run.params, f32_roundtrip(&init));
    }

    #[test]
    fn max_steps_caps_the_run() {
        let (vocab, pairs) = encoded_pairs(4, 9);
        let init = f32_roundtrip(&ModelParams::init(model_cfg(vocab.size())).unwrap());
        let reference = ReferenceModel::new(&init);
        let config = DpoConfig {
            epochs: 7,
            batch_size: 2,
            max_steps: Some(3),
            seed: 2,
            ..DpoConfig::default()
        };
        let run = train_dpo(init, &reference, &pairs, &config, |_, _, _| Ok(())).unwrap();
        assert_eq!(run.log.len(), 3);
    }

    #[test]
    fn dpo_log_renders_with_expected_header() {
        let csv = render_dpo_log(&[DpoStepLog {
            step: 1,
            epoch: 1,
            lr: 5e-7,
            loss: 0.69,
            mean_margin: 0.0,
            pref_accuracy: 0.5,
        }]);
        assert!(csv.starts_with("step,epoch,lr,loss,mean_margin,pref_accuracy\n"));
    }
}

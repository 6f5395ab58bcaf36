//! Synthetic forward/reverse reasoning corpora.
//!
//! Each instance is a modular affine chain: a start value folded through
//! ADD/MUL steps mod a prime. The forward question gives start and ops and
//! asks for the result; the reverse question gives ops and result and asks
//! for the start, with a chain of thought that undoes each step (SUB for ADD,
//! multiplication by the modular inverse for MUL). Primality of the modulus
//! makes every chain uniquely invertible, so every generated claim can be
//! checked against ground truth.

pub mod teacher;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::textcodec::{self, number_tokens, response_tokens};
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OpKind {
    Add,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpStep {
    pub kind: OpKind,
    pub operand: u64,
}

/// A modular affine chain together with its evaluated result.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpChain {
    pub start: u64,
    pub ops: Vec<OpStep>,
    pub modulus: u64,
    pub result: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn flipped(self) -> Direction {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Direction::Forward => write!(f, "forward"),
            Direction::Reverse => write!(f, "reverse"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Teacher,
}

/// One direction of a reasoning instance. Token sequences are stored as token
/// names so the JSONL files are readable and survive vocabulary evolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub pair_id: String,
    pub direction: Direction,
    pub question: Vec<String>,
    pub cot: Vec<String>,
    pub answer: Vec<String>,
    pub source: Source,
}

impl Example {
    /// Total surface-token count, the probe selection key.
    pub fn token_count(&self) -> usize {
        self.question.len() + self.cot.len() + self.answer.len()
    }

    /// Full response sequence: `cot ++ SEP_A ++ answer`.
    pub fn response(&self) -> Vec<String> {
        response_tokens(&self.cot, &self.answer)
    }
}

/// (x, y+, y-): the chosen response matches the prompt direction, the
/// rejected one is the paired opposite-direction response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub pair_id: String,
    pub prompt_direction: Direction,
    pub prompt: Vec<String>,
    pub chosen: Vec<String>,
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetName {
    #[serde(rename = "D_f")]
    Forward,
    #[serde(rename = "D_r")]
    Reverse,
    #[serde(rename = "D_m")]
    Mixed,
    #[serde(rename = "D_half")]
    Half,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    pub n_pairs: usize,
    pub seed: u64,
    pub chain_length_range: (usize, usize),
    pub modulus: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !is_prime(self.modulus) {
            return Err(Error::config(format!(
                "modulus {} is not prime",
                self.modulus
            )));
        }
        let (lo, hi) = self.chain_length_range;
        if lo < 1 || hi > 8 || lo > hi {
            return Err(Error::config(format!(
                "chain length range [{lo}, {hi}] must lie within [1, 8]"
            )));
        }
        if self.n_pairs == 0 {
            return Err(Error::config("n_pairs must be at least 1"));
        }
        Ok(())
    }
}

pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    let mut d = 2;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 1;
    }
    true
}

/// Modular inverse by extended Euclid. `k` must be nonzero mod the prime `p`.
pub fn mod_inverse(k: u64, p: u64) -> Result<u64> {
    let k = k % p;
    if k == 0 {
        return Err(Error::data(format!("no inverse of 0 mod {p}")));
    }
    let (mut r0, mut r1) = (p as i128, k as i128);
    let (mut t0, mut t1) = (0i128, 1i128);
    while r1 != 0 {
        let q = r0 / r1;
        (r0, r1) = (r1, r0 - q * r1);
        (t0, t1) = (t1, t0 - q * t1);
    }
    if r0 != 1 {
        return Err(Error::data(format!("{k} has no inverse mod {p}")));
    }
    Ok(t0.rem_euclid(p as i128) as u64)
}

/// Fold a start value through the ops left to right, reducing mod p each step.
pub fn eval_chain(start: u64, ops: &[OpStep], modulus: u64) -> u64 {
    let mut v = start % modulus;
    for op in ops {
        v = match op.kind {
            OpKind::Add => (v + op.operand) % modulus,
            OpKind::Mul => (v * op.operand) % modulus,
        };
    }
    v
}

fn forward_question(chain: &OpChain) -> Vec<String> {
    let mut q = vec![textcodec::TOK_START.to_string()];
    q.extend(number_tokens(chain.start));
    push_ops(&mut q, &chain.ops);
    q.push(textcodec::TOK_MOD.to_string());
    q.extend(number_tokens(chain.modulus));
    q.push(textcodec::TOK_ASK.to_string());
    q.push(textcodec::TOK_RESULT.to_string());
    q
}

fn reverse_question(chain: &OpChain) -> Vec<String> {
    let mut q = vec![textcodec::TOK_RESULT.to_string()];
    q.extend(number_tokens(chain.result));
    push_ops(&mut q, &chain.ops);
    q.push(textcodec::TOK_MOD.to_string());
    q.extend(number_tokens(chain.modulus));
    q.push(textcodec::TOK_ASK.to_string());
    q.push(textcodec::TOK_START.to_string());
    q
}

fn push_ops(out: &mut Vec<String>, ops: &[OpStep]) {
    for op in ops {
        out.push(
            match op.kind {
                OpKind::Add => textcodec::TOK_ADD,
                OpKind::Mul => textcodec::TOK_MUL,
            }
            .to_string(),
        );
        out.extend(number_tokens(op.operand));
    }
}

/// One chain-of-thought step: `prev OP k = value`. Echoing the previous value
/// keeps every step's prediction a local function of the few tokens before
/// the `=`, which a two-layer model can learn as a reusable rule instead of
/// memorizing whole sequences.
fn push_step(out: &mut Vec<String>, prev: u64, word: &str, operand: u64, value: u64) {
    out.extend(number_tokens(prev));
    out.push(word.to_string());
    out.extend(number_tokens(operand));
    out.push(textcodec::TOK_EQ.to_string());
    out.extend(number_tokens(value));
}

/// Chain of thought for the forward direction: every intermediate value in order.
fn forward_cot(chain: &OpChain) -> Vec<String> {
    let mut cot = Vec::new();
    let mut v = chain.start % chain.modulus;
    for op in &chain.ops {
        let (word, next) = match op.kind {
            OpKind::Add => (textcodec::TOK_ADD, (v + op.operand) % chain.modulus),
            OpKind::Mul => (textcodec::TOK_MUL, (v * op.operand) % chain.modulus),
        };
        push_step(&mut cot, v, word, op.operand, next);
        v = next;
    }
    cot
}

fn draw_chain(rng: &mut Rng, spec: &DatasetSpec) -> OpChain {
    let p = spec.modulus;
    let (lo, hi) = spec.chain_length_range;
    let len = rng.range_inclusive(lo as u64, hi as u64) as usize;
    let start = rng.below(p);
    let ops: Vec<OpStep> = (0..len)
        .map(|_| OpStep {
            kind: if rng.below(2) == 0 {
                OpKind::Add
            } else {
                OpKind::Mul
            },
            operand: 1 + rng.below(p - 1),
        })
        .collect();
    let result = eval_chain(start, &ops, p);
    OpChain {
        start,
        ops,
        modulus: p,
        result,
    }
}

fn forward_example(chain: &OpChain, pair_id: String) -> Example {
    Example {
        id: format!("{pair_id}-fwd"),
        pair_id,
        direction: Direction::Forward,
        question: forward_question(chain),
        cot: forward_cot(chain),
        answer: number_tokens(chain.result),
        source: Source::Synthetic,
    }
}

/// Deterministic synthetic forward set. Each pair id gets its own derived RNG
/// stream; pairs are resolved in pair-id order, so generation is reproducible
/// (and parallel candidate generation with an ordered merge would reproduce
/// it). Two kinds of draws are rejected and retried from the same stream:
/// chains whose reverse response would be token-identical to the forward one
/// (a palindromic run of self-inverse MULs breaks the chosen/rejected
/// invariant), and chains already present in the set (duplicates would leak
/// "held-out" content into training splits and break encoding injectivity).
pub fn generate_forward(seed: u64, spec: &DatasetSpec) -> Result<Vec<(OpChain, Example)>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_pairs);
    let mut seen: HashSet<OpChain> = HashSet::new();
    for i in 0..spec.n_pairs {
        let mut rng = Rng::derive(seed, "gen-forward", i as u64);
        let pair_id = format!("{i:06}");
        let mut attempts = 0;
        let (chain, example) = loop {
            let chain = draw_chain(&mut rng, spec);
            if !seen.contains(&chain) {
                let example = forward_example(&chain, pair_id.clone());
                let reverse = invert_example(&chain, &example)?;
                if example.response() != reverse.response() {
                    break (chain, example);
                }
            }
            attempts += 1;
            if attempts > 500 {
                return Err(Error::config(format!(
                    "could not draw a fresh non-degenerate chain for pair {pair_id}; \
                     the chain space (modulus {}, lengths {:?}) is too small for {} pairs",
                    spec.modulus, spec.chain_length_range, spec.n_pairs
                )));
            }
        };
        seen.insert(chain.clone());
        out.push((chain, example));
    }
    Ok(out)
}

/// Invert a synthetic forward example: the reverse question states the ops and
/// result and asks for the start; the chain of thought undoes each step in
/// reverse order, and the answer is the original start value.
pub fn invert_example(chain: &OpChain, fwd: &Example) -> Result<Example> {
    if fwd.direction != Direction::Forward {
        return Err(Error::data(format!(
            "invert_example expects a forward example, got {}",
            fwd.direction
        )));
    }
    let p = chain.modulus;
    let mut cot = Vec::new();
    let mut v = chain.result;
    for op in chain.ops.iter().rev() {
        let prev = v;
        match op.kind {
            OpKind::Add => {
                v = (v + p - op.operand % p) % p;
                push_step(&mut cot, prev, textcodec::TOK_SUB, op.operand, v);
            }
            OpKind::Mul => {
                if op.operand % p == 0 {
                    return Err(Error::data(format!(
                        "cannot invert MUL by 0 mod {p} in pair {}",
                        fwd.pair_id
                    )));
                }
                let inv = mod_inverse(op.operand, p)?;
                v = (v * inv) % p;
                push_step(&mut cot, prev, textcodec::TOK_MUL, inv, v);
            }
        }
    }
    Ok(Example {
        id: format!("{}-rev", fwd.pair_id),
        pair_id: fwd.pair_id.clone(),
        direction: Direction::Reverse,
        question: reverse_question(chain),
        cot,
        answer: number_tokens(chain.start),
        source: fwd.source,
    })
}

/// Generate a paired forward/reverse corpus.
pub fn generate_pairs(seed: u64, spec: &DatasetSpec) -> Result<Vec<(OpChain, Example, Example)>> {
    generate_forward(seed, spec)?
        .into_iter()
        .map(|(chain, fwd)| {
            let rev = invert_example(&chain, &fwd)?;
            Ok((chain, fwd, rev))
        })
        .collect()
}

fn check_exact_pairing(fwd: &[Example], rev: &[Example]) -> Result<()> {
    if fwd.len() != rev.len() {
        return Err(Error::data(format!(
            "forward/reverse sets differ in size: {} vs {}",
            fwd.len(),
            rev.len()
        )));
    }
    let mut rev_ids: Vec<&str> = rev.iter().map(|e| e.pair_id.as_str()).collect();
    rev_ids.sort_unstable();
    let mut fwd_ids: Vec<&str> = fwd.iter().map(|e| e.pair_id.as_str()).collect();
    fwd_ids.sort_unstable();
    if fwd_ids != rev_ids {
        return Err(Error::data(
            "forward/reverse sets do not pair up by pair_id".to_string(),
        ));
    }
    Ok(())
}

/// Union of a forward set and its paired reverse set, interleaved and then
/// shuffled deterministically under the seed.
pub fn build_mixed(fwd: &[Example], rev: &[Example], seed: u64) -> Result<Vec<Example>> {
    check_exact_pairing(fwd, rev)?;
    let by_id: HashMap<&str, &Example> = rev.iter().map(|e| (e.pair_id.as_str(), e)).collect();
    let mut mixed = Vec::with_capacity(fwd.len() * 2);
    for f in fwd {
        mixed.push(f.clone());
        mixed.push((*by_id[f.pair_id.as_str()]).clone());
    }
    Rng::derive(seed, "mixed-shuffle", 0).shuffle(&mut mixed);
    Ok(mixed)
}

/// First half of the forward set plus the paired reverses (a smaller mixed set).
pub fn build_half(fwd: &[Example], rev: &[Example], seed: u64) -> Result<Vec<Example>> {
    check_exact_pairing(fwd, rev)?;
    let n = fwd.len() / 2;
    let fwd_half = &fwd[..n];
    let by_id: HashMap<&str, &Example> = rev.iter().map(|e| (e.pair_id.as_str(), e)).collect();
    let rev_half: Vec<Example> = fwd_half
        .iter()
        .map(|f| (*by_id[f.pair_id.as_str()]).clone())
        .collect();
    build_mixed(fwd_half, &rev_half, seed)
}

/// One preference pair per example: the example's own response is chosen, the
/// paired opposite-direction response rejected. Swapping the prompt direction
/// therefore swaps chosen and rejected exactly.
pub fn build_preference_pairs(dataset: &[Example]) -> Result<Vec<PreferencePair>> {
    let mut by_key: HashMap<(&str, Direction), &Example> = HashMap::new();
    for e in dataset {
        if by_key
            .insert((e.pair_id.as_str(), e.direction), e)
            .is_some()
        {
            return Err(Error::data(format!(
                "duplicate ({}, {}) in dataset",
                e.pair_id, e.direction
            )));
        }
    }
    let mut pairs = Vec::with_capacity(dataset.len());
    for e in dataset {
        let other = by_key
            .get(&(e.pair_id.as_str(), e.direction.flipped()))
            .ok_or_else(|| {
                Error::data(format!(
                    "pair {} is missing its {} counterpart",
                    e.pair_id,
                    e.direction.flipped()
                ))
            })?;
        let chosen = e.response();
        let rejected = other.response();
        if chosen == rejected {
            return Err(Error::data(format!(
                "pair {}: chosen and rejected responses are identical",
                e.pair_id
            )));
        }
        pairs.push(PreferencePair {
            pair_id: e.pair_id.clone(),
            prompt_direction: e.direction,
            prompt: e.question.clone(),
            chosen,
            rejected,
        });
    }
    Ok(pairs)
}

/// Probe train/test split. Train sets take the `n` forward examples with the
/// fewest surface tokens (ties broken by ascending pair_id) plus their reverse
/// counterparts; test sets take the next `n` under the same ordering, so they
/// are held out but drawn from the same distribution.
#[derive(Debug, Clone)]
pub struct ProbeSets {
    pub train_forward: Vec<Example>,
    pub train_reverse: Vec<Example>,
    pub train_mixed: Vec<Example>,
    pub test_forward: Vec<Example>,
    pub test_reverse: Vec<Example>,
    pub test_mixed: Vec<Example>,
}

pub fn build_probe_sets(
    fwd: &[Example],
    rev: &[Example],
    n: usize,
    seed: u64,
) -> Result<ProbeSets> {
    check_exact_pairing(fwd, rev)?;
    if n == 0 {
        return Err(Error::config("probe size must be at least 1"));
    }
    if 2 * n > fwd.len() {
        return Err(Error::config(format!(
            "probe size {n} needs {} forward examples (train + held-out test), only {} available",
            2 * n,
            fwd.len()
        )));
    }
    let mut order: Vec<&Example> = fwd.iter().collect();
    order.sort_by(|a, b| {
        a.token_count()
            .cmp(&b.token_count())
            .then_with(|| a.pair_id.cmp(&b.pair_id))
    });
    let by_id: HashMap<&str, &Example> = rev.iter().map(|e| (e.pair_id.as_str(), e)).collect();
    let take = |slice: &[&Example]| -> (Vec<Example>, Vec<Example>) {
        let f: Vec<Example> = slice.iter().map(|e| (*e).clone()).collect();
        let r: Vec<Example> = slice
            .iter()
            .map(|e| (*by_id[e.pair_id.as_str()]).clone())
            .collect();
        (f, r)
    };
    let (train_forward, train_reverse) = take(&order[..n]);
    let (test_forward, test_reverse) = take(&order[n..2 * n]);
    let train_mixed = build_mixed(&train_forward, &train_reverse, seed)?;
    let test_mixed = build_mixed(&test_forward, &test_reverse, seed.wrapping_add(1))?;
    Ok(ProbeSets {
        train_forward,
        train_reverse,
        train_mixed,
        test_forward,
        test_reverse,
        test_mixed,
    })
}

/// Render a dataset as JSONL (one object per line, LF endings).
pub fn render_jsonl(dataset: &[Example]) -> String {
    let mut out = String::new();
    for e in dataset {
        out.push_str(&serde_json::to_string(e).expect("example serializes"));
        out.push('\n');
    }
    out
}

/// Parse JSONL text; malformed lines are reported with their 1-based number.
pub fn parse_jsonl(text: &str) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: Example = serde_json::from_str(line)
            .map_err(|err| Error::data(format!("line {}: {err}", i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

pub fn write_jsonl(dataset: &[Example], path: &Path) -> Result<()> {
    let mut f =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(render_jsonl(dataset).as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(f);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Example = serde_json::from_str(&line)
            .map_err(|err| Error::data(format!("{}: line {}: {err}", path.display(), i + 1)))?;
        out.push(e);
    }
    Ok(out)
}

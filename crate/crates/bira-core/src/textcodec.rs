//! Fixed word-level vocabulary and the token layout used for every sequence.
//!
//! A sequence is laid out as
//! `BOS <FWD|REV> question... SEP_Q cot... SEP_A answer... EOS`
//! and the role mask marks everything after SEP_Q (through EOS) as response.
//! Numbers are rendered digit-by-digit; operator words and the step marker
//! `=` keep the chain-of-thought decodable without ambiguity.

use crate::corpus::{Direction, Example};
use crate::error::{Error, Result};
use std::collections::HashMap;

pub const TOK_PAD: &str = "<PAD>";
pub const TOK_BOS: &str = "<BOS>";
pub const TOK_EOS: &str = "<EOS>";
pub const TOK_SEP_Q: &str = "<SEP_Q>";
pub const TOK_SEP_A: &str = "<SEP_A>";
pub const TOK_FWD: &str = "<FWD>";
pub const TOK_REV: &str = "<REV>";

pub const TOK_ADD: &str = "ADD";
pub const TOK_MUL: &str = "MUL";
pub const TOK_SUB: &str = "SUB";
pub const TOK_MOD: &str = "MOD";
pub const TOK_START: &str = "START";
pub const TOK_RESULT: &str = "RESULT";
pub const TOK_ASK: &str = "ASK";
pub const TOK_EQ: &str = "=";

/// Token ids for the special tokens, resolved once at vocab construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub sep_q: u32,
    pub sep_a: u32,
    pub fwd: u32,
    pub rev: u32,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    special: SpecialIds,
}

/// Per-position role: prompt tokens are never loss targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Prompt,
    Response,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub role_mask: Vec<Role>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of response positions (loss targets).
    pub fn response_count(&self) -> usize {
        self.role_mask
            .iter()
            .filter(|r| **r == Role::Response)
            .count()
    }
}

/// Fields recovered from a well-formed encoded sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedFields {
    pub direction: Direction,
    pub question: Vec<String>,
    pub cot: Vec<String>,
    pub answer: Vec<String>,
}

impl Vocab {
    /// The fixed vocabulary for the synthetic modular-chain task.
    pub fn synthetic() -> Vocab {
        let mut tokens: Vec<String> = vec![
            TOK_PAD, TOK_BOS, TOK_EOS, TOK_SEP_Q, TOK_SEP_A, TOK_FWD, TOK_REV,
        ]
        .into_iter()
        .map(String::from)
        .collect();
        for d in 0..10 {
            tokens.push(d.to_string());
        }
        for w in [
            TOK_ADD, TOK_MUL, TOK_SUB, TOK_MOD, TOK_START, TOK_RESULT, TOK_ASK, TOK_EQ,
        ] {
            tokens.push(w.to_string());
        }
        Vocab::from_tokens(tokens).expect("builtin vocab is valid")
    }

    /// Build from an explicit token list (id = position). Specials must be present.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() > 128 {
            return Err(Error::config(format!(
                "vocab size {} exceeds limit 128",
                tokens.len()
            )));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate token name {t:?}")));
            }
        }
        let find = |name: &str| -> Result<u32> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::config(format!("vocab missing special token {name}")))
        };
        let special = SpecialIds {
            pad: find(TOK_PAD)?,
            bos: find(TOK_BOS)?,
            eos: find(TOK_EOS)?,
            sep_q: find(TOK_SEP_Q)?,
            sep_a: find(TOK_SEP_A)?,
            fwd: find(TOK_FWD)?,
            rev: find(TOK_REV)?,
        };
        Ok(Vocab {
            tokens,
            index,
            special,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn special(&self) -> SpecialIds {
        self.special
    }

    pub fn id(&self, name: &str) -> Result<u32> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::data(format!("unknown token {name:?}")))
    }

    pub fn name(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| Error::data(format!("token id {id} out of range")))
    }

    fn encode_names(&self, names: &[String], out: &mut Vec<u32>) -> Result<()> {
        for n in names {
            out.push(self.id(n)?);
        }
        Ok(())
    }

    /// Encode a full example: `BOS dir question SEP_Q cot SEP_A answer EOS`.
    pub fn encode_example(&self, e: &Example, context_len: usize) -> Result<EncodedSequence> {
        let response: Vec<String> = response_tokens(&e.cot, &e.answer);
        self.encode_prompt_response(e.direction, &e.question, &response, context_len)
    }

    /// Encode a (question, response) pair under a prompt direction. The response
    /// sequence is everything after SEP_Q excluding the final EOS, so a full
    /// example response is `cot ++ SEP_A ++ answer`.
    pub fn encode_prompt_response(
        &self,
        direction: Direction,
        question: &[String],
        response: &[String],
        context_len: usize,
    ) -> Result<EncodedSequence> {
        if question.is_empty() {
            return Err(Error::data("empty question"));
        }
        if response.is_empty() {
            return Err(Error::data("empty response"));
        }
        let mut ids = Vec::with_capacity(question.len() + response.len() + 4);
        ids.push(self.special.bos);
        ids.push(match direction {
            Direction::Forward => self.special.fwd,
            Direction::Reverse => self.special.rev,
        });
        self.encode_names(question, &mut ids)?;
        ids.push(self.special.sep_q);
        let prompt_len = ids.len();
        self.encode_names(response, &mut ids)?;
        ids.push(self.special.eos);
        if ids.len() > context_len {
            return Err(Error::data(format!(
                "sequence length {} exceeds context window {}",
                ids.len(),
                context_len
            )));
        }
        let mut role_mask = vec![Role::Prompt; prompt_len];
        role_mask.resize(ids.len(), Role::Response);
        Ok(EncodedSequence { ids, role_mask })
    }

    /// Encode just the prompt part (`BOS dir question SEP_Q`), for decoding tasks.
    pub fn encode_prompt(
        &self,
        direction: Direction,
        question: &[String],
        context_len: usize,
    ) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(question.len() + 3);
        ids.push(self.special.bos);
        ids.push(match direction {
            Direction::Forward => self.special.fwd,
            Direction::Reverse => self.special.rev,
        });
        self.encode_names(question, &mut ids)?;
        ids.push(self.special.sep_q);
        if ids.len() > context_len {
            return Err(Error::data(format!(
                "prompt length {} exceeds context window {}",
                ids.len(),
                context_len
            )));
        }
        Ok(ids)
    }

    /// Recover (direction, question, cot, answer) from an encoded sequence.
    /// Trailing PAD after EOS is ignored; anything else after EOS is an error.
    pub fn decode(&self, ids: &[u32]) -> Result<DecodedFields> {
        let s = self.special;
        let mut it = ids.iter().copied().peekable();
        if it.next() != Some(s.bos) {
            return Err(Error::data("decode: sequence does not start with BOS"));
        }
        let direction = match it.next() {
            Some(t) if t == s.fwd => Direction::Forward,
            Some(t) if t == s.rev => Direction::Reverse,
            _ => return Err(Error::data("decode: missing direction token")),
        };
        let mut question = Vec::new();
        let mut cot = Vec::new();
        let mut answer = Vec::new();
        let mut seen_sep_q = false;
        let mut seen_sep_a = false;
        let mut seen_eos = false;
        for t in it {
            if seen_eos {
                if t == s.pad {
                    continue;
                }
                return Err(Error::data("decode: non-PAD token after EOS"));
            }
            if t == s.sep_q {
                if seen_sep_q {
                    return Err(Error::data("decode: duplicate SEP_Q"));
                }
                seen_sep_q = true;
            } else if t == s.sep_a {
                if !seen_sep_q || seen_sep_a {
                    return Err(Error::data("decode: misplaced SEP_A"));
                }
                seen_sep_a = true;
            } else if t == s.eos {
                seen_eos = true;
            } else {
                let name = self.name(t)?.to_string();
                if !seen_sep_q {
                    question.push(name);
                } else if !seen_sep_a {
                    cot.push(name);
                } else {
                    answer.push(name);
                }
            }
        }
        if !seen_sep_q || !seen_sep_a {
            return Err(Error::data("decode: missing separator token"));
        }
        if !seen_eos {
            return Err(Error::data("decode: missing EOS"));
        }
        Ok(DecodedFields {
            direction,
            question,
            cot,
            answer,
        })
    }

    /// One token name per line; id = line number. Emitted next to datasets so
    /// checkpoints and JSONL files are self-describing.
    pub fn render_manifest(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse_manifest(text: &str) -> Result<Vocab> {
        let tokens: Vec<String> = text.lines().map(String::from).collect();
        if tokens.is_empty() {
            return Err(Error::data("empty vocab manifest"));
        }
        Vocab::from_tokens(tokens)
    }
}

/// Full response token sequence for an example: `cot ++ SEP_A ++ answer`.
pub fn response_tokens(cot: &[String], answer: &[String]) -> Vec<String> {
    let mut r = Vec::with_capacity(cot.len() + 1 + answer.len());
    r.extend_from_slice(cot);
    r.push(TOK_SEP_A.to_string());
    r.extend_from_slice(answer);
    r
}

/// Render a number as decimal digit tokens.
pub fn number_tokens(n: u64) -> Vec<String> {
    n.to_string().chars().map(|c| c.to_string()).collect()
}

/// Parse consecutive digit tokens back into a number.
pub fn parse_number(tokens: &[String]) -> Option<u64> {
    if tokens.is_empty() {
        return None;
    }
    let mut s = String::new();
    for t in tokens {
        if t.len() == 1 && t.chars().next().unwrap().is_ascii_digit() {
            s.push_str(t);
        } else {
            return None;
        }
    }
    s.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Source;

    fn sample_example() -> Example {
        Example {
            id: "000001-fwd".into(),
            pair_id: "000001".into(),
            direction: Direction::Forward,
            question: vec![
                "START".into(),
                "5".into(),
                "ADD".into(),
                "3".into(),
                "MUL".into(),
                "2".into(),
                "MOD".into(),
                "9".into(),
                "7".into(),
                "ASK".into(),
                "RESULT".into(),
            ],
            cot: vec![
                "ADD".into(),
                "3".into(),
                "=".into(),
                "8".into(),
                "MUL".into(),
                "2".into(),
                "=".into(),
                "1".into(),
                "6".into(),
            ],
            answer: vec!["1".into(), "6".into()],
            source: Source::Synthetic,
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::synthetic();
        let e = sample_example();
        let enc = v.encode_example(&e, 256).unwrap();
        let dec = v.decode(&enc.ids).unwrap();
        assert_eq!(dec.direction, e.direction);
        assert_eq!(dec.question, e.question);
        assert_eq!(dec.cot, e.cot);
        assert_eq!(dec.answer, e.answer);
    }

    #[test]
    fn response_count_is_cot_answer_plus_two() {
        let v = Vocab::synthetic();
        let e = sample_example();
        let enc = v.encode_example(&e, 256).unwrap();
        assert_eq!(enc.response_count(), e.cot.len() + e.answer.len() + 2);
    }

    #[test]
    fn unknown_token_is_rejected() {
        let v = Vocab::synthetic();
        let mut e = sample_example();
        e.question[0] = "BANANA".into();
        assert!(v.encode_example(&e, 256).is_err());
    }

    #[test]
    fn context_overflow_is_rejected() {
        let v = Vocab::synthetic();
        let e = sample_example();
        let err = v.encode_example(&e, 10).unwrap_err();
        assert!(err.to_string().contains("context window"), "{err}");
    }

    #[test]
    fn missing_sep_a_is_a_decode_error() {
        let v = Vocab::synthetic();
        let e = sample_example();
        let enc = v.encode_example(&e, 256).unwrap();
        let ids: Vec<u32> = enc
            .ids
            .iter()
            .copied()
            .filter(|&t| t != v.special().sep_a)
            .collect();
        assert!(v.decode(&ids).is_err());
    }

    #[test]
    fn trailing_pads_are_ignored() {
        let v = Vocab::synthetic();
        let e = sample_example();
        let enc = v.encode_example(&e, 256).unwrap();
        let mut ids = enc.ids.clone();
        ids.extend([v.special().pad; 5]);
        let dec = v.decode(&ids).unwrap();
        assert_eq!(dec.answer, e.answer);
    }

    #[test]
    fn non_pad_after_eos_is_rejected() {
        let v = Vocab::synthetic();
        let e = sample_example();
        let mut ids = v.encode_example(&e, 256).unwrap().ids;
        ids.push(v.id("3").unwrap());
        assert!(v.decode(&ids).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let v = Vocab::synthetic();
        let text = v.render_manifest();
        let v2 = Vocab::parse_manifest(&text).unwrap();
        assert_eq!(v.size(), v2.size());
        assert_eq!(v.special(), v2.special());
    }

    #[test]
    fn number_tokens_round_trip() {
        for n in [0u64, 7, 10, 96, 100, 12345] {
            assert_eq!(parse_number(&number_tokens(n)), Some(n));
        }
        assert_eq!(parse_number(&[]), None);
        assert_eq!(parse_number(&["ADD".to_string()]), None);
    }
}

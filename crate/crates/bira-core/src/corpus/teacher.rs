//! Client for inverting real QA pairs through an external teacher model.
//!
//! The transport is a trait so the HTTP implementation lives with the CLI and
//! everything here stays testable against fixtures. Requests are cached on
//! disk keyed by a content hash, and transient transport failures are retried
//! with exponential backoff before giving up.

use crate::error::{Error, Result};
use crate::rng::content_hash;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Duration;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// The de-facto chat-completion request body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

pub trait ChatTransport {
    /// Send one chat-completion request and return the assistant's content.
    /// Errors of kind Net are considered transient and retried.
    fn complete(&self, req: &ChatRequest) -> Result<String>;
}

#[derive(Debug, Clone)]
pub struct TeacherConfig {
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl TeacherConfig {
    /// Read TEACHER_URL / TEACHER_MODEL / TEACHER_TOKEN through the given
    /// lookup. Returns None (teacher mode disabled) when TEACHER_URL is unset.
    pub fn from_lookup(lookup: &dyn Fn(&str) -> Option<String>) -> Option<TeacherConfig> {
        let url = lookup("TEACHER_URL")?;
        Some(TeacherConfig {
            url,
            model: lookup("TEACHER_MODEL").unwrap_or_else(|| "teacher".to_string()),
            token: lookup("TEACHER_TOKEN"),
            cache_dir: None,
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        })
    }

    pub fn from_env() -> Option<TeacherConfig> {
        Self::from_lookup(&|k| std::env::var(k).ok())
    }
}

/// Prompt asking the teacher to swap question and answer roles.
pub fn invert_prompt(question: &str, answer: &str) -> String {
    format!(
        "\"role_definition\":\n\
         You are an AI model tasked with generating a reflective thinking exercise.\n\
         Given the following question and answer:\n\
         \n\
         - Question: {question}\n\
         - Answer: {answer}\n\
         \n\
         \"instructions\":\n\
         Your task is to reverse the roles of the question and answer.\n\
         Transform the answer into a question that is thought-provoking and encourages deeper reflection.\n\
         Similarly, convert the original question into a statement that serves as an insightful answer.\n\
         Ensure that the new question remains reasonable and stimulates further inquiry,\n\
         while the new answer is right to the question.\n\
         \n\
         \"expected_output\":\n\
         - New Question:\n\
         - New Answer:"
    )
}

/// Prompt asking the teacher for a step-by-step solution with a boxed answer.
pub fn solve_prompt(question: &str) -> String {
    format!(
        "\"role_definition\":\n\
         You are an AI model that is designed to generate solutions to a given question.\n\
         All numerical answers must be explicitly marked with \\boxed{{}}.\n\
         \n\
         - Question: {question}\n\
         \n\
         \"instructions\":\n\
         Ensure your answer is absolutely correct and standard.\n\
         \n\
         \"expected_output\":\n\
         Presents the complete and concise answer.\n\
         If the answer contains only one numerical value, it must be marked in the form of \\boxed{{}}."
    )
}

fn find_label(reply: &str, label: &str) -> Option<usize> {
    // Accept the plain label or light markdown dressing ("- **New Question:**").
    for variant in [
        format!("{label}:"),
        format!("**{label}:**"),
        format!("**{label}**:"),
    ] {
        if let Some(pos) = reply.find(&variant) {
            return Some(pos + variant.len());
        }
    }
    None
}

fn label_start(reply: &str, label: &str) -> Option<usize> {
    for variant in [
        format!("{label}:"),
        format!("**{label}:**"),
        format!("**{label}**:"),
    ] {
        if let Some(pos) = reply.find(&variant) {
            return Some(pos);
        }
    }
    None
}

/// Extract the "New Question" / "New Answer" fields from an invert reply.
pub fn parse_invert_reply(reply: &str) -> Result<(String, String)> {
    let q_end = find_label(reply, "New Question").ok_or_else(|| {
        Error::data(format!(
            "teacher reply is missing a \"New Question:\" field; reply was: {reply}"
        ))
    })?;
    let a_start_label = label_start(reply, "New Answer").ok_or_else(|| {
        Error::data(format!(
            "teacher reply is missing a \"New Answer:\" field; reply was: {reply}"
        ))
    })?;
    if a_start_label < q_end {
        return Err(Error::data(format!(
            "teacher reply has \"New Answer:\" before \"New Question:\"; reply was: {reply}"
        )));
    }
    let a_end = find_label(reply, "New Answer").unwrap();
    let question = reply[q_end..a_start_label].trim().to_string();
    let answer = reply[a_end..].trim().to_string();
    if question.is_empty() || answer.is_empty() {
        return Err(Error::data(format!(
            "teacher reply has an empty inverted field; reply was: {reply}"
        )));
    }
    Ok((question, answer))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolvedAnswer {
    pub cot: String,
    pub boxed_answer: String,
    /// Set when the reply carried more than one boxed span (last one wins).
    pub multiple_boxed: bool,
}

/// Extract the final `\boxed{...}` span; everything before it is the CoT.
pub fn parse_solve_reply(reply: &str) -> Result<SolvedAnswer> {
    const MARK: &str = "\\boxed{";
    let mut spans = Vec::new();
    let mut from = 0;
    while let Some(rel) = reply[from..].find(MARK) {
        let open = from + rel + MARK.len();
        let mut depth = 1usize;
        let mut end = None;
        for (i, c) in reply[open..].char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(open + i);
                        break;
                    }
                }
                _ => {}
            }
        }
        match end {
            Some(close) => {
                spans.push((from + rel, open, close));
                from = close + 1;
            }
            None => break,
        }
    }
    let &(mark_start, open, close) = spans.last().ok_or_else(|| {
        Error::data(format!(
            "teacher reply has no \\boxed{{}} span; reply was: {reply}"
        ))
    })?;
    Ok(SolvedAnswer {
        cot: reply[..mark_start].trim().to_string(),
        boxed_answer: reply[open..close].to_string(),
        multiple_boxed: spans.len() > 1,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    request_id: String,
    kind: String,
    question: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    answer: Option<String>,
    reply: String,
}

pub struct TeacherClient<T: ChatTransport> {
    config: TeacherConfig,
    transport: T,
    sleep: Box<dyn Fn(Duration)>,
}

impl<T: ChatTransport> TeacherClient<T> {
    /// Build a client. A None config means teacher mode is disabled and is a
    /// configuration error: nothing may reach the transport in that case.
    pub fn new(config: Option<TeacherConfig>, transport: T) -> Result<TeacherClient<T>> {
        let config =
            config.ok_or_else(|| Error::config("teacher mode disabled: TEACHER_URL is not set"))?;
        Ok(TeacherClient {
            config,
            transport,
            sleep: Box::new(std::thread::sleep),
        })
    }

    #[cfg(test)]
    fn without_sleep(config: TeacherConfig, transport: T) -> TeacherClient<T> {
        TeacherClient {
            config,
            transport,
            sleep: Box::new(|_| {}),
        }
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    /// Deterministic request id: hash of the template kind and inputs.
    pub fn request_id(kind: &str, question: &str, answer: Option<&str>) -> String {
        let mut key = String::new();
        key.push_str(kind);
        key.push('\u{1}');
        key.push_str(question);
        key.push('\u{1}');
        key.push_str(answer.unwrap_or(""));
        format!("{:016x}", content_hash(key.as_bytes()))
    }

    fn cache_path(&self, request_id: &str) -> Option<PathBuf> {
        self.config
            .cache_dir
            .as_ref()
            .map(|d| d.join(format!("{request_id}.json")))
    }

    fn cache_get(&self, request_id: &str) -> Option<String> {
        let path = self.cache_path(request_id)?;
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str::<CacheEntry>(&text)
            .ok()
            .map(|e| e.reply)
    }

    fn cache_put(&self, entry: &CacheEntry) -> Result<()> {
        let Some(path) = self.cache_path(&entry.request_id) else {
            return Ok(());
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        std::fs::write(
            &path,
            serde_json::to_string_pretty(entry).expect("entry serializes"),
        )
        .map_err(|e| Error::io(path.display().to_string(), e))
    }

    fn complete_with_retry(&self, content: String) -> Result<String> {
        let req = ChatRequest {
            model: self.config.model.clone(),
            messages: vec![ChatMessage {
                role: "user".to_string(),
                content,
            }],
        };
        let mut backoff = self.config.initial_backoff;
        let mut last_err = None;
        for attempt in 0..self.config.max_attempts.max(1) {
            if attempt > 0 {
                (self.sleep)(backoff);
                backoff *= 2;
            }
            match self.transport.complete(&req) {
                Ok(reply) => return Ok(reply),
                Err(e @ Error::Net(_)) => last_err = Some(e),
                Err(other) => return Err(other),
            }
        }
        Err(Error::net(format!(
            "teacher endpoint failed after {} attempts: {}",
            self.config.max_attempts,
            last_err.expect("at least one attempt ran")
        )))
    }

    fn ask(
        &self,
        kind: &str,
        question: &str,
        answer: Option<&str>,
        content: String,
    ) -> Result<String> {
        let request_id = Self::request_id(kind, question, answer);
        if let Some(reply) = self.cache_get(&request_id) {
            return Ok(reply);
        }
        let reply = self.complete_with_retry(content)?;
        self.cache_put(&CacheEntry {
            request_id,
            kind: kind.to_string(),
            question: question.to_string(),
            answer: answer.map(String::from),
            reply: reply.clone(),
        })?;
        Ok(reply)
    }

    /// Swap question and answer roles through the teacher.
    pub fn invert(&self, question: &str, answer: &str) -> Result<(String, String)> {
        let reply = self.ask(
            "invert",
            question,
            Some(answer),
            invert_prompt(question, answer),
        )?;
        parse_invert_reply(&reply)
    }

    /// Ask the teacher for a CoT solution with a boxed final answer.
    pub fn solve(&self, question: &str) -> Result<SolvedAnswer> {
        let reply = self.ask("solve", question, None, solve_prompt(question))?;
        parse_solve_reply(&reply)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    struct ScriptedTransport {
        replies: RefCell<Vec<Result<String>>>,
        calls: RefCell<u32>,
    }

    impl ScriptedTransport {
        fn new(replies: Vec<Result<String>>) -> Self {
            ScriptedTransport {
                replies: RefCell::new(replies),
                calls: RefCell::new(0),
            }
        }
        fn calls(&self) -> u32 {
            *self.calls.borrow()
        }
    }

    impl ChatTransport for &ScriptedTransport {
        fn complete(&self, _req: &ChatRequest) -> Result<String> {
            *self.calls.borrow_mut() += 1;
            let mut replies = self.replies.borrow_mut();
            if replies.is_empty() {
                Err(Error::net("script exhausted"))
            } else {
                replies.remove(0)
            }
        }
    }

    fn config(cache: Option<PathBuf>) -> TeacherConfig {
        TeacherConfig {
            url: "http://localhost/v1/chat/completions".into(),
            model: "fixture".into(),
            token: None,
            cache_dir: cache,
            max_attempts: 3,
            initial_backoff: Duration::from_millis(1),
        }
    }

    const GOOD_INVERT: &str = "Here you go.\nNew Question: What temperature gives this energy?\nNew Answer: The temperature is 300 K.";

    #[test]
    fn invert_reply_parses_both_fields() {
        let (q, a) = parse_invert_reply(GOOD_INVERT).unwrap();
        assert_eq!(q, "What temperature gives this energy?");
        assert_eq!(a, "The temperature is 300 K.");
    }

    #[test]
    fn invert_reply_missing_answer_is_a_parse_error() {
        let err = parse_invert_reply("New Question: only half").unwrap_err();
        assert!(err.to_string().contains("New Answer"), "{err}");
        assert!(
            err.to_string().contains("only half"),
            "error must carry the raw reply"
        );
    }

    #[test]
    fn solve_reply_extracts_boxed_answer() {
        let solved = parse_solve_reply("compute 6*7 step by step, so \\boxed{42}").unwrap();
        assert_eq!(solved.boxed_answer, "42");
        assert_eq!(solved.cot, "compute 6*7 step by step, so");
        assert!(!solved.multiple_boxed);
    }

    #[test]
    fn last_boxed_span_wins_and_is_flagged() {
        let solved = parse_solve_reply("first \\boxed{41} then corrected \\boxed{42}").unwrap();
        assert_eq!(solved.boxed_answer, "42");
        assert!(solved.multiple_boxed);
        assert!(solved.cot.contains("41"));
    }

    #[test]
    fn boxed_spans_may_nest_braces() {
        let solved = parse_solve_reply("thus \\boxed{a^{2} + b^{2}}").unwrap();
        assert_eq!(solved.boxed_answer, "a^{2} + b^{2}");
    }

    #[test]
    fn empty_reply_is_a_parse_error() {
        assert!(parse_solve_reply("").is_err());
        assert!(parse_invert_reply("").is_err());
    }

    #[test]
    fn disabled_teacher_is_a_config_error_with_no_call() {
        let transport = ScriptedTransport::new(vec![]);
        let err = TeacherClient::new(None, &transport)
            .map(|_| ())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(transport.calls(), 0);
    }

    #[test]
    fn transient_failures_are_retried_then_succeed() {
        let transport = ScriptedTransport::new(vec![
            Err(Error::net("reset")),
            Err(Error::net("timeout")),
            Ok(GOOD_INVERT.to_string()),
        ]);
        let client = TeacherClient::without_sleep(config(None), &transport);
        let (q, _) = client.invert("Q?", "A.").unwrap();
        assert!(q.starts_with("What temperature"));
        assert_eq!(transport.calls(), 3);
    }

    #[test]
    fn retries_are_bounded() {
        let transport = ScriptedTransport::new(vec![
            Err(Error::net("1")),
            Err(Error::net("2")),
            Err(Error::net("3")),
            Ok(GOOD_INVERT.to_string()),
        ]);
        let client = TeacherClient::without_sleep(config(None), &transport);
        let err = client.invert("Q?", "A.").unwrap_err();
        assert!(matches!(err, Error::Net(_)));
        assert_eq!(transport.calls(), 3);
    }

    #[test]
    fn cache_hit_skips_the_transport() {
        let dir = tempfile::tempdir().unwrap();
        let transport = ScriptedTransport::new(vec![Ok(GOOD_INVERT.to_string())]);
        let client =
            TeacherClient::without_sleep(config(Some(dir.path().to_path_buf())), &transport);
        let first = client.invert("Q?", "A.").unwrap();
        let second = client.invert("Q?", "A.").unwrap();
        assert_eq!(first, second);
        assert_eq!(transport.calls(), 1);
        // One JSON file per request hash.
        let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 1);
    }

    #[test]
    fn request_ids_are_deterministic_and_keyed_on_inputs() {
        let a = TeacherClient::<&ScriptedTransport>::request_id("invert", "q", Some("a"));
        let b = TeacherClient::<&ScriptedTransport>::request_id("invert", "q", Some("a"));
        let c = TeacherClient::<&ScriptedTransport>::request_id("invert", "q", Some("b"));
        let d = TeacherClient::<&ScriptedTransport>::request_id("solve", "q", Some("a"));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn templates_carry_the_inputs_and_labels() {
        let p = invert_prompt("What is KE at 300K?", "6.2e-21 J");
        assert!(p.contains("- Question: What is KE at 300K?"));
        assert!(p.contains("- Answer: 6.2e-21 J"));
        assert!(p.contains("reverse the roles of the question and answer"));
        assert!(p.contains("- New Question:"));
        assert!(p.contains("- New Answer:"));
        let s = solve_prompt("What is 6*7?");
        assert!(s.contains("- Question: What is 6*7?"));
        assert!(s.contains("\\boxed{}"));
    }

    #[test]
    fn parse_errors_are_not_retried() {
        // A reply that parses as transport-success but fails field parsing must
        // not consume extra attempts.
        let transport = ScriptedTransport::new(vec![Ok("no labels here".to_string())]);
        let client = TeacherClient::without_sleep(config(None), &transport);
        assert!(client.invert("Q?", "A.").is_err());
        assert_eq!(transport.calls(), 1);
    }
}

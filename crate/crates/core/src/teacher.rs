//! Teacher models: a deterministic synthetic teacher and an HTTP client for
//! an external chat-completion endpoint.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{self, parse_dialog_slots, render_dialog_slots, render_ranks};
use crate::selfinstruct::{self, render_tasks, Candidate};
use crate::synth::{self, sub_seed, Judge, SyntheticLanguage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Speaker,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Speaker::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Speaker::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("transport failure after {attempts} attempt(s): {msg}")]
    Transport { attempts: usize, msg: String },
    #[error("endpoint returned status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("teacher budget exhausted")]
    Exhausted,
    #[error("teacher does not recognize the prompt: {0}")]
    Unsupported(String),
    #[error("teacher configuration: {0}")]
    Config(String),
}

pub trait Teacher {
    /// Next assistant message for a dialog ending in a user turn.
    fn complete(&self, messages: &[Message]) -> Result<String, TeacherError>;

    fn describe(&self) -> String;
}

/// Deterministic stand-in for a chat model, dispatching on the anchor phrase
/// of each protocol prompt:
///
/// * translation: values are remapped into the named language;
/// * ranking turn 1: fields are mapped back to English from `source_lang`;
/// * ranking turn 2: the judge ranks the English responses from turn 1;
/// * instruction generation: grammar tasks, a share of them near copies of
///   the in-context examples.
pub struct SyntheticTeacher {
    languages: Vec<SyntheticLanguage>,
    names: Vec<(String, String)>,
    pub source_lang: Option<String>,
    pub judge: Judge,
    pub seed: u64,
    pub near_duplicate_rate: f64,
    pub tasks_per_call: usize,
    budget: Option<usize>,
    calls: AtomicUsize,
}

impl SyntheticTeacher {
    pub fn new(world: &synth::World, judge: Judge, seed: u64) -> Self {
        Self {
            languages: world.languages.clone(),
            names: world
                .registry
                .languages
                .iter()
                .map(|l| (l.name.clone(), l.code.clone()))
                .collect(),
            source_lang: None,
            judge,
            seed,
            near_duplicate_rate: 0.3,
            tasks_per_call: 4,
            budget: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_source_lang(mut self, code: &str) -> Self {
        self.source_lang = Some(code.to_string());
        self
    }

    /// Fails every generation call after `calls` of them.
    pub fn with_budget(mut self, calls: usize) -> Self {
        self.budget = Some(calls);
        self
    }

    fn language(&self, code: &str) -> Result<&SyntheticLanguage, TeacherError> {
        self.languages
            .iter()
            .find(|l| l.code == code)
            .ok_or_else(|| TeacherError::Config(format!("no remap for language {code}")))
    }

    fn translate(&self, prompt: &str) -> Result<String, TeacherError> {
        let name = prompt
            .split(" into ")
            .nth(1)
            .and_then(|rest| rest.split(" language.").next())
            .ok_or_else(|| TeacherError::Unsupported("translation prompt without target language".into()))?;
        let code = self
            .names
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.clone())
            .ok_or_else(|| TeacherError::Unsupported(format!("unknown language {name}")))?;
        let lang = self.language(&code)?;
        let (i, n, o) = protocol::parse_translation_object(prompt)
            .map_err(|e| TeacherError::Unsupported(format!("translation payload: {e}")))?;
        Ok(protocol::render_translation_object(
            &lang.to_lang(&i),
            &lang.to_lang(&n),
            &lang.to_lang(&o),
        ))
    }

    fn to_english(&self, prompt: &str) -> Result<String, TeacherError> {
        let code = self
            .source_lang
            .as_deref()
            .ok_or_else(|| TeacherError::Config("synthetic ranking needs a source language".into()))?;
        let lang = self.language(code)?;
        let (inst, input, responses) =
            parse_dialog_slots(prompt).map_err(|e| TeacherError::Unsupported(e.to_string()))?;
        let input = if input.is_empty() { String::new() } else { lang.from_lang(&input) };
        let responses: Vec<String> = responses.iter().map(|r| lang.from_lang(r)).collect();
        Ok(render_dialog_slots(&lang.from_lang(&inst), &input, &responses))
    }

    fn rank(&self, messages: &[Message]) -> Result<String, TeacherError> {
        let (inst, input, responses) = messages
            .iter()
            .rev()
            .filter(|m| m.role == Speaker::Assistant)
            .find_map(|m| parse_dialog_slots(&m.content).ok())
            .ok_or_else(|| TeacherError::Unsupported("ranking turn without a translation turn".into()))?;
        let ranks = self.judge.rank(&format!("{inst}\n{input}"), &responses);
        Ok(render_ranks(&ranks))
    }

    fn generate(&self, prompt: &str) -> Result<String, TeacherError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.budget.is_some_and(|b| n >= b) {
            return Err(TeacherError::Exhausted);
        }
        let examples = selfinstruct::parse_tasks(prompt);
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.seed, prompt));
        let mut out = Vec::with_capacity(self.tasks_per_call);
        for _ in 0..self.tasks_per_call {
            let markers = rng.gen_range(0..=3);
            let cand = match examples.first() {
                Some(_) if rng.gen_bool(self.near_duplicate_rate) => {
                    let src = &examples[rng.gen_range(0..examples.len())];
                    let instruction = synth::near_duplicate(&mut rng, &src.instruction);
                    let output = synth::output_for(&mut rng, &instruction, markers);
                    Candidate {
                        instruction,
                        input: src.input.clone(),
                        output,
                    }
                }
                _ => {
                    let (instruction, input, output) = synth::grammar_task(&mut rng, markers);
                    Candidate {
                        instruction,
                        input,
                        output,
                    }
                }
            };
            out.push(cand);
        }
        Ok(render_tasks(&out))
    }
}

impl Teacher for SyntheticTeacher {
    fn complete(&self, messages: &[Message]) -> Result<String, TeacherError> {
        let last = messages
            .last()
            .filter(|m| m.role == Speaker::User)
            .ok_or_else(|| TeacherError::Unsupported("dialog must end with a user turn".into()))?;
        let text = &last.content;
        if text.contains(protocol::TRANSLATION_ANCHOR) {
            self.translate(text)
        } else if text.contains(protocol::RANK_TRANSLATION_ANCHOR) {
            self.to_english(text)
        } else if text.contains(protocol::RANKING_ANCHOR) || text.contains(protocol::REASK_ANCHOR) {
            self.rank(messages)
        } else if text.contains(selfinstruct::GENERATION_ANCHOR) {
            self.generate(text)
        } else {
            Err(TeacherError::Unsupported(text.chars().take(60).collect()))
        }
    }

    fn describe(&self) -> String {
        format!("synthetic(judge={:?}, seed={})", self.judge, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_ms: u64,
    pub max_retries: usize,
    /// Delay before retry `i` is `backoff_ms * 2^i`.
    pub backoff_ms: u64,
    pub api_key: Option<String>,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "gpt-3.5-turbo".into(),
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 500,
            api_key: None,
        }
    }
}

impl ExternalConfig {
    /// Reads `api_key` from a `key = value` credentials file.
    pub fn with_credentials(mut self, path: &Path) -> crate::error::Result<Self> {
        let kv = crate::config::load(path)?;
        self.api_key = kv.get("api_key").cloned();
        if self.api_key.is_none() {
            return Err(crate::error::Error::Config(format!("{}: no api_key", path.display())));
        }
        Ok(self)
    }
}

/// Chat-completion client. Sends `{"model", "messages", "temperature": 0}`
/// and reads `choices[0].message.content`, falling back to the raw body when
/// the reply is not in that shape. Retries 429, 5xx, timeouts and connection
/// failures; any other status fails immediately.
pub struct ExternalTeacher {
    cfg: ExternalConfig,
    client: reqwest::blocking::Client,
}

impl ExternalTeacher {
    pub fn new(cfg: ExternalConfig) -> Result<Self, TeacherError> {
        if cfg.endpoint.is_empty() {
            return Err(TeacherError::Config("external teacher needs an endpoint".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| TeacherError::Config(e.to_string()))?;
        Ok(Self { cfg, client })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, (bool, TeacherError)> {
        let mut req = self.client.post(&self.cfg.endpoint).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            (
                true,
                TeacherError::Transport {
                    attempts: 1,
                    msg: e.to_string(),
                },
            )
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            (
                true,
                TeacherError::Transport {
                    attempts: 1,
                    msg: e.to_string(),
                },
            )
        })?;
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            return Err((
                retryable,
                TeacherError::Status {
                    code: status.as_u16(),
                    body: text,
                },
            ));
        }
        Ok(extract_content(&text))
    }
}

fn extract_content(body: &str) -> String {
    serde_json::from_str::<serde_json::Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/choices/0/message/content")
                .or_else(|| v.get("content"))
                .and_then(|c| c.as_str())
                .map(str::to_string)
        })
        .unwrap_or_else(|| body.to_string())
}

impl Teacher for ExternalTeacher {
    fn complete(&self, messages: &[Message]) -> Result<String, TeacherError> {
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": 0,
        });
        let mut last = None;
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(delay));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err((false, e)) => return Err(e),
                Err((true, e)) => {
                    log::warn!("teacher attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                }
            }
        }
        Err(TeacherError::Transport {
            attempts: self.cfg.max_retries + 1,
            msg: last.map(|e| e.to_string()).unwrap_or_default(),
        })
    }

    fn describe(&self) -> String {
        format!("external({}, model={})", self.cfg.endpoint, self.cfg.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves canned `(status, body)` replies in order, recording requests.
    fn mock(replies: Vec<(u16, &'static str)>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let log = seen.clone();
        thread::spawn(move || {
            for (status, body) in replies {
                let Ok((mut s, _)) = listener.accept() else { return };
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = s.read(&mut chunk).unwrap_or(0);
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf).to_string();
                    if let Some(h) = text.find("\r\n\r\n") {
                        let len = text[..h]
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if buf.len() >= h + 4 + len {
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                log.lock().unwrap().push(String::from_utf8_lossy(&buf).to_string());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = s.write_all(resp.as_bytes());
            }
        });
        (url, seen)
    }

    fn client(url: String, retries: usize) -> ExternalTeacher {
        ExternalTeacher::new(ExternalConfig {
            endpoint: url,
            max_retries: retries,
            backoff_ms: 1,
            api_key: Some("k-test".into()),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn external_reads_chat_content_and_sends_auth() {
        let (url, seen) = mock(vec![(200, r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#)]);
        let t = client(url, 0);
        assert_eq!(t.complete(&[Message::user("x")]).unwrap(), "hi");
        let req = seen.lock().unwrap()[0].clone();
        assert!(req.contains("Bearer k-test"));
        assert!(req.contains(r#""messages":[{"content":"x","role":"user"}]"#) || req.contains(r#""role":"user""#));
    }

    #[test]
    fn external_retries_retryable_statuses() {
        let (url, seen) = mock(vec![(503, "busy"), (429, "slow down"), (200, "plain text reply")]);
        let t = client(url, 3);
        assert_eq!(t.complete(&[Message::user("x")]).unwrap(), "plain text reply");
        assert_eq!(seen.lock().unwrap().len(), 3);
    }

    #[test]
    fn external_does_not_retry_client_errors() {
        let (url, seen) = mock(vec![(400, "bad"), (200, "never")]);
        let t = client(url, 3);
        match t.complete(&[Message::user("x")]) {
            Err(TeacherError::Status { code: 400, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn external_gives_up_after_budget() {
        let (url, _) = mock(vec![(500, "a"), (500, "b")]);
        match client(url, 1).complete(&[Message::user("x")]) {
            Err(TeacherError::Transport { attempts: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn credentials_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cred");
        std::fs::write(&p, "api_key = secret\n").unwrap();
        let c = ExternalConfig::default().with_credentials(&p).unwrap();
        assert_eq!(c.api_key.as_deref(), Some("secret"));
        std::fs::write(&p, "other = 1\n").unwrap();
        assert!(ExternalConfig::default().with_credentials(&p).is_err());
    }

    #[test]
    fn synthetic_rejects_unknown_prompts() {
        let w = synth::make_world(2, 0).unwrap();
        let t = SyntheticTeacher::new(&w, Judge::LengthSort, 0);
        assert!(matches!(t.complete(&[Message::user("hello")]), Err(TeacherError::Unsupported(_))));
        assert!(t.complete(&[]).is_err());
    }

    #[test]
    fn synthetic_budget() {
        let w = synth::make_world(2, 0).unwrap();
        let t = SyntheticTeacher::new(&w, Judge::LengthSort, 0).with_budget(1);
        let prompt = selfinstruct::build_generation_prompt(&[], 4);
        assert!(t.complete(&[Message::user(prompt.clone())]).is_ok());
        assert!(matches!(t.complete(&[Message::user(prompt)]), Err(TeacherError::Exhausted)));
    }
}

//! Language-model clients used to generate class descriptions.
//!
//! Three implementations sit behind [`LanguageModelClient`]: an HTTP client
//! for OpenAI-compatible chat endpoints, a local-process client that pipes
//! the query through a command, and a fixture client that replays recorded
//! responses (used by tests and for deterministic re-runs).

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable holding the bearer token for [`RemoteClient`].
pub const API_KEY_ENV: &str = "LANGADAPT_LLM_API_KEY";
/// Optional override of the remote endpoint base URL.
pub const BASE_URL_ENV: &str = "LANGADAPT_LLM_BASE_URL";
const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

pub trait LanguageModelClient: Send + Sync {
    /// Identifier recorded as corpus provenance.
    fn model_id(&self) -> &str;

    /// Returns the raw completion text. Transport failures are reported as
    /// [`Error::Transport`] and are retried by the caller.
    fn complete(&self, prompt: &str) -> Result<String>;

    /// Completion for the `sample`-th repeat of `prompt`. Clients that are
    /// stochastic by nature ignore the index.
    fn complete_sample(&self, prompt: &str, sample: usize) -> Result<String> {
        let _ = sample;
        self.complete(prompt)
    }
}

/// What a [`FixtureClient`] does for a query it has no recording for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureFallback {
    /// Unknown queries are a transport error.
    #[default]
    Error,
    /// Unknown queries come back as an empty completion.
    Empty,
    /// Unknown queries echo a canned description mentioning the query.
    Echo,
}

/// Replays recorded responses keyed by the exact query text.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixtureClient {
    pub model_id: String,
    #[serde(default)]
    pub responses: HashMap<String, Vec<String>>,
    #[serde(default)]
    pub fallback: FixtureFallback,
}

impl FixtureClient {
    pub fn new(model_id: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            ..Self::default()
        }
    }

    pub fn echo(model_id: impl Into<String>) -> Self {
        Self {
            fallback: FixtureFallback::Echo,
            ..Self::new(model_id)
        }
    }

    pub fn with_response(mut self, query: impl Into<String>, text: impl Into<String>) -> Self {
        self.responses
            .entry(query.into())
            .or_default()
            .push(text.into());
        self
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: Some(e.line()),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        // Sorted keys keep recorded fixtures diff-friendly.
        let sorted: std::collections::BTreeMap<_, _> = self.responses.iter().collect();
        let value = serde_json::json!({
            "model_id": self.model_id,
            "responses": sorted,
            "fallback": self.fallback,
        });
        serde_json::to_string_pretty(&value).expect("fixture serializes") + "\n"
    }
}

impl LanguageModelClient for FixtureClient {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.complete_sample(prompt, 0)
    }

    fn complete_sample(&self, prompt: &str, sample: usize) -> Result<String> {
        match self.responses.get(prompt) {
            Some(list) if !list.is_empty() => Ok(list[sample % list.len()].clone()),
            _ => match self.fallback {
                FixtureFallback::Error => Err(Error::Transport(format!(
                    "fixture has no recorded response for {prompt:?}"
                ))),
                FixtureFallback::Empty => Ok(String::new()),
                FixtureFallback::Echo => Ok(format!("Recorded description for: {prompt}")),
            },
        }
    }
}

/// Wraps a client and records every successful completion so the session
/// can be replayed later through a [`FixtureClient`].
pub struct RecordingClient<C> {
    inner: C,
    log: Mutex<HashMap<String, Vec<(usize, String)>>>,
}

impl<C: LanguageModelClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            log: Mutex::new(HashMap::new()),
        }
    }

    pub fn into_fixture(self) -> FixtureClient {
        let model_id = self.inner.model_id().to_string();
        let log = self.log.into_inner().unwrap_or_else(|e| e.into_inner());
        let responses = log
            .into_iter()
            .map(|(q, mut samples)| {
                samples.sort_by_key(|(i, _)| *i);
                (q, samples.into_iter().map(|(_, s)| s).collect())
            })
            .collect();
        FixtureClient {
            model_id,
            responses,
            fallback: FixtureFallback::Error,
        }
    }
}

impl<C: LanguageModelClient> LanguageModelClient for RecordingClient<C> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        self.complete_sample(prompt, 0)
    }

    fn complete_sample(&self, prompt: &str, sample: usize) -> Result<String> {
        let out = self.inner.complete_sample(prompt, sample)?;
        self.log
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(prompt.to_string())
            .or_default()
            .push((sample, out.clone()));
        Ok(out)
    }
}

/// Client for OpenAI-compatible `/chat/completions` endpoints.
pub struct RemoteClient {
    model: String,
    base_url: String,
    api_key: String,
    temperature: f64,
    agent: ureq::Agent,
}

impl RemoteClient {
    /// Reads credentials from [`API_KEY_ENV`] (and [`BASE_URL_ENV`]).
    pub fn from_env(model: impl Into<String>) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV).map_err(|_| {
            Error::validation(format!("remote LLM client needs {API_KEY_ENV} to be set"))
        })?;
        let base_url = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.into());
        Ok(Self::new(model, base_url, api_key))
    }

    pub fn new(
        model: impl Into<String>,
        base_url: impl Into<String>,
        api_key: impl Into<String>,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            model: model.into(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: api_key.into(),
            temperature: 0.7,
            agent,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

impl LanguageModelClient for RemoteClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let url = format!("{}/chat/completions", self.base_url);
        let mut response = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body)
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        let parsed: ChatResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Transport(format!("{url}: malformed response: {e}")))?;
        Ok(parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default())
    }
}

/// Runs a local model through a command that reads the query on stdin and
/// writes the completion to stdout (e.g. `ollama run llama3`).
pub struct LocalCommandClient {
    model_id: String,
    program: String,
    args: Vec<String>,
}

impl LocalCommandClient {
    pub fn new(model_id: impl Into<String>, program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            model_id: model_id.into(),
            program: program.into(),
            args,
        }
    }

    /// Parses a whitespace-separated command line; the model id is the line
    /// itself.
    pub fn from_command_line(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::validation("local LLM command is empty"))?;
        Ok(Self::new(line.trim(), program, parts.collect()))
    }
}

impl LanguageModelClient for LocalCommandClient {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Transport(format!("cannot start {}: {e}", self.program)))?;
        if let Some(mut stdin) = child.stdin.take() {
            stdin
                .write_all(prompt.as_bytes())
                .map_err(|e| Error::Transport(format!("writing to {}: {e}", self.program)))?;
        }
        let output = child
            .wait_with_output()
            .map_err(|e| Error::Transport(format!("waiting for {}: {e}", self.program)))?;
        if !output.status.success() {
            return Err(Error::Transport(format!(
                "{} exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        Ok(String::from_utf8_lossy(&output.stdout).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_replays_by_sample_index() {
        let f = FixtureClient::new("gpt-3.5")
            .with_response("q", "one")
            .with_response("q", "two");
        assert_eq!(f.complete_sample("q", 0).unwrap(), "one");
        assert_eq!(f.complete_sample("q", 1).unwrap(), "two");
        assert_eq!(f.complete_sample("q", 2).unwrap(), "one");
        assert!(matches!(f.complete("other"), Err(Error::Transport(_))));
    }

    #[test]
    fn recording_round_trips_into_fixture() {
        let rec = RecordingClient::new(FixtureClient::echo("m"));
        let a = rec.complete_sample("hello", 0).unwrap();
        let fixture = rec.into_fixture();
        assert_eq!(fixture.complete("hello").unwrap(), a);
        let reparsed: FixtureClient = serde_json::from_str(&fixture.to_json()).unwrap();
        assert_eq!(reparsed.complete("hello").unwrap(), a);
    }

    #[test]
    fn local_command_client_pipes_stdin() {
        let client = LocalCommandClient::from_command_line("cat").unwrap();
        assert_eq!(client.complete("lungs").unwrap(), "lungs");
        let bad = LocalCommandClient::from_command_line("false").unwrap();
        assert!(matches!(bad.complete("x"), Err(Error::Transport(_))));
    }
}

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

pub const TOKEN_ENV: &str = "LORALENS_LLM_TOKEN";

/// Sends one prompt, returns the model's reply text.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EndpointKind {
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub kind: EndpointKind,
    pub base_url: String,
    pub model: String,
    pub max_in_flight: usize,
    pub attempts: usize,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            kind: EndpointKind::Mock,
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-5-mini".into(),
            max_in_flight: 4,
            attempts: 3,
            backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

impl EndpointConfig {
    pub fn client(&self) -> Result<Box<dyn LlmClient>> {
        Ok(match self.kind {
            EndpointKind::Mock => Box::new(MockClient),
            EndpointKind::Http => Box::new(HttpClient::from_env(self)?),
        })
    }

    /// Runs `f` up to `attempts` times, sleeping `backoff_ms · 2^i` after the
    /// i-th endpoint failure. Other errors return immediately.
    pub fn with_retries<T>(&self, mut f: impl FnMut() -> Result<T>) -> Result<T> {
        let mut last = None;
        for attempt in 0..self.attempts.max(1) {
            match f() {
                Err(Error::Endpoint(msg)) => {
                    log::warn!("endpoint attempt {} failed: {msg}", attempt + 1);
                    last = Some(msg);
                    if attempt + 1 < self.attempts {
                        std::thread::sleep(Duration::from_millis(self.backoff_ms << attempt));
                    }
                }
                other => return other,
            }
        }
        Err(Error::Endpoint(last.unwrap_or_default()))
    }
}

/// Chat-completions over HTTP, bearer token from `LORALENS_LLM_TOKEN`.
pub struct HttpClient {
    http: reqwest::blocking::Client,
    url: String,
    model: String,
    token: String,
}

impl HttpClient {
    pub fn from_env(config: &EndpointConfig) -> Result<Self> {
        let token = std::env::var(TOKEN_ENV)
            .map_err(|_| Error::Endpoint(format!("{TOKEN_ENV} is not set")))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Endpoint(e.to_string()))?;
        Ok(HttpClient {
            http,
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            model: config.model.clone(),
            token,
        })
    }
}

impl LlmClient for HttpClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let resp = self
            .http
            .post(&self.url)
            .bearer_auth(&self.token)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Endpoint(e.to_string()))?;
        let value: serde_json::Value = resp.json().map_err(|e| Error::Endpoint(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Error::Malformed(format!("no message content in {value}")))
    }
}

/// Replays a fixed list of replies in order and counts calls.
pub struct ScriptedClient {
    replies: Mutex<VecDeque<Result<String>>>,
    calls: AtomicUsize,
}

impl ScriptedClient {
    pub fn new(replies: impl IntoIterator<Item = Result<String>>) -> Self {
        ScriptedClient {
            replies: Mutex::new(replies.into_iter().collect()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn ok<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(|s| Ok(s.into())))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmClient for ScriptedClient {
    fn complete(&self, _prompt: &str) -> Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.replies
            .lock()
            .expect("script lock")
            .pop_front()
            .unwrap_or_else(|| Err(Error::Endpoint("script exhausted".into())))
    }
}

/// Offline stand-in that answers each prompt type from its own content.
///
/// Explanations name the strongest token of the first example; the class is
/// 0 when every example peaks on that token, 1 when most do, else 2.
/// Categories group explanations by token class.
pub struct MockClient;

pub const MOCK_CATEGORIES: [(&str, &str, &str); 5] = [
    (
        "letter_tokens",
        "Letter Tokens",
        "Features keyed to a specific source letter.",
    ),
    (
        "digit_tokens",
        "Digit Tokens",
        "Features keyed to a digit token.",
    ),
    (
        "task_markers",
        "Task Markers",
        "Features keyed to a task marker or terminator.",
    ),
    (
        "reserved_tokens",
        "Reserved Tokens",
        "Features keyed to unused vocabulary entries.",
    ),
    (
        "mixed_context",
        "Mixed Context",
        "Features without a single dominant token.",
    ),
];

fn token_category(tok: &str) -> &'static str {
    let mut chars = tok.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_lowercase() => "letter_tokens",
        (Some(c), None) if c.is_ascii_digit() => "digit_tokens",
        (Some(_), None) => "task_markers",
        (Some('['), _) => "reserved_tokens",
        _ => "mixed_context",
    }
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let e = text[s..].find(end)? + s;
    Some(&text[s..e])
}

impl MockClient {
    fn interpret(block: &str) -> String {
        let peaks: Vec<&str> = block
            .trim()
            .split("\n\n")
            .filter_map(|b| b.lines().nth(1))
            .filter_map(|l| l.rsplit_once(' ').map(|(tok, _)| tok))
            .collect();
        let first = peaks.first().copied().unwrap_or("?");
        let agree = peaks.iter().filter(|&&p| p == first).count();
        let class = if agree == peaks.len() {
            0
        } else if 2 * agree > peaks.len() {
            1
        } else {
            2
        };
        json!({
            "explanation": format!("token {first}"),
            "classification": class,
            "classification_reasoning": format!("{agree} of {} examples peak on {first}", peaks.len()),
        })
        .to_string()
    }

    fn categories(list: &str) -> String {
        let explanations: Vec<&str> = list.lines().filter_map(|l| l.strip_prefix("- ")).collect();
        let categories: Vec<_> = MOCK_CATEGORIES
            .iter()
            .map(|(id, name, def)| {
                let examples: Vec<&str> = explanations
                    .iter()
                    .filter(|e| {
                        e.strip_prefix("token ")
                            .map(token_category)
                            .unwrap_or("mixed_context")
                            == *id
                    })
                    .take(3)
                    .copied()
                    .collect();
                json!({"string_id": id, "name": name, "definition": def, "examples": examples})
            })
            .collect();
        json!({"categories": categories, "summary": "Grouped by the kind of token each feature tracks."})
            .to_string()
    }
}

impl LlmClient for MockClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        if let Some(block) = between(prompt, "<neuron_activations>\n", "\n</neuron_activations>") {
            return Ok(Self::interpret(block));
        }
        if let Some(list) = prompt
            .split("Here are the feature interpretations to categorize:\n")
            .nth(1)
        {
            return Ok(Self::categories(list));
        }
        if let Some(expl) = between(prompt, "Feature explanation: \"", "\"\n") {
            let id = expl
                .strip_prefix("token ")
                .map(token_category)
                .unwrap_or("mixed_context");
            return Ok(id.to_string());
        }
        Err(Error::Malformed(
            "mock client does not recognize this prompt".into(),
        ))
    }
}

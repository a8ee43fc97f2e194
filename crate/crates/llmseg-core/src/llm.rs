//! Chat-completion transport: a trait, an HTTP client, and a file-backed
//! fixture client for offline runs and tests.

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Environment variable holding the chat service base URL.
pub const API_URL_VAR: &str = "LLMSEG_API_URL";
/// Environment variable holding the chat service bearer token.
pub const API_KEY_VAR: &str = "LLMSEG_API_KEY";

#[derive(Debug, Clone)]
pub struct PromptRequest {
    pub model_id: String,
    pub prompt_text: String,
    /// Kept at 0.0 by callers so repeated runs see identical generations.
    pub temperature: f64,
    pub max_tokens: u32,
}

/// Anything that can answer a single-turn prompt with text.
pub trait ChatCompletion: Send + Sync {
    fn complete(&self, req: &PromptRequest) -> Result<String>;
}

/// Bounded exponential backoff. Only transport-level failures and 429/5xx
/// statuses are retried; malformed payloads fail immediately.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(100),
        }
    }
}

impl RetryPolicy {
    /// Run `op` until it succeeds, returns a non-retryable error, or the
    /// attempt budget is exhausted. `op` reports whether its error is worth
    /// retrying via the bool.
    pub(crate) fn run<T>(
        &self,
        context: &str,
        mut op: impl FnMut() -> std::result::Result<T, (bool, String)>,
    ) -> Result<T> {
        let mut delay = self.base_delay;
        let attempts = self.attempts.max(1);
        let mut last_message = String::new();
        for attempt in 0..attempts {
            match op() {
                Ok(v) => return Ok(v),
                Err((retryable, message)) => {
                    if !retryable || attempt + 1 == attempts {
                        return Err(Error::Transport {
                            context: context.to_owned(),
                            message,
                        });
                    }
                    last_message = message;
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
            }
        }
        Err(Error::Transport {
            context: context.to_owned(),
            message: last_message,
        })
    }
}

/// Enforces a minimum spacing between outgoing requests across threads.
pub struct RateLimit {
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl RateLimit {
    /// `requests_per_second == 0` disables the limit.
    pub fn new(requests_per_second: f64) -> Self {
        let min_interval = if requests_per_second > 0.0 {
            Duration::from_secs_f64(1.0 / requests_per_second)
        } else {
            Duration::ZERO
        };
        Self {
            min_interval,
            last: Mutex::new(None),
        }
    }

    pub fn wait(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let mut last = self.last.lock().expect("rate limit lock");
        if let Some(prev) = *last {
            let ready = prev + self.min_interval;
            let now = Instant::now();
            if ready > now {
                std::thread::sleep(ready - now);
            }
        }
        *last = Some(Instant::now());
    }
}

/// Client for an OpenAI-style `/v1/chat/completions` endpoint.
pub struct HttpChatClient {
    base_url: String,
    api_key: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    rate: RateLimit,
}

impl HttpChatClient {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key: api_key.into(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
            retry: RetryPolicy::default(),
            rate: RateLimit::new(0.0),
        }
    }

    /// Read endpoint and key from `LLMSEG_API_URL` / `LLMSEG_API_KEY`.
    pub fn from_env() -> Result<Self> {
        let url =
            std::env::var(API_URL_VAR).map_err(|_| Error::EndpointNotConfigured(API_URL_VAR))?;
        let key =
            std::env::var(API_KEY_VAR).map_err(|_| Error::EndpointNotConfigured(API_KEY_VAR))?;
        Ok(Self::new(url, key))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, requests_per_second: f64) -> Self {
        self.rate = RateLimit::new(requests_per_second);
        self
    }
}

fn classify(err: ureq::Error) -> (bool, String) {
    match err {
        ureq::Error::Status(code, resp) => {
            let body = resp.into_string().unwrap_or_default();
            (code == 429 || code >= 500, format!("HTTP {code}: {body}"))
        }
        ureq::Error::Transport(t) => (true, t.to_string()),
    }
}

impl ChatCompletion for HttpChatClient {
    fn complete(&self, req: &PromptRequest) -> Result<String> {
        let url = format!("{}/v1/chat/completions", self.base_url);
        let body = serde_json::json!({
            "model": req.model_id,
            "messages": [{"role": "user", "content": req.prompt_text}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let value: serde_json::Value = self.retry.run("chat completion", || {
            self.rate.wait();
            self.agent
                .post(&url)
                .set("Authorization", &format!("Bearer {}", self.api_key))
                .send_json(body.clone())
                .map_err(classify)?
                .into_json()
                .map_err(|e| (false, format!("invalid JSON body: {e}")))
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| {
                Error::MalformedResponse("chat response lacks choices[0].message.content".into())
            })
    }
}

/// Offline stand-in that serves canned responses from a directory.
///
/// The class name is recovered from the prompt's final answer line and
/// mapped to `{class_slug}.{mode}.txt`, falling back to `{class_slug}.txt`.
pub struct FixtureChatClient {
    dir: PathBuf,
}

impl FixtureChatClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

/// Filesystem-safe form of a class name: lowercase, runs of
/// non-alphanumerics collapsed to single underscores.
pub fn class_slug(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut last_sep = true;
    for ch in name.chars() {
        if ch.is_alphanumeric() {
            out.extend(ch.to_lowercase());
            last_sep = false;
        } else if !last_sep {
            out.push('_');
            last_sep = true;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

impl ChatCompletion for FixtureChatClient {
    fn complete(&self, req: &PromptRequest) -> Result<String> {
        // Both prompt styles end with "... subclasses of {class}:".
        let tail = req
            .prompt_text
            .rfind("subclasses of ")
            .map(|i| &req.prompt_text[i + "subclasses of ".len()..])
            .ok_or_else(|| {
                Error::MalformedResponse("fixture client cannot locate class in prompt".into())
            })?;
        let class = tail.trim_end().trim_end_matches(':');
        let mode = if req.prompt_text.contains("Q1:") {
            "p2"
        } else {
            "p1"
        };
        let slug = class_slug(class);

        let specific = self.dir.join(format!("{slug}.{mode}.txt"));
        let generic = self.dir.join(format!("{slug}.txt"));
        for path in [&specific, &generic] {
            if path.is_file() {
                return Ok(std::fs::read_to_string(path)?);
            }
        }
        Err(Error::Dataset(format!(
            "no fixture response for class {class:?}: tried {} and {}",
            specific.display(),
            generic.display()
        )))
    }
}

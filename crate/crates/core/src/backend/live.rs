//! OpenAI-compatible `POST {base_url}/v1/chat/completions` client.

use std::env;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    estimate_tokens, validate_messages, Backend, BackendError, BackendOptions, CallTag, ChatMessage, CompletionResult,
};

pub const ENV_API_KEY: &str = "APOLO_API_KEY";
pub const ENV_BASE_URL: &str = "APOLO_BASE_URL";
pub const ENV_MODEL: &str = "APOLO_MODEL";
const ENV_OPENAI_KEY: &str = "OPENAI_API_KEY";
const DEFAULT_BASE_URL: &str = "https://api.openai.com";

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Upper bound of the jittered sleep after failed attempt `attempt` (1-based).
    pub fn backoff_cap(&self, attempt: u32) -> Duration {
        self.base_delay
            .mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }

    fn sleep_before_retry(&self, attempt: u32) {
        let cap = self.backoff_cap(attempt).as_secs_f64();
        let secs = if cap > 0.0 { rand::rng().random_range(0.0..=cap) } else { 0.0 };
        std::thread::sleep(Duration::from_secs_f64(secs));
    }
}

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl LiveConfig {
    /// Explicit options win over environment variables.
    pub fn from_options(opts: &BackendOptions) -> Result<Self, BackendError> {
        let api_key = opts
            .api_key
            .clone()
            .or_else(|| env::var(ENV_API_KEY).ok())
            .or_else(|| env::var(ENV_OPENAI_KEY).ok())
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                BackendError::Config(format!("no API key: set {ENV_API_KEY} (or {ENV_OPENAI_KEY})"))
            })?;
        let model = opts
            .model
            .clone()
            .or_else(|| env::var(ENV_MODEL).ok())
            .filter(|m| !m.trim().is_empty())
            .ok_or_else(|| BackendError::Config(format!("no model: pass --model or set {ENV_MODEL}")))?;
        let base_url = opts
            .base_url
            .clone()
            .or_else(|| env::var(ENV_BASE_URL).ok())
            .unwrap_or_else(|| DEFAULT_BASE_URL.to_string());
        Ok(Self {
            base_url,
            model,
            api_key,
            timeout: opts.timeout.unwrap_or(Duration::from_secs(60)),
            retry: RetryPolicy::default(),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

/// The exact request body sent for `(model, messages, temperature)`.
/// Field order is fixed: model, messages, temperature.
pub fn request_body(model: &str, messages: &[ChatMessage], temperature: f64) -> String {
    serde_json::to_string(&ChatRequest {
        model,
        messages,
        temperature,
    })
    .expect("chat request serializes")
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

fn parse_response(body: &str, messages: &[ChatMessage]) -> Result<CompletionResult, BackendError> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| BackendError::Protocol(format!("invalid JSON: {e}")))?;
    let text = resp
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| BackendError::Protocol("response has no choices[0].message.content".into()))?;
    let usage = resp
        .usage
        .and_then(|u| Some((u.prompt_tokens?, u.completion_tokens?)));
    Ok(match usage {
        Some((prompt_tokens, completion_tokens)) => CompletionResult {
            text,
            prompt_tokens,
            completion_tokens,
            estimated: false,
        },
        None => CompletionResult {
            prompt_tokens: messages.iter().map(|m| estimate_tokens(&m.content)).sum(),
            completion_tokens: estimate_tokens(&text),
            text,
            estimated: true,
        },
    })
}

pub struct LiveBackend {
    config: LiveConfig,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("HTTP client: {e}")))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn attempt(&self, body: &str, messages: &[ChatMessage]) -> Result<CompletionResult, BackendError> {
        let resp = self
            .client
            .post(self.config.endpoint())
            .bearer_auth(&self.config.api_key)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Http { status, body: text });
        }
        parse_response(&text, messages)
    }
}

impl Backend for LiveBackend {
    fn name(&self) -> &str {
        "live"
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
        tag: &CallTag,
    ) -> Result<CompletionResult, BackendError> {
        validate_messages(messages)?;
        let body = request_body(&self.config.model, messages, temperature);
        let policy = &self.config.retry;
        let mut attempt = 1;
        loop {
            match self.attempt(&body, messages) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_transient() && attempt < policy.max_attempts => {
                    log::warn!("{tag}: attempt {attempt} failed ({e}); retrying");
                    policy.sleep_before_retry(attempt);
                    attempt += 1;
                }
                Err(e) if e.is_transient() => {
                    return Err(BackendError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;
    use crate::backend::CallKind;
    use crate::domain::AgentRole;

    /// Serves canned `(status, body)` replies in order, one per connection.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in replies {
                let (stream, _) = match listener.accept() {
                    Ok(s) => s,
                    Err(_) => break,
                };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (addr, hits, handle)
    }

    fn backend(base_url: String) -> LiveBackend {
        LiveBackend::new(LiveConfig {
            base_url,
            model: "m".into(),
            api_key: "k".into(),
            timeout: Duration::from_secs(5),
            retry: RetryPolicy {
                max_attempts: 3,
                base_delay: Duration::from_millis(1),
                factor: 2.0,
            },
        })
        .unwrap()
    }

    fn msgs() -> Vec<ChatMessage> {
        vec![ChatMessage::system("sys"), ChatMessage::user("hi")]
    }

    fn tag() -> CallTag {
        CallTag::new(AgentRole::Target, 1, 1, CallKind::Predict, 1)
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"joy"}}],"usage":{"prompt_tokens":12,"completion_tokens":1}}"#;

    #[test]
    fn request_body_field_order_is_fixed() {
        assert_eq!(
            request_body("m", &msgs(), 0.6),
            r#"{"model":"m","messages":[{"role":"system","content":"sys"},{"role":"user","content":"hi"}],"temperature":0.6}"#
        );
    }

    #[test]
    fn retries_transient_then_succeeds() {
        let (url, hits, h) = serve(vec![(503, "{}".into()), (429, "{}".into()), (200, OK.into())]);
        let r = backend(url).complete(&msgs(), 0.6, &tag()).unwrap();
        assert_eq!(r.text, "joy");
        assert_eq!((r.prompt_tokens, r.completion_tokens, r.estimated), (12, 1, false));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        let bodies = h.join().unwrap();
        assert!(bodies.iter().all(|b| b == &bodies[0]));
    }

    #[test]
    fn gives_up_after_three_attempts() {
        let (url, hits, _h) = serve(vec![(500, "{}".into()), (502, "{}".into()), (500, "{}".into())]);
        let err = backend(url).complete(&msgs(), 0.6, &tag()).unwrap_err();
        assert!(matches!(err, BackendError::Exhausted { attempts: 3, .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn does_not_retry_client_errors() {
        let (url, hits, _h) = serve(vec![(400, "bad".into()), (200, OK.into())]);
        let err = backend(url).complete(&msgs(), 0.6, &tag()).unwrap_err();
        assert!(matches!(err, BackendError::Http { status: 400, .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn missing_usage_is_estimated() {
        let r = parse_response(r#"{"choices":[{"message":{"content":"abcdefgh"}}]}"#, &msgs()).unwrap();
        assert!(r.estimated);
        assert_eq!(r.completion_tokens, 2);
        assert_eq!(r.prompt_tokens, 2);
        assert!(parse_response(r#"{"choices":[]}"#, &msgs()).is_err());
    }

    #[test]
    fn backoff_grows_geometrically() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff_cap(1), Duration::from_secs(1));
        assert_eq!(p.backoff_cap(2), Duration::from_secs(2));
        assert_eq!(p.backoff_cap(3), Duration::from_secs(4));
    }

    #[test]
    fn explicit_options_need_key_and_model() {
        let opts = BackendOptions {
            api_key: Some("k".into()),
            model: Some("m".into()),
            base_url: Some("http://x/".into()),
            ..Default::default()
        };
        let cfg = LiveConfig::from_options(&opts).unwrap();
        assert_eq!(cfg.endpoint(), "http://x/v1/chat/completions");
        assert_eq!(cfg.timeout, Duration::from_secs(60));
    }
}

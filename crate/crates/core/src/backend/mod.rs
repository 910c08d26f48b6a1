//! Completion backends.
//!
//! Every agent call goes through [`Backend::complete`] with a [`CallTag`]
//! naming its semantic position in the run. The live backend ignores the
//! tag; the scripted backend uses it as the lookup key.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::AgentRole;

mod live;
mod scripted;

pub use live::{request_body, LiveBackend, LiveConfig, RetryPolicy};
pub use scripted::{CallRecord, ScriptBuilder, ScriptEntry, ScriptedBackend};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no scripted response for {0}")]
    ScriptMiss(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<BackendError> },
}

impl BackendError {
    /// Transient failures worth retrying: transport errors, 429 and 5xx.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Token counts were estimated as `ceil(chars / 4)`.
    pub estimated: bool,
}

pub(crate) fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// What an agent call is for. Together with role, iteration, step and
/// occurrence it keys scripted responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    Plan,
    Plausibility,
    Risk,
    Question,
    Revise,
    Verdict,
    Rewrite,
    Alignment,
    Predict,
    Test,
}

impl CallKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CallKind::Plan => "plan",
            CallKind::Plausibility => "plausibility",
            CallKind::Risk => "risk",
            CallKind::Question => "question",
            CallKind::Revise => "revise",
            CallKind::Verdict => "verdict",
            CallKind::Rewrite => "rewrite",
            CallKind::Alignment => "alignment",
            CallKind::Predict => "predict",
            CallKind::Test => "test",
        }
    }
}

/// Semantic position of one backend call.
///
/// `retry` counts format re-asks of the same request; a re-ask is keyed
/// with call kind `<kind>.retry<n>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CallTag {
    pub role: AgentRole,
    pub iteration: usize,
    pub step: usize,
    pub kind: CallKind,
    pub occurrence: usize,
    pub retry: u32,
}

impl CallTag {
    pub fn new(role: AgentRole, iteration: usize, step: usize, kind: CallKind, occurrence: usize) -> Self {
        Self {
            role,
            iteration,
            step,
            kind,
            occurrence,
            retry: 0,
        }
    }

    pub fn with_retry(mut self, retry: u32) -> Self {
        self.retry = retry;
        self
    }

    pub fn kind_key(&self) -> String {
        if self.retry == 0 {
            self.kind.as_str().to_string()
        } else {
            format!("{}.retry{}", self.kind.as_str(), self.retry)
        }
    }
}

impl fmt::Display for CallTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {}, {})",
            self.role,
            self.iteration,
            self.step,
            self.kind_key(),
            self.occurrence
        )
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(
        &self,
        messages: &[ChatMessage],
        temperature: f64,
        tag: &CallTag,
    ) -> Result<CompletionResult, BackendError>;
}

/// Checks shared by every backend.
pub(crate) fn validate_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    match messages.first() {
        None => return Err(BackendError::Config("empty message list".into())),
        Some(m) if m.role != MessageRole::System => {
            return Err(BackendError::Config("first message must be a system message".into()))
        }
        _ => {}
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role != MessageRole::Assistant && m.content.trim().is_empty())
    {
        return Err(BackendError::Config(format!("{:?} message has empty content", m.role)));
    }
    Ok(())
}

/// Everything a backend factory may need; each factory reads its own part.
#[derive(Debug, Clone, Default)]
pub struct BackendOptions {
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub script: Option<PathBuf>,
    pub timeout: Option<Duration>,
}

pub trait BackendFactory: Send + Sync {
    fn build(&self, options: &BackendOptions) -> Result<Arc<dyn Backend>, BackendError>;
}

impl<F> BackendFactory for F
where
    F: Fn(&BackendOptions) -> Result<Arc<dyn Backend>, BackendError> + Send + Sync,
{
    fn build(&self, options: &BackendOptions) -> Result<Arc<dyn Backend>, BackendError> {
        self(options)
    }
}

/// Name → backend factory.
pub struct BackendRegistry {
    factories: BTreeMap<String, Box<dyn BackendFactory>>,
}

impl Default for BackendRegistry {
    fn default() -> Self {
        let mut reg = Self::empty();
        reg.register("live", |opts: &BackendOptions| {
            let cfg = LiveConfig::from_options(opts)?;
            Ok(Arc::new(LiveBackend::new(cfg)?) as Arc<dyn Backend>)
        });
        reg.register("scripted", |opts: &BackendOptions| {
            let path = opts
                .script
                .as_ref()
                .ok_or_else(|| BackendError::Config("scripted backend needs a script file".into()))?;
            Ok(Arc::new(ScriptedBackend::from_file(path)?) as Arc<dyn Backend>)
        });
        reg
    }
}

impl BackendRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: impl BackendFactory + 'static) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn build(&self, name: &str, options: &BackendOptions) -> Result<Arc<dyn Backend>, BackendError> {
        let factory = self.factories.get(name).ok_or_else(|| {
            BackendError::Config(format!(
                "unknown backend {name:?} (known: {})",
                self.names().join(", ")
            ))
        })?;
        factory.build(options)
    }
}

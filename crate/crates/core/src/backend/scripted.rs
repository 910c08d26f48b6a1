use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{estimate_tokens, validate_messages, Backend, BackendError, CallKind, CallTag, ChatMessage, CompletionResult};
use crate::domain::AgentRole;

/// One line of a script file.
///
/// `iteration` or `step` may be omitted to match any value; an exact entry
/// always wins over a wildcard one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub role: AgentRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub call_kind: String,
    #[serde(default = "one")]
    pub occurrence: usize,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

fn one() -> usize {
    1
}

type Key = (AgentRole, Option<usize>, Option<usize>, String, usize);

impl ScriptEntry {
    fn key(&self) -> Key {
        (self.role, self.iteration, self.step, self.call_kind.clone(), self.occurrence)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRecord {
    pub tag: CallTag,
    pub messages: Vec<ChatMessage>,
}

/// Replays responses keyed by call position. Responses never depend on
/// call order or timing.
#[derive(Debug)]
pub struct ScriptedBackend {
    entries: HashMap<Key, ScriptEntry>,
    log: Option<Mutex<Vec<CallRecord>>>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, BackendError> {
        let mut map = HashMap::with_capacity(entries.len());
        for e in entries {
            if let Some(prev) = map.insert(e.key(), e) {
                return Err(BackendError::Config(format!(
                    "duplicate script key ({}, {:?}, {:?}, {}, {})",
                    prev.role, prev.iteration, prev.step, prev.call_kind, prev.occurrence
                )));
            }
        }
        Ok(Self { entries: map, log: None })
    }

    pub fn from_jsonl(text: &str) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Config(format!("script line {}: {e}", i + 1)))?;
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    /// Keep a log of every call (for transcript assertions).
    pub fn recording(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    /// Recorded calls sorted by tag, independent of arrival order.
    pub fn calls(&self) -> Vec<CallRecord> {
        let mut calls = self
            .log
            .as_ref()
            .map(|l| l.lock().expect("call log poisoned").clone())
            .unwrap_or_default();
        calls.sort_by_key(|a| a.tag);
        calls
    }

    pub fn count_calls(&self, role: AgentRole, kind: Option<CallKind>) -> usize {
        self.calls()
            .iter()
            .filter(|c| c.tag.role == role && kind.is_none_or(|k| c.tag.kind == k))
            .count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn lookup(&self, tag: &CallTag) -> Option<&ScriptEntry> {
        let kind = tag.kind_key();
        let candidates = [
            (Some(tag.iteration), Some(tag.step)),
            (None, Some(tag.step)),
            (Some(tag.iteration), None),
            (None, None),
        ];
        candidates.into_iter().find_map(|(it, st)| {
            self.entries
                .get(&(tag.role, it, st, kind.clone(), tag.occurrence))
        })
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        _temperature: f64,
        tag: &CallTag,
    ) -> Result<CompletionResult, BackendError> {
        validate_messages(messages)?;
        if let Some(log) = &self.log {
            log.lock().expect("call log poisoned").push(CallRecord {
                tag: *tag,
                messages: messages.to_vec(),
            });
        }
        let entry = self
            .lookup(tag)
            .ok_or_else(|| BackendError::ScriptMiss(tag.to_string()))?;
        let estimated = entry.prompt_tokens.is_none() || entry.completion_tokens.is_none();
        let prompt_tokens = entry
            .prompt_tokens
            .unwrap_or_else(|| messages.iter().map(|m| estimate_tokens(&m.content)).sum());
        let completion_tokens = entry
            .completion_tokens
            .unwrap_or_else(|| estimate_tokens(&entry.response));
        Ok(CompletionResult {
            text: entry.response.clone(),
            prompt_tokens,
            completion_tokens,
            estimated,
        })
    }
}

/// Fluent construction of scripts in code.
#[derive(Debug, Clone, Default)]
pub struct ScriptBuilder {
    entries: Vec<ScriptEntry>,
}

impl ScriptBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &mut self,
        role: AgentRole,
        iteration: Option<usize>,
        step: Option<usize>,
        kind: &str,
        occurrence: usize,
        response: impl Into<String>,
    ) -> &mut Self {
        self.entries.push(ScriptEntry {
            role,
            iteration,
            step,
            call_kind: kind.to_string(),
            occurrence,
            response: response.into(),
            prompt_tokens: None,
            completion_tokens: None,
        });
        self
    }

    pub fn at(
        &mut self,
        role: AgentRole,
        iteration: usize,
        step: usize,
        kind: CallKind,
        occurrence: usize,
        response: impl Into<String>,
    ) -> &mut Self {
        self.push(role, Some(iteration), Some(step), kind.as_str(), occurrence, response)
    }

    /// Entry matching every iteration.
    pub fn every_iteration(
        &mut self,
        role: AgentRole,
        step: usize,
        kind: CallKind,
        occurrence: usize,
        response: impl Into<String>,
    ) -> &mut Self {
        self.push(role, None, Some(step), kind.as_str(), occurrence, response)
    }

    /// Entry matching every iteration and step.
    pub fn always(&mut self, role: AgentRole, kind: CallKind, occurrence: usize, response: impl Into<String>) -> &mut Self {
        self.push(role, None, None, kind.as_str(), occurrence, response)
    }

    /// Raw entry, e.g. for `<kind>.retry<n>` keys or explicit token counts.
    pub fn entry(&mut self, entry: ScriptEntry) -> &mut Self {
        self.entries.push(entry);
        self
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("script entry serializes") + "\n")
            .collect()
    }

    pub fn build(&self) -> Result<ScriptedBackend, BackendError> {
        ScriptedBackend::new(self.entries.clone())
    }
}

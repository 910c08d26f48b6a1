//! Agent roles: templates, output grammars, and the tagged caller that
//! re-asks on grammar violations and accounts tokens per role.

mod parse;
mod templates;

pub use parse::{
    labels_in_text, parse_free_text, parse_plan, parse_risk, parse_target_multi, parse_target_single, parse_unit_score,
    parse_verdict, ParseError, TargetParse,
};
pub use templates::{
    alignment_payload, critic_payload, history_digest, planner_payload, plausibility_payload, render,
    risk_payload, student_payload, target_messages, target_payload, teacher_payload, teacher_revision_payload,
    RoleTemplate, TemplateKind, TemplateSet,
};

use crate::backend::{Backend, CallTag, ChatMessage};
use crate::domain::{LabelMode, LabelSpace, TokenUsage};
use crate::error::{Error, Result};

/// Format re-asks after the first malformed reply.
pub const MAX_REASKS: u32 = 2;

pub const PLAN_REMINDER: &str = "Your response must strictly follow the format:\n\
Total steps: [number]\nStep 1: [description]\n...\nStep N: [description]";
pub const VERDICT_REMINDER: &str = "Output only [True], or [False] followed on the next line by \
[suggestion: reason for the incorrect judgment].";
pub const TEXT_REMINDER: &str = "Your answer must not be empty.";
pub const SCORE_REMINDER: &str = "Respond only with the requested line(s), each holding a single number in [0,1].";

/// Parse a Target reply according to the label-space mode.
pub fn parse_target(text: &str, space: &LabelSpace) -> TargetParse {
    match space.mode() {
        LabelMode::Single => parse_target_single(text, space),
        LabelMode::Multi => parse_target_multi(text, space),
    }
}

/// Issues tagged calls against a backend and accumulates token usage.
pub struct AgentCaller<'a> {
    backend: &'a dyn Backend,
    temperature: f64,
    usage: TokenUsage,
}

impl<'a> AgentCaller<'a> {
    pub fn new(backend: &'a dyn Backend, temperature: f64) -> Self {
        Self {
            backend,
            temperature,
            usage: TokenUsage::default(),
        }
    }

    pub fn usage(&self) -> &TokenUsage {
        &self.usage
    }

    pub fn take_usage(&mut self) -> TokenUsage {
        std::mem::take(&mut self.usage)
    }

    pub fn call(&mut self, tag: &CallTag, messages: &[ChatMessage]) -> Result<String> {
        let r = self.backend.complete(messages, self.temperature, tag)?;
        self.usage
            .record(tag.role, r.prompt_tokens, r.completion_tokens, r.estimated);
        Ok(r.text)
    }

    /// Call and parse; on a grammar violation re-ask up to [`MAX_REASKS`]
    /// times with the bad reply and `reminder` appended to the conversation.
    pub fn ask<T>(
        &mut self,
        tag: &CallTag,
        messages: Vec<ChatMessage>,
        reminder: &str,
        parse: impl Fn(&str) -> std::result::Result<T, ParseError>,
    ) -> Result<T> {
        let mut convo = messages;
        let mut retry = 0;
        loop {
            let reply = self.call(&tag.with_retry(retry), &convo)?;
            match parse(&reply) {
                Ok(v) => return Ok(v),
                Err(e) if retry < MAX_REASKS => {
                    log::warn!("{tag}: {e}; re-asking");
                    convo.push(ChatMessage::assistant(reply));
                    convo.push(ChatMessage::user(format!(
                        "Your previous answer did not follow the required format ({e}). {reminder}"
                    )));
                    retry += 1;
                }
                Err(e) => {
                    return Err(Error::Grammar {
                        context: tag.to_string(),
                        source: e,
                    })
                }
            }
        }
    }

    /// Like [`ask`](Self::ask) but a persistent grammar violation yields
    /// `fallback` and `true` (estimated) instead of an error. Backend errors
    /// still propagate.
    pub fn ask_or<T>(
        &mut self,
        tag: &CallTag,
        messages: Vec<ChatMessage>,
        reminder: &str,
        parse: impl Fn(&str) -> std::result::Result<T, ParseError>,
        fallback: T,
    ) -> Result<(T, bool)> {
        match self.ask(tag, messages, reminder, parse) {
            Ok(v) => Ok((v, false)),
            Err(Error::Grammar { context, source }) => {
                log::warn!("{context}: {source}; using fallback value");
                Ok((fallback, true))
            }
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CallKind, ScriptBuilder, ScriptEntry};
    use crate::domain::AgentRole;

    fn msgs() -> Vec<ChatMessage> {
        vec![ChatMessage::system("s"), ChatMessage::user("u")]
    }

    fn retry_entry(kind: &str, response: &str) -> ScriptEntry {
        ScriptEntry {
            role: AgentRole::Planner,
            iteration: Some(1),
            step: Some(0),
            call_kind: kind.into(),
            occurrence: 1,
            response: response.into(),
            prompt_tokens: Some(1),
            completion_tokens: Some(1),
        }
    }

    #[test]
    fn reasks_then_succeeds() {
        let mut b = ScriptBuilder::new();
        b.entry(retry_entry("plan", "no header"))
            .entry(retry_entry("plan.retry1", "Total steps: 1\nStep 1: ok"));
        let backend = b.build().unwrap().recording();
        let mut caller = AgentCaller::new(&backend, 0.6);
        let tag = CallTag::new(AgentRole::Planner, 1, 0, CallKind::Plan, 1);
        let plan = caller.ask(&tag, msgs(), PLAN_REMINDER, parse_plan).unwrap();
        assert_eq!(plan, vec!["ok"]);
        assert_eq!(caller.usage().calls(AgentRole::Planner), 2);
        let calls = backend.calls();
        assert_eq!(calls[1].messages.len(), 4);
        assert_eq!(calls[1].messages[2].content, "no header");
    }

    #[test]
    fn fails_after_two_reasks() {
        let mut b = ScriptBuilder::new();
        b.entry(retry_entry("plan", "x"))
            .entry(retry_entry("plan.retry1", "y"))
            .entry(retry_entry("plan.retry2", "z"));
        let backend = b.build().unwrap();
        let mut caller = AgentCaller::new(&backend, 0.6);
        let tag = CallTag::new(AgentRole::Planner, 1, 0, CallKind::Plan, 1);
        let err = caller.ask(&tag, msgs(), PLAN_REMINDER, parse_plan).unwrap_err();
        assert!(matches!(err, Error::Grammar { .. }));
        assert_eq!(caller.usage().calls(AgentRole::Planner), 3);

        let mut caller = AgentCaller::new(&backend, 0.6);
        let (v, est) = caller
            .ask_or(&tag, msgs(), SCORE_REMINDER, parse_unit_score, 0.5)
            .unwrap();
        assert_eq!((v, est), (0.5, true));
    }

    #[test]
    fn backend_errors_are_not_swallowed() {
        let backend = ScriptBuilder::new().build().unwrap();
        let mut caller = AgentCaller::new(&backend, 0.6);
        let tag = CallTag::new(AgentRole::Critic, 1, 1, CallKind::Alignment, 1);
        let r = caller.ask_or(&tag, msgs(), SCORE_REMINDER, parse_unit_score, 0.5);
        assert!(matches!(r, Err(Error::Backend(_))));
    }
}

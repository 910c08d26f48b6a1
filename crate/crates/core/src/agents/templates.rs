//! Role templates and per-role user payloads.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backend::ChatMessage;
use crate::domain::{LabelMode, LabelSpace, Sample, SocraticTurn, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TemplateKind {
    Planner,
    Teacher,
    Critic,
    Student,
    TargetSingle,
    TargetMulti,
    Risk,
    Plausibility,
    Alignment,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 9] = [
        TemplateKind::Planner,
        TemplateKind::Teacher,
        TemplateKind::Critic,
        TemplateKind::Student,
        TemplateKind::TargetSingle,
        TemplateKind::TargetMulti,
        TemplateKind::Risk,
        TemplateKind::Plausibility,
        TemplateKind::Alignment,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::Planner => "planner.txt",
            TemplateKind::Teacher => "teacher.txt",
            TemplateKind::Critic => "critic.txt",
            TemplateKind::Student => "student.txt",
            TemplateKind::TargetSingle => "target_single.txt",
            TemplateKind::TargetMulti => "target_multi.txt",
            TemplateKind::Risk => "risk.txt",
            TemplateKind::Plausibility => "plausibility.txt",
            TemplateKind::Alignment => "alignment.txt",
        }
    }

    fn builtin_text(self) -> &'static str {
        match self {
            TemplateKind::Planner => include_str!("../../templates/planner.txt"),
            TemplateKind::Teacher => include_str!("../../templates/teacher.txt"),
            TemplateKind::Critic => include_str!("../../templates/critic.txt"),
            TemplateKind::Student => include_str!("../../templates/student.txt"),
            TemplateKind::TargetSingle => include_str!("../../templates/target_single.txt"),
            TemplateKind::TargetMulti => include_str!("../../templates/target_multi.txt"),
            TemplateKind::Risk => include_str!("../../templates/risk.txt"),
            TemplateKind::Plausibility => include_str!("../../templates/plausibility.txt"),
            TemplateKind::Alignment => include_str!("../../templates/alignment.txt"),
        }
    }

    /// Slots the loop fills for this kind.
    fn required_slots(self) -> &'static [&'static str] {
        match self {
            TemplateKind::TargetSingle | TemplateKind::TargetMulti => &["prompt", "options"],
            _ => &[],
        }
    }
}

/// A system text with `{{slot}}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleTemplate {
    pub kind: TemplateKind,
    pub system_text: String,
    pub slots: Vec<String>,
}

fn scan_slots(text: &str) -> Result<Vec<String>> {
    let mut slots = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        let close = after
            .find("}}")
            .ok_or_else(|| Error::Template(format!("unterminated placeholder near {:?}", &rest[open..])))?;
        let name = after[..close].trim();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Template(format!("bad placeholder name {name:?}")));
        }
        if !slots.iter().any(|s| s == name) {
            slots.push(name.to_string());
        }
        rest = &after[close + 2..];
    }
    Ok(slots)
}

impl RoleTemplate {
    pub fn new(kind: TemplateKind, system_text: impl Into<String>) -> Result<Self> {
        let system_text = system_text.into().trim_end().to_string();
        let slots = scan_slots(&system_text)?;
        for req in kind.required_slots() {
            if !slots.iter().any(|s| s == req) {
                return Err(Error::Template(format!(
                    "{} must contain the {{{{{req}}}}} placeholder",
                    kind.file_name()
                )));
            }
        }
        Ok(Self {
            kind,
            system_text,
            slots,
        })
    }

    /// Single left-to-right pass, so slot values are never re-expanded.
    pub fn fill(&self, values: &[(&str, &str)]) -> Result<String> {
        let lookup = |slot: &str| {
            values
                .iter()
                .find(|(k, _)| *k == slot)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::Template(format!("{}: slot {slot:?} not filled", self.kind.file_name())))
        };
        let mut out = String::with_capacity(self.system_text.len());
        let mut rest = self.system_text.as_str();
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            let close = after.find("}}").expect("placeholders validated at construction");
            out.push_str(lookup(after[..close].trim())?);
            rest = &after[close + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

/// System message from the filled template, user message carrying the
/// role-specific payload.
pub fn render(template: &RoleTemplate, slots: &[(&str, &str)], user_payload: &str) -> Result<Vec<ChatMessage>> {
    Ok(vec![
        ChatMessage::system(template.fill(slots)?),
        ChatMessage::user(user_payload),
    ])
}

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateKind, RoleTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateKind::ALL
            .into_iter()
            .map(|k| (k, RoleTemplate::new(k, k.builtin_text()).expect("builtin template is valid")))
            .collect();
        Self { templates }
    }

    /// Built-in templates, replaced by any `<kind>.txt` present in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("template directory {} not found", dir.display())));
        }
        let mut set = Self::builtin();
        for kind in TemplateKind::ALL {
            let path = dir.join(kind.file_name());
            if path.is_file() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                set.templates.insert(kind, RoleTemplate::new(kind, text)?);
            }
        }
        Ok(set)
    }

    pub fn get(&self, kind: TemplateKind) -> &RoleTemplate {
        &self.templates[&kind]
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

const EXCERPT_CHARS: usize = 400;
const HISTORY_TURNS: usize = 4;

fn excerpt(text: &str) -> String {
    let mut out: String = text.chars().take(EXCERPT_CHARS).collect();
    if text.chars().count() > EXCERPT_CHARS {
        out.push('…');
    }
    out
}

fn verdict_line(turn: &SocraticTurn) -> String {
    match turn.verdicts.last() {
        Some(v) if v.approved => "[True]".into(),
        Some(v) => format!("[False] {}", v.suggestion.as_deref().unwrap_or("")),
        None => "(none)".into(),
    }
}

/// Bounded digest of the last four turns.
pub fn history_digest(history: &[SocraticTurn]) -> String {
    if history.is_empty() {
        return "(no previous turns)".into();
    }
    let start = history.len().saturating_sub(HISTORY_TURNS);
    history[start..]
        .iter()
        .map(|t| {
            format!(
                "Turn {}:\nQ: {}\nVerdict: {}\nPrompt excerpt: {}",
                t.step,
                t.question.trim(),
                verdict_line(t),
                excerpt(&t.result_prompt.text)
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn planner_payload(goal: &str, input_digest: &str, p0: &str) -> String {
    format!("Problem: {goal}\n\nData overview:\n{input_digest}\n\nCurrent prompt:\n{p0}")
}

pub fn teacher_payload(sub_goal: &str, step: usize, n: usize, prompt: &str, history: &str) -> String {
    format!(
        "Current step ({step} of {n}): {sub_goal}\n\nPrompt given by the student in the last round:\n{prompt}\n\nPrevious turns:\n{history}"
    )
}

pub fn teacher_revision_payload(base: &str, questions: &str, suggestion: &str) -> String {
    format!(
        "{base}\n\nYour previous questions:\n{questions}\n\nThe critic rejected them: {suggestion}\nRevise your two questions accordingly."
    )
}

pub fn critic_payload(sub_goal: &str, questions: &str, history: &str) -> String {
    format!(
        "Task: Socratic questions for the optimization step \"{sub_goal}\".\n\nQuestions:\n{questions}\n\nPrevious turns:\n{history}"
    )
}

pub fn student_payload(questions: &str, suggestion: Option<&str>, prompt: &str, history: &str) -> String {
    let feedback = match suggestion {
        Some(s) => format!("Critic suggestion: {s}"),
        None => "Critic verdict: [True]".to_string(),
    };
    format!(
        "Teacher's questions:\n{questions}\n\n{feedback}\n\nExisting prompt:\n{prompt}\n\nPrevious turns:\n{history}"
    )
}

pub fn risk_payload(goal: &str, sub_goal: &str) -> String {
    format!("Goal: {goal}\nStep: {sub_goal}")
}

pub fn plausibility_payload(goal: &str, trajectory: &Trajectory) -> String {
    let steps: Vec<String> = trajectory
        .sub_goals
        .iter()
        .map(|s| format!("Step {}: {}", s.index, s.description))
        .collect();
    format!(
        "Goal: {goal}\n\nPlan:\nTotal steps: {}\n{}",
        trajectory.len(),
        steps.join("\n")
    )
}

pub fn alignment_payload(sub_goal: &str, questions: &str, verdict: &str) -> String {
    format!("Step: {sub_goal}\n\nQuestions:\n{questions}\n\nVerdict: {verdict}")
}

pub fn target_payload(sample: &Sample, mode: LabelMode) -> String {
    match mode {
        LabelMode::Single => {
            let history = if sample.context.is_empty() {
                "(none)".to_string()
            } else {
                sample.context.join("\n")
            };
            format!(
                "--- Conversation History ---\n{history}\n--- Current Utterance to Analyze ---\n{}",
                sample.focus_text
            )
        }
        LabelMode::Multi => match sample.context.first() {
            Some(title) => format!("Title: {title}\nPost: {}", sample.focus_text),
            None => format!("Post: {}", sample.focus_text),
        },
    }
}

pub fn target_messages(templates: &TemplateSet, prompt: &str, sample: &Sample, space: &LabelSpace) -> Result<Vec<ChatMessage>> {
    let kind = match space.mode() {
        LabelMode::Single => TemplateKind::TargetSingle,
        LabelMode::Multi => TemplateKind::TargetMulti,
    };
    let options = space.options_list();
    render(
        templates.get(kind),
        &[("prompt", prompt), ("options", &options)],
        &target_payload(sample, space.mode()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CriticVerdict, LabelSet, Prompt};

    #[test]
    fn builtin_templates_keep_role_text() {
        let set = TemplateSet::builtin();
        assert!(set
            .get(TemplateKind::Student)
            .system_text
            .ends_with("Output only the newly generated prompt and nothing else."));
        assert!(set.get(TemplateKind::Planner).system_text.contains("Total steps: [number]"));
        assert!(set.get(TemplateKind::Teacher).system_text.contains("a total of two questions"));
        assert!(set.get(TemplateKind::Critic).system_text.contains("[suggestion: reason for the incorrect judgment]"));
        assert!(set.get(TemplateKind::Planner).slots.is_empty());
    }

    #[test]
    fn missing_slot_is_an_error() {
        let t = RoleTemplate::new(TemplateKind::TargetMulti, "{{prompt}}\nOptions: {{options}}").unwrap();
        assert!(matches!(t.fill(&[("prompt", "p")]), Err(Error::Template(_))));
        assert_eq!(t.fill(&[("prompt", "p"), ("options", "[a, b]")]).unwrap(), "p\nOptions: [a, b]");
        assert!(RoleTemplate::new(TemplateKind::TargetMulti, "no slots").is_err());
        assert!(RoleTemplate::new(TemplateKind::Planner, "{{oops").is_err());
    }

    #[test]
    fn multi_target_ends_with_options() {
        let space = LabelSpace::from_raw(
            &["anger", "brain dysfunction (forget)", "emptiness"],
            LabelMode::Multi,
        )
        .unwrap();
        let sample = Sample {
            id: "p1".into(),
            context: vec!["tired".into()],
            focus_text: "I feel like a waste of space".into(),
            gold: LabelSet::new(),
        };
        let msgs = target_messages(&TemplateSet::builtin(), "Classify.", &sample, &space).unwrap();
        assert!(msgs[0]
            .content
            .ends_with("Options: [anger, brain dysfunction (forget), emptiness]"));
        assert!(msgs[0].content.starts_with("Classify."));
        assert_eq!(msgs[1].content, "Title: tired\nPost: I feel like a waste of space");
    }

    #[test]
    fn single_target_carries_output_contract() {
        let space = LabelSpace::from_raw(&["joy", "sadness"], LabelMode::Single).unwrap();
        let sample = Sample {
            id: "d1".into(),
            context: vec!["Hi.".into()],
            focus_text: "I got the job!".into(),
            gold: LabelSet::new(),
        };
        let msgs = target_messages(&TemplateSet::builtin(), "Classify.", &sample, &space).unwrap();
        assert!(msgs[0].content.contains("single word representing the emotion"));
        assert!(msgs[1].content.contains("--- Current Utterance to Analyze ---\nI got the job!"));
    }

    fn turn(step: usize, prompt: &str) -> SocraticTurn {
        SocraticTurn {
            step,
            sub_goal: "g".into(),
            question: format!("q{step}?"),
            initial_question: None,
            revisions: 0,
            verdicts: vec![CriticVerdict::approve()],
            result_prompt: Prompt::initial(prompt).unwrap(),
            alignment: 1.0,
            alignment_estimated: false,
        }
    }

    #[test]
    fn history_keeps_last_four_and_truncates() {
        assert_eq!(history_digest(&[]), "(no previous turns)");
        let long = "x".repeat(500);
        let turns: Vec<_> = (1..=6).map(|i| turn(i, &long)).collect();
        let d = history_digest(&turns);
        assert!(!d.contains("Turn 2:") && d.contains("Turn 3:") && d.contains("Turn 6:"));
        assert!(d.contains(&format!("Prompt excerpt: {}…", "x".repeat(400))));
    }

    #[test]
    fn teacher_payload_carries_goal_prompt_and_history() {
        let p = teacher_payload("Define outputs", 2, 3, "old prompt", "Turn 1: ...");
        assert!(p.contains("Define outputs") && p.contains("old prompt") && p.contains("Turn 1: ..."));
    }
}

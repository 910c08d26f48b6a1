//! A tiny emotion dataset and a matching backend script, for demos and
//! offline tests. Everything here is deterministic.

use serde_json::json;

use crate::backend::{BackendError, CallKind, ScriptBuilder, ScriptedBackend};
use crate::domain::{AgentRole, LabelMode, LabelSpace, Sample};

pub const LABELS: [&str; 5] = ["joy", "sadness", "anger", "fear", "neutral"];

const UTTERANCES: [&str; 5] = [
    "We finally got the keys to our first home!",
    "I still can't believe she is gone.",
    "They cancelled my order again without telling me.",
    "I heard footsteps behind me in the empty parking lot.",
    "The meeting was moved to Thursday.",
];

pub fn label_space() -> LabelSpace {
    LabelSpace::from_raw(&LABELS, LabelMode::Single).expect("toy labels are valid")
}

/// Label-file text in the on-disk format.
pub fn label_file() -> String {
    format!("mode: single\n{}\n", LABELS.join("\n"))
}

/// `n` single-label samples cycling through the label set.
pub fn samples(n: usize) -> Vec<Sample> {
    let space = label_space();
    (0..n)
        .map(|i| {
            let k = i % LABELS.len();
            Sample {
                id: format!("toy-{:02}", i + 1),
                context: vec![format!("A: How was your day, number {}?", i + 1)],
                focus_text: UTTERANCES[k].to_string(),
                gold: [space.labels()[k].clone()].into_iter().collect(),
            }
        })
        .collect()
}

/// Samples as JSON lines in the on-disk format.
pub fn samples_jsonl(samples: &[Sample]) -> String {
    samples
        .iter()
        .map(|s| {
            let label = s.gold.iter().next().map(|l| l.as_str().to_string()).unwrap_or_default();
            json!({
                "id": s.id,
                "context": s.context,
                "utterance": s.focus_text,
                "label": label,
            })
            .to_string()
                + "\n"
        })
        .collect()
}

/// Shape of a scripted optimization run over [`samples`].
#[derive(Debug, Clone)]
pub struct ToyScript {
    pub candidates: usize,
    pub steps: usize,
    /// Samples the Target gets right at iteration `t` (index `t - 1`).
    pub correct: Vec<usize>,
    pub samples: usize,
    /// Critic rejects first and approves the revised questions.
    pub reject_first: bool,
    /// When set, the Student's prompt at iteration `t` mentions the first
    /// `t` keywords.
    pub keywords: Vec<String>,
}

impl Default for ToyScript {
    fn default() -> Self {
        Self {
            candidates: 2,
            steps: 2,
            correct: vec![5, 7, 9],
            samples: 10,
            reject_first: false,
            keywords: Vec::new(),
        }
    }
}

pub fn student_prompt(t: usize, step: usize) -> String {
    format!(
        "Read the conversation history, then name the single emotion of the current utterance \
         (revision {t}.{step}: weigh tone and implied stakes)."
    )
}

fn answer(i: usize, correct: bool) -> &'static str {
    let k = i % LABELS.len();
    if correct {
        LABELS[k]
    } else {
        LABELS[(k + 1) % LABELS.len()]
    }
}

impl ToyScript {
    pub fn builder(&self) -> ScriptBuilder {
        let mut b = ScriptBuilder::new();
        for k in 1..=self.candidates {
            let plan: String = std::iter::once(format!("Total steps: {}", self.steps))
                .chain((1..=self.steps).map(|j| format!("Step {j}: Candidate {k} sub-goal {j}")))
                .collect::<Vec<_>>()
                .join("\n");
            let plausibility = if k == 1 { 0.9 } else { 0.6 };
            b.at(AgentRole::Planner, 1, 0, CallKind::Plan, k, plan)
                .at(AgentRole::Critic, 1, 0, CallKind::Plausibility, k, format!("Plausibility: {plausibility}"))
                .always(AgentRole::Critic, CallKind::Risk, k, "Emotional risk: 0.2\nSafety risk: 0.1");
        }
        b.always(AgentRole::Teacher, CallKind::Question, 1, "Which cues signal the emotion? Is neutral overused?")
            .always(AgentRole::Teacher, CallKind::Revise, 1, "Which words carry the emotion? When is neutral right?")
            .always(AgentRole::Critic, CallKind::Alignment, 1, "Alignment: 0.8");
        if self.reject_first {
            b.always(
                AgentRole::Critic,
                CallKind::Verdict,
                1,
                "[False]\n[suggestion: ask about the context, not only the utterance]",
            )
            .always(AgentRole::Critic, CallKind::Verdict, 2, "[True]");
        } else {
            b.always(AgentRole::Critic, CallKind::Verdict, 1, "[True]");
        }
        for (ti, &c) in self.correct.iter().enumerate() {
            let t = ti + 1;
            for step in 1..=self.steps {
                let mut text = student_prompt(t, step);
                if !self.keywords.is_empty() {
                    let used = &self.keywords[..t.min(self.keywords.len())];
                    text.push_str(&format!(" Consider: {}.", used.join(", ")));
                }
                b.at(AgentRole::Student, t, step, CallKind::Rewrite, 1, text);
            }
            for i in 0..self.samples {
                b.at(AgentRole::Target, t, i + 1, CallKind::Predict, 1, answer(i, i < c));
            }
        }
        for i in 0..self.samples {
            b.at(AgentRole::Target, 0, i + 1, CallKind::Predict, 1, answer(i, i % 2 == 0))
                .every_iteration(AgentRole::Target, i + 1, CallKind::Test, 1, answer(i, true));
        }
        b
    }

    pub fn build(&self) -> Result<ScriptedBackend, BackendError> {
        self.builder().build()
    }
}

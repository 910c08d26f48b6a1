//! Shared domain types: labels, samples, prompts, trajectories, turns and
//! the run state threaded through the optimization loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricReport;

/// A normalized emotion label token.
///
/// Construction always goes through [`normalize_label`], so two labels
/// compare equal iff their normalized tokens are equal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct EmotionLabel(String);

impl EmotionLabel {
    pub fn new(raw: &str) -> Result<Self> {
        normalize_label(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for EmotionLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        normalize_label(&raw).map_err(serde::de::Error::custom)
    }
}

pub type LabelSet = BTreeSet<EmotionLabel>;

fn is_edge_punct(c: char) -> bool {
    (c.is_ascii_punctuation() && c != '(' && c != ')')
        || matches!(c, '“' | '”' | '‘' | '’' | '…' | '«' | '»')
}

/// True when `s` starts with `(` whose matching `)` is the final character.
fn wrapped_in_parens(s: &str) -> bool {
    if !(s.starts_with('(') && s.ends_with(')')) || s.len() < 2 {
        return false;
    }
    let mut depth = 0i32;
    let last = s.len() - 1;
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 {
                    return i == last;
                }
            }
            _ => {}
        }
    }
    false
}

fn strip_edges(mut s: &str) -> &str {
    loop {
        let before = s.len();
        s = s.trim_matches(|c: char| c.is_whitespace() || is_edge_punct(c));
        let opens = s.matches('(').count();
        let closes = s.matches(')').count();
        if s.starts_with('(') && opens > closes {
            s = &s[1..];
        } else if s.ends_with(')') && closes > opens {
            s = &s[..s.len() - 1];
        } else if wrapped_in_parens(s) {
            s = &s[1..s.len() - 1];
        }
        if s.len() == before {
            return s;
        }
    }
}

/// Normalize a raw label: lowercase, collapse whitespace, strip surrounding
/// punctuation. Balanced parentheses inside the label are kept.
pub fn normalize_label(raw: &str) -> Result<EmotionLabel> {
    let mut current = raw.to_string();
    loop {
        let lowered = current.to_lowercase();
        let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
        let next = strip_edges(&collapsed).to_string();
        if next == current {
            break;
        }
        current = next;
    }
    if current.is_empty() {
        return Err(Error::InvalidLabel(raw.to_string()));
    }
    Ok(EmotionLabel(current))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Single,
    Multi,
}

impl fmt::Display for LabelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMode::Single => "single",
            LabelMode::Multi => "multi",
        })
    }
}

/// The ordered label inventory of a dataset. Order is the canonical order
/// used in reports and in the Target options list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LabelSpaceRepr")]
pub struct LabelSpace {
    labels: Vec<EmotionLabel>,
    mode: LabelMode,
}

#[derive(Deserialize)]
struct LabelSpaceRepr {
    labels: Vec<EmotionLabel>,
    mode: LabelMode,
}

impl TryFrom<LabelSpaceRepr> for LabelSpace {
    type Error = Error;

    fn try_from(r: LabelSpaceRepr) -> Result<Self> {
        LabelSpace::new(r.labels, r.mode)
    }
}

impl LabelSpace {
    pub fn new(labels: Vec<EmotionLabel>, mode: LabelMode) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Argument(format!(
                "label space needs at least 2 labels, got {}",
                labels.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(Error::Argument(format!("duplicate label {l:?} in label space")));
            }
        }
        Ok(Self { labels, mode })
    }

    pub fn from_raw<S: AsRef<str>>(raw: &[S], mode: LabelMode) -> Result<Self> {
        let labels = raw
            .iter()
            .map(|s| normalize_label(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels, mode)
    }

    pub fn labels(&self) -> &[EmotionLabel] {
        &self.labels
    }

    pub fn mode(&self) -> LabelMode {
        self.mode
    }

    pub fn contains(&self, label: &EmotionLabel) -> bool {
        self.labels.contains(label)
    }

    /// Look up a raw token; returns the canonical label when it normalizes
    /// to a member of the space.
    pub fn resolve(&self, raw: &str) -> Option<&EmotionLabel> {
        let norm = normalize_label(raw).ok()?;
        self.labels.iter().find(|l| **l == norm)
    }

    /// `[a, b, c]` in canonical order.
    pub fn options_list(&self) -> String {
        let names: Vec<&str> = self.labels.iter().map(|l| l.as_str()).collect();
        format!("[{}]", names.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    /// Preceding dialogue turns (single mode) or the post title (multi mode).
    pub context: Vec<String>,
    pub focus_text: String,
    pub gold: LabelSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    Initial,
    Refined,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub origin: PromptOrigin,
    pub iteration: usize,
    pub step: usize,
}

impl Prompt {
    pub fn new(text: impl Into<String>, origin: PromptOrigin, iteration: usize, step: usize) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Argument("prompt text must be non-empty".into()));
        }
        Ok(Self {
            text,
            origin,
            iteration,
            step,
        })
    }

    pub fn initial(text: impl Into<String>) -> Result<Self> {
        Self::new(text, PromptOrigin::Initial, 0, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubGoal {
    pub index: usize,
    pub description: String,
    pub emo_risk: f64,
    pub safety_risk: f64,
}

impl SubGoal {
    pub fn new(index: usize, description: impl Into<String>) -> Self {
        Self {
            index,
            description: description.into(),
            emo_risk: 0.0,
            safety_risk: 0.0,
        }
    }
}

/// Aggregate trajectory risk: the mean over sub-goals of emotional plus
/// safety risk. Lies in `[0, 2]`.
pub fn aggregate_risk(sub_goals: &[SubGoal]) -> f64 {
    if sub_goals.is_empty() {
        return 0.0;
    }
    let total: f64 = sub_goals.iter().map(|s| s.emo_risk + s.safety_risk).sum();
    total / sub_goals.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub sub_goals: Vec<SubGoal>,
    /// `ln` of the self-rated plausibility, so always `<= 0`.
    pub likelihood_proxy: f64,
    pub risk: f64,
    pub cost: f64,
    pub utility: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Trajectory {
    /// An unscored trajectory. Sub-goal indices are reassigned to positions.
    pub fn unscored(descriptions: Vec<String>) -> Result<Self> {
        if descriptions.is_empty() {
            return Err(Error::Argument("trajectory needs at least one sub-goal".into()));
        }
        let sub_goals = descriptions
            .into_iter()
            .enumerate()
            .map(|(i, d)| {
                if d.trim().is_empty() {
                    Err(Error::Argument(format!("sub-goal {} has an empty description", i + 1)))
                } else {
                    Ok(SubGoal::new(i + 1, d))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sub_goals,
            likelihood_proxy: 0.0,
            risk: 0.0,
            cost: 0.0,
            utility: 0.0,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.sub_goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_goals.is_empty()
    }

    pub fn utility_for(&self, gamma_risk: f64, gamma_cost: f64) -> f64 {
        self.likelihood_proxy - gamma_risk * self.risk - gamma_cost * self.cost
    }

    pub fn check_invariants(&self, gamma_risk: f64, gamma_cost: f64) -> Result<()> {
        if self.sub_goals.is_empty() {
            return Err(Error::Argument("trajectory has no sub-goals".into()));
        }
        for (pos, sg) in self.sub_goals.iter().enumerate() {
            if sg.index != pos + 1 {
                return Err(Error::Argument(format!(
                    "sub-goal at position {} carries index {}",
                    pos + 1,
                    sg.index
                )));
            }
        }
        if (aggregate_risk(&self.sub_goals) - self.risk).abs() > 1e-12 {
            return Err(Error::Argument("trajectory risk disagrees with its sub-goals".into()));
        }
        if (self.utility_for(gamma_risk, gamma_cost) - self.utility).abs() > 1e-12 {
            return Err(Error::Argument("trajectory utility is stale".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticVerdict {
    pub approved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
}

impl CriticVerdict {
    pub fn approve() -> Self {
        Self {
            approved: true,
            suggestion: None,
        }
    }

    pub fn reject(suggestion: impl Into<String>) -> Result<Self> {
        let s = suggestion.into();
        if s.trim().is_empty() {
            return Err(Error::Argument("a rejecting verdict needs a suggestion".into()));
        }
        Ok(Self {
            approved: false,
            suggestion: Some(s),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SocraticTurn {
    pub step: usize,
    pub sub_goal: String,
    /// The question block handed to the Student (after any revision).
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_question: Option<String>,
    pub revisions: usize,
    pub verdicts: Vec<CriticVerdict>,
    pub result_prompt: Prompt,
    pub alignment: f64,
    #[serde(default)]
    pub alignment_estimated: bool,
}

impl SocraticTurn {
    /// Suggestion from the latest rejecting verdict, if any.
    pub fn last_suggestion(&self) -> Option<&str> {
        self.verdicts
            .iter()
            .rev()
            .find_map(|v| v.suggestion.as_deref())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Planner,
    Teacher,
    Critic,
    Student,
    Target,
}

impl AgentRole {
    pub const ALL: [AgentRole; 5] = [
        AgentRole::Planner,
        AgentRole::Teacher,
        AgentRole::Critic,
        AgentRole::Student,
        AgentRole::Target,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Planner => "planner",
            AgentRole::Teacher => "teacher",
            AgentRole::Critic => "critic",
            AgentRole::Student => "student",
            AgentRole::Target => "target",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTokens {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub calls: u64,
    /// Calls whose counts were estimated because the server omitted usage.
    #[serde(default)]
    pub estimated_calls: u64,
}

impl RoleTokens {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }

    fn add(&mut self, other: &RoleTokens) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.calls += other.calls;
        self.estimated_calls += other.estimated_calls;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenUsage {
    pub per_role: BTreeMap<AgentRole, RoleTokens>,
}

impl TokenUsage {
    pub fn record(&mut self, role: AgentRole, prompt_tokens: u64, completion_tokens: u64, estimated: bool) {
        let e = self.per_role.entry(role).or_default();
        e.prompt_tokens += prompt_tokens;
        e.completion_tokens += completion_tokens;
        e.calls += 1;
        if estimated {
            e.estimated_calls += 1;
        }
    }

    pub fn merge(&mut self, other: &TokenUsage) {
        for (role, t) in &other.per_role {
            self.per_role.entry(*role).or_default().add(t);
        }
    }

    pub fn role(&self, role: AgentRole) -> RoleTokens {
        self.per_role.get(&role).copied().unwrap_or_default()
    }

    pub fn total(&self) -> u64 {
        self.per_role.values().map(RoleTokens::total).sum()
    }

    pub fn calls(&self, role: AgentRole) -> u64 {
        self.role(role).calls
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMetric {
    MicroF1,
    MacroF1,
    Emr,
    Pma,
}

impl std::str::FromStr for RewardMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "micro_f1" => Ok(Self::MicroF1),
            "macro_f1" => Ok(Self::MacroF1),
            "emr" => Ok(Self::Emr),
            "pma" => Ok(Self::Pma),
            other => Err(Error::Config(format!("unknown reward metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoPlanner,
    NoCritic,
    NoSocratic,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "no_planner" => Ok(Self::NoPlanner),
            "no_critic" => Ok(Self::NoCritic),
            "no_socratic" => Ok(Self::NoSocratic),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Minimum reward improvement; the loop stops once a gain is `<= delta`.
    pub delta: f64,
    pub max_iterations: usize,
    /// Number of Planner candidates.
    pub num_candidates: usize,
    pub gamma_risk: f64,
    pub gamma_cost: f64,
    pub alpha_len: f64,
    pub alpha_call: f64,
    pub alpha_time: f64,
    pub temperature: f64,
    pub eval_subset_size: Option<usize>,
    pub seed: u64,
    pub reward_metric: RewardMetric,
    pub ablations: BTreeSet<Ablation>,
    pub parallelism: usize,
    /// Task goal handed to the Planner.
    pub goal: String,
    /// Name of a registered planning strategy. `no_planner` overrides it.
    pub planner: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            delta: 0.01,
            max_iterations: 10,
            num_candidates: 4,
            gamma_risk: 0.5,
            gamma_cost: 0.05,
            alpha_len: 1.0 / 3.0,
            alpha_call: 1.0 / 3.0,
            alpha_time: 1.0 / 3.0,
            temperature: 0.6,
            eval_subset_size: None,
            seed: 0,
            reward_metric: RewardMetric::MicroF1,
            ablations: BTreeSet::new(),
            parallelism: 1,
            goal: "Optimize the instruction given to the Target model so that it \
                   diagnoses the emotion labels of each input accurately."
                .into(),
            planner: "risk-aware".into(),
        }
    }
}

impl RunConfig {
    pub fn has(&self, ablation: Ablation) -> bool {
        self.ablations.contains(&ablation)
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.delta > 0.0) {
            return bad("delta must be > 0");
        }
        if self.max_iterations < 1 {
            return bad("max_iterations must be >= 1");
        }
        if self.num_candidates < 1 {
            return bad("num_candidates must be >= 1");
        }
        if self.gamma_risk < 0.0 || self.gamma_cost < 0.0 {
            return bad("gamma weights must be >= 0");
        }
        if self.alpha_len < 0.0 || self.alpha_call < 0.0 || self.alpha_time < 0.0 {
            return bad("alpha weights must be >= 0");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must lie in [0, 2]");
        }
        if self.eval_subset_size == Some(0) {
            return bad("eval_subset_size must be >= 1");
        }
        if self.parallelism < 1 {
            return bad("parallelism must be >= 1");
        }
        if self.goal.trim().is_empty() {
            return bad("goal must be non-empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub final_prompt: Prompt,
    pub reward: f64,
    pub metrics: MetricReport,
    pub turns: Vec<SocraticTurn>,
    pub tokens: TokenUsage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    StoppedDelta,
    StoppedMaxIter,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunStatus::StoppedDelta | RunStatus::StoppedMaxIter)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Running => "running",
            RunStatus::StoppedDelta => "stopped_delta",
            RunStatus::StoppedMaxIter => "stopped_max_iter",
            RunStatus::Failed => "failed",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: RunConfig,
    pub initial_prompt: Prompt,
    pub trajectory: Trajectory,
    pub planning_tokens: TokenUsage,
    pub iterations: Vec<IterationRecord>,
    pub status: RunStatus,
    pub best_prompt: Prompt,
    pub returned_prompt: Prompt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_report: Option<MetricReport>,
    #[serde(default)]
    pub test_tokens: TokenUsage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl RunState {
    pub fn new(config: RunConfig, initial_prompt: Prompt, trajectory: Trajectory, planning_tokens: TokenUsage) -> Self {
        Self {
            config,
            best_prompt: initial_prompt.clone(),
            returned_prompt: initial_prompt.clone(),
            initial_prompt,
            trajectory,
            planning_tokens,
            iterations: Vec::new(),
            status: RunStatus::Running,
            test_report: None,
            test_tokens: TokenUsage::default(),
            failure: None,
        }
    }

    /// Append an iteration and refresh the returned/best prompts.
    pub fn push_iteration(&mut self, record: IterationRecord) {
        self.returned_prompt = record.final_prompt.clone();
        let beats_best = self
            .best_reward()
            .is_none_or(|best| record.reward > best);
        if beats_best {
            self.best_prompt = record.final_prompt.clone();
        }
        self.iterations.push(record);
    }

    pub fn last_reward(&self) -> f64 {
        self.iterations.last().map_or(0.0, |r| r.reward)
    }

    pub fn best_reward(&self) -> Option<f64> {
        self.iterations
            .iter()
            .map(|r| r.reward)
            .fold(None, |acc, r| Some(acc.map_or(r, |a: f64| a.max(r))))
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.reward).collect()
    }

    pub fn total_tokens(&self) -> TokenUsage {
        let mut all = self.planning_tokens.clone();
        for it in &self.iterations {
            all.merge(&it.tokens);
        }
        all.merge(&self.test_tokens);
        all
    }
}

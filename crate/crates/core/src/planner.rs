//! Trajectory planning.
//!
//! The risk-aware strategy samples `K` candidate plans, rates each one for
//! plausibility and per-step risk, prices it by length and estimated calls,
//! and keeps the candidate with the highest penalized utility
//! `ln(plausibility) - gamma_risk * risk - gamma_cost * cost`.
//!
//! Strategies are registered by name in a [`PlannerRegistry`]; the
//! `no_planner` ablation always resolves to the trivial single-step plan.

use std::collections::BTreeMap;

use crate::agents::{
    parse_plan, parse_risk, parse_unit_score, planner_payload, plausibility_payload, render, risk_payload,
    AgentCaller, TemplateKind, TemplateSet, PLAN_REMINDER, SCORE_REMINDER,
};
use crate::backend::CallKind;
use crate::backend::CallTag;
use crate::domain::{aggregate_risk, Ablation, AgentRole, LabelSpace, Prompt, RunConfig, Sample, Trajectory};
use crate::error::{Error, Result};

/// Planning happens once, before the first refinement iteration, and is
/// tagged with iteration 1.
pub const PLANNING_ITERATION: usize = 1;

pub const PLAUSIBILITY_FLOOR: f64 = 0.01;
pub const PLAUSIBILITY_FALLBACK: f64 = 0.5;
pub const TRIVIAL_SUB_GOAL: &str = "Optimize the entire prompt for the task goal";

pub struct PlanningContext<'a> {
    pub goal: &'a str,
    pub input_digest: &'a str,
    pub initial_prompt: &'a Prompt,
    pub config: &'a RunConfig,
    pub templates: &'a TemplateSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub selected: Trajectory,
    pub selected_index: usize,
    pub candidates: Vec<Trajectory>,
}

pub trait PlanningStrategy: Send + Sync {
    fn name(&self) -> &str;

    fn plan(&self, ctx: &PlanningContext<'_>, caller: &mut AgentCaller<'_>) -> Result<PlanOutcome>;
}

/// `alpha_len * n + alpha_call * 3n + alpha_time * n`: three agent calls per
/// step (Teacher, Critic, Student) and one unit of latency per step.
pub fn score_cost(n: usize, alpha_len: f64, alpha_call: f64, alpha_time: f64) -> f64 {
    let n = n as f64;
    alpha_len * n + alpha_call * (3.0 * n) + alpha_time * n
}

/// `ln` of the plausibility after clamping it into `[0.01, 1]`.
pub fn likelihood_proxy(plausibility: f64) -> f64 {
    plausibility.clamp(PLAUSIBILITY_FLOOR, 1.0).ln()
}

/// Index of the highest-utility candidate; ties go to the lowest index.
/// Also refreshes each candidate's stored utility.
pub fn select(candidates: &mut [Trajectory], gamma_risk: f64, gamma_cost: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter_mut().enumerate() {
        c.utility = c.utility_for(gamma_risk, gamma_cost);
        if best.is_none_or(|(_, u)| c.utility > u) {
            best = Some((i, c.utility));
        }
    }
    best.map(|(i, _)| i)
}

pub fn trivial_trajectory(config: &RunConfig) -> Trajectory {
    let mut t = Trajectory::unscored(vec![TRIVIAL_SUB_GOAL.to_string()]).expect("non-empty");
    t.cost = score_cost(1, config.alpha_len, config.alpha_call, config.alpha_time);
    t.utility = t.utility_for(config.gamma_risk, config.gamma_cost);
    t
}

/// Short description of the evaluation data for the Planner.
pub fn input_digest(samples: &[Sample], space: &LabelSpace) -> String {
    let mut out = format!(
        "{} samples, {}-label classification over {}",
        samples.len(),
        space.mode(),
        space.options_list()
    );
    for s in samples.iter().take(3) {
        let text: String = s.focus_text.chars().take(160).collect();
        out.push_str(&format!("\nExample input: {text}"));
    }
    out
}

pub fn generate_candidates(ctx: &PlanningContext<'_>, caller: &mut AgentCaller<'_>) -> Result<Vec<Trajectory>> {
    let k = ctx.config.num_candidates;
    if k < 1 {
        return Err(Error::Argument("need at least one planner candidate".into()));
    }
    let template = ctx.templates.get(TemplateKind::Planner);
    let payload = planner_payload(ctx.goal, ctx.input_digest, &ctx.initial_prompt.text);
    (1..=k)
        .map(|occurrence| {
            let tag = CallTag::new(AgentRole::Planner, PLANNING_ITERATION, 0, CallKind::Plan, occurrence);
            let steps = caller
                .ask(&tag, render(template, &[], &payload)?, PLAN_REMINDER, parse_plan)
                .map_err(|e| Error::Planner(Box::new(e)))?;
            Trajectory::unscored(steps)
        })
        .collect()
}

/// Rate every sub-goal's emotional and safety risk and store the aggregate.
/// A rating that stays unparseable counts as maximal risk for that step.
pub fn score_risk(
    trajectory: &mut Trajectory,
    candidate: usize,
    ctx: &PlanningContext<'_>,
    caller: &mut AgentCaller<'_>,
) -> Result<f64> {
    let template = ctx.templates.get(TemplateKind::Risk);
    for sg in trajectory.sub_goals.iter_mut() {
        let tag = CallTag::new(AgentRole::Critic, PLANNING_ITERATION, sg.index, CallKind::Risk, candidate);
        let messages = render(template, &[], &risk_payload(ctx.goal, &sg.description))?;
        let ((emo, safety), fallback) = caller.ask_or(&tag, messages, SCORE_REMINDER, parse_risk, (1.0, 1.0))?;
        if fallback {
            trajectory
                .warnings
                .push(format!("risk rating for step {} unparseable; assumed maximal", sg.index));
        }
        sg.emo_risk = emo;
        sg.safety_risk = safety;
    }
    trajectory.risk = aggregate_risk(&trajectory.sub_goals);
    Ok(trajectory.risk)
}

pub fn rate_likelihood(
    trajectory: &mut Trajectory,
    candidate: usize,
    ctx: &PlanningContext<'_>,
    caller: &mut AgentCaller<'_>,
) -> Result<f64> {
    let tag = CallTag::new(AgentRole::Critic, PLANNING_ITERATION, 0, CallKind::Plausibility, candidate);
    let messages = render(
        ctx.templates.get(TemplateKind::Plausibility),
        &[],
        &plausibility_payload(ctx.goal, trajectory),
    )?;
    let (s, fallback) = caller.ask_or(&tag, messages, SCORE_REMINDER, parse_unit_score, PLAUSIBILITY_FALLBACK)?;
    if fallback {
        trajectory
            .warnings
            .push(format!("plausibility unparseable; assumed {PLAUSIBILITY_FALLBACK}"));
    }
    trajectory.likelihood_proxy = likelihood_proxy(s);
    Ok(trajectory.likelihood_proxy)
}

/// Sample `K` plans, score them, keep the argmax of the penalized utility.
pub struct RiskAwarePlanner;

impl PlanningStrategy for RiskAwarePlanner {
    fn name(&self) -> &str {
        "risk-aware"
    }

    fn plan(&self, ctx: &PlanningContext<'_>, caller: &mut AgentCaller<'_>) -> Result<PlanOutcome> {
        let cfg = ctx.config;
        let mut candidates = generate_candidates(ctx, caller)?;
        for (i, c) in candidates.iter_mut().enumerate() {
            let occurrence = i + 1;
            rate_likelihood(c, occurrence, ctx, caller).map_err(|e| Error::Planner(Box::new(e)))?;
            score_risk(c, occurrence, ctx, caller).map_err(|e| Error::Planner(Box::new(e)))?;
            c.cost = score_cost(c.len(), cfg.alpha_len, cfg.alpha_call, cfg.alpha_time);
        }
        let idx = select(&mut candidates, cfg.gamma_risk, cfg.gamma_cost).expect("at least one candidate");
        for (i, c) in candidates.iter().enumerate() {
            log::info!(
                "candidate {}: n={} proxy={:.4} risk={:.4} cost={:.4} utility={:.4}{}",
                i + 1,
                c.len(),
                c.likelihood_proxy,
                c.risk,
                c.cost,
                c.utility,
                if i == idx { " (selected)" } else { "" }
            );
        }
        Ok(PlanOutcome {
            selected: candidates[idx].clone(),
            selected_index: idx,
            candidates,
        })
    }
}

/// One step covering the whole prompt; no backend calls.
pub struct TrivialPlanner;

impl PlanningStrategy for TrivialPlanner {
    fn name(&self) -> &str {
        "trivial"
    }

    fn plan(&self, ctx: &PlanningContext<'_>, _caller: &mut AgentCaller<'_>) -> Result<PlanOutcome> {
        let t = trivial_trajectory(ctx.config);
        Ok(PlanOutcome {
            selected: t.clone(),
            selected_index: 0,
            candidates: vec![t],
        })
    }
}

pub struct PlannerRegistry {
    strategies: BTreeMap<String, Box<dyn PlanningStrategy>>,
}

impl Default for PlannerRegistry {
    fn default() -> Self {
        let mut reg = Self {
            strategies: BTreeMap::new(),
        };
        reg.register(Box::new(RiskAwarePlanner));
        reg.register(Box::new(TrivialPlanner));
        reg
    }
}

impl PlannerRegistry {
    pub fn register(&mut self, strategy: Box<dyn PlanningStrategy>) {
        self.strategies.insert(strategy.name().to_string(), strategy);
    }

    pub fn names(&self) -> Vec<&str> {
        self.strategies.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn PlanningStrategy> {
        self.strategies
            .get(name)
            .map(|s| s.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown planner {name:?} (known: {})", self.names().join(", "))))
    }

    /// Strategy for `config`, honouring the `no_planner` ablation.
    pub fn for_config(&self, config: &RunConfig) -> Result<&dyn PlanningStrategy> {
        if config.has(Ablation::NoPlanner) {
            self.get("trivial")
        } else {
            self.get(&config.planner)
        }
    }
}

//! Teacher / Critic / Student refinement.
//!
//! Each sub-goal of the trajectory is one step: the Teacher asks, the
//! Critic judges, and on rejection the Teacher revises exactly once before
//! the Student rewrites the prompt. A second rejection does not block the
//! step.

use crate::agents::{
    alignment_payload, critic_payload, history_digest, parse_free_text, parse_unit_score, parse_verdict, render,
    student_payload, teacher_payload, teacher_revision_payload, AgentCaller, TemplateKind, TemplateSet,
    SCORE_REMINDER, TEXT_REMINDER, VERDICT_REMINDER,
};
use crate::backend::{CallKind, CallTag};
use crate::domain::{
    Ablation, AgentRole, CriticVerdict, Prompt, PromptOrigin, RunConfig, SocraticTurn, SubGoal, Trajectory,
};
use crate::error::{Error, Result};

pub const ALIGNMENT_FALLBACK: f64 = 0.5;

pub struct StepContext<'a> {
    /// Outer iteration `t` (1-based).
    pub iteration: usize,
    /// Number of sub-goals in the trajectory.
    pub total_steps: usize,
    pub config: &'a RunConfig,
    pub templates: &'a TemplateSet,
}

fn judge(
    ctx: &StepContext<'_>,
    caller: &mut AgentCaller<'_>,
    sub_goal: &SubGoal,
    questions: &str,
    history: &str,
    occurrence: usize,
) -> Result<CriticVerdict> {
    if ctx.config.has(Ablation::NoCritic) {
        return Ok(CriticVerdict::approve());
    }
    let tag = CallTag::new(AgentRole::Critic, ctx.iteration, sub_goal.index, CallKind::Verdict, occurrence);
    let messages = render(
        ctx.templates.get(TemplateKind::Critic),
        &[],
        &critic_payload(&sub_goal.description, questions, history),
    )?;
    let suggestion = caller.ask(&tag, messages, VERDICT_REMINDER, parse_verdict)?;
    Ok(match suggestion {
        None => CriticVerdict::approve(),
        Some(s) => CriticVerdict::reject(s)?,
    })
}

/// Diagnostic score of how well the exchange addresses the sub-goal. Never
/// feeds back into the loop.
pub fn alignment_score(
    ctx: &StepContext<'_>,
    caller: &mut AgentCaller<'_>,
    turn: &SocraticTurn,
    sub_goal: &SubGoal,
) -> Result<(f64, bool)> {
    if ctx.config.has(Ablation::NoCritic) {
        return Ok((ALIGNMENT_FALLBACK, true));
    }
    let tag = CallTag::new(AgentRole::Critic, ctx.iteration, sub_goal.index, CallKind::Alignment, 1);
    let verdict = match turn.verdicts.last() {
        Some(v) if !v.approved => format!("[False] {}", v.suggestion.as_deref().unwrap_or("")),
        _ => "[True]".to_string(),
    };
    let messages = render(
        ctx.templates.get(TemplateKind::Alignment),
        &[],
        &alignment_payload(&sub_goal.description, &turn.question, &verdict),
    )?;
    caller.ask_or(&tag, messages, SCORE_REMINDER, parse_unit_score, ALIGNMENT_FALLBACK)
}

fn run_step_inner(
    ctx: &StepContext<'_>,
    caller: &mut AgentCaller<'_>,
    sub_goal: &SubGoal,
    prev: &Prompt,
    history: &[SocraticTurn],
) -> Result<SocraticTurn> {
    let step = sub_goal.index;
    let digest = history_digest(history);
    let teacher = ctx.templates.get(TemplateKind::Teacher);
    let base_payload = teacher_payload(&sub_goal.description, step, ctx.total_steps, &prev.text, &digest);

    let tag = CallTag::new(AgentRole::Teacher, ctx.iteration, step, CallKind::Question, 1);
    let first_question = caller.ask(&tag, render(teacher, &[], &base_payload)?, TEXT_REMINDER, |t| {
        parse_free_text(t, "question")
    })?;

    let mut verdicts = vec![judge(ctx, caller, sub_goal, &first_question, &digest, 1)?];
    let mut question = first_question.clone();
    let mut revisions = 0;
    if let Some(suggestion) = verdicts[0].suggestion.clone() {
        let tag = CallTag::new(AgentRole::Teacher, ctx.iteration, step, CallKind::Revise, 1);
        let payload = teacher_revision_payload(&base_payload, &first_question, &suggestion);
        question = caller.ask(&tag, render(teacher, &[], &payload)?, TEXT_REMINDER, |t| {
            parse_free_text(t, "question")
        })?;
        revisions = 1;
        verdicts.push(judge(ctx, caller, sub_goal, &question, &digest, 2)?);
    }

    let suggestion = verdicts.last().and_then(|v| v.suggestion.as_deref());
    let tag = CallTag::new(AgentRole::Student, ctx.iteration, step, CallKind::Rewrite, 1);
    let messages = render(
        ctx.templates.get(TemplateKind::Student),
        &[],
        &student_payload(&question, suggestion, &prev.text, &digest),
    )?;
    let text = caller.ask(&tag, messages, TEXT_REMINDER, |t| parse_free_text(t, "prompt"))?;

    let mut turn = SocraticTurn {
        step,
        sub_goal: sub_goal.description.clone(),
        question,
        initial_question: (revisions > 0).then_some(first_question),
        revisions,
        verdicts,
        result_prompt: Prompt::new(text, PromptOrigin::Refined, ctx.iteration, step)?,
        alignment: ALIGNMENT_FALLBACK,
        alignment_estimated: true,
    };
    let (score, estimated) = alignment_score(ctx, caller, &turn, sub_goal)?;
    turn.alignment = score;
    turn.alignment_estimated = estimated;
    Ok(turn)
}

/// One refinement step for `sub_goal`, starting from `prev`.
pub fn run_step(
    ctx: &StepContext<'_>,
    caller: &mut AgentCaller<'_>,
    sub_goal: &SubGoal,
    prev: &Prompt,
    history: &[SocraticTurn],
) -> Result<SocraticTurn> {
    run_step_inner(ctx, caller, sub_goal, prev, history).map_err(|e| Error::Step {
        step: sub_goal.index,
        source: Box::new(e),
    })
}

/// Run every sub-goal in order, chaining prompts. Under `no_socratic` the
/// start prompt comes back unchanged with no turns.
pub fn run_trajectory(
    trajectory: &Trajectory,
    start: &Prompt,
    iteration: usize,
    config: &RunConfig,
    templates: &TemplateSet,
    caller: &mut AgentCaller<'_>,
) -> Result<(Prompt, Vec<SocraticTurn>)> {
    if trajectory.is_empty() {
        return Err(Error::Argument("trajectory has no sub-goals".into()));
    }
    if config.has(Ablation::NoSocratic) {
        return Ok((start.clone(), Vec::new()));
    }
    let ctx = StepContext {
        iteration,
        total_steps: trajectory.len(),
        config,
        templates,
    };
    let mut turns: Vec<SocraticTurn> = Vec::with_capacity(trajectory.len());
    let mut current = start.clone();
    for sub_goal in &trajectory.sub_goals {
        let turn = run_step(&ctx, caller, sub_goal, &current, &turns)?;
        current = turn.result_prompt.clone();
        turns.push(turn);
    }
    Ok((current, turns))
}

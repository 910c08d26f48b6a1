//! Target prediction, reward computation, early stopping and the outer
//! optimization loop.
//!
//! The loop plans once, then for `t = 1..=max_iterations` refines the
//! previous iteration's prompt along the trajectory, scores it, and stops as
//! soon as the reward gain over the previous iteration is `<= delta`
//! (the reward before the first iteration counts as 0).

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::agents::{parse_target, target_messages, AgentCaller, TemplateSet};
use crate::backend::{Backend, CallKind, CallTag};
use crate::data::subsample;
use crate::domain::{
    AgentRole, IterationRecord, LabelSet, LabelSpace, Prompt, PromptOrigin, RunConfig, RunState,
    RunStatus, Sample, TokenUsage,
};
use crate::error::{Error, Result};
use crate::metrics::{self, ConfusionCounts, MetricReport};
use crate::planner::{input_digest, PlannerRegistry, PlanningContext};
use crate::socratic::run_trajectory;

pub const COT_TRIGGER: &str = "Let's think step by step.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub labels: LabelSet,
    pub raw: String,
    pub parsed: bool,
    #[serde(default)]
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub reward: f64,
    pub predictions: Vec<Prediction>,
    pub tokens: TokenUsage,
}

#[allow(clippy::too_many_arguments)]
pub fn predict(
    prompt: &Prompt,
    sample: &Sample,
    position: usize,
    iteration: usize,
    kind: CallKind,
    space: &LabelSpace,
    templates: &TemplateSet,
    backend: &dyn Backend,
    temperature: f64,
) -> Result<(Prediction, TokenUsage)> {
    let messages = target_messages(templates, &prompt.text, sample, space)?;
    let tag = CallTag::new(AgentRole::Target, iteration, position, kind, 1);
    let mut caller = AgentCaller::new(backend, temperature);
    let raw = caller.call(&tag, &messages)?;
    let parsed = parse_target(&raw, space);
    if !parsed.parsed {
        log::debug!("sample {}: unparseable target output {raw:?}", sample.id);
    }
    Ok((
        Prediction {
            sample_id: sample.id.clone(),
            labels: parsed.labels,
            raw,
            parsed: parsed.parsed,
            dropped: parsed.dropped,
        },
        caller.take_usage(),
    ))
}

/// Run `f(0..n)` on at most `workers` threads; results come back in index
/// order whatever the completion order.
fn parallel_map<T, F>(n: usize, workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(n) {
            s.spawn(|| loop {
                if failed.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                if r.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    let slots = slots.into_inner().expect("result slots poisoned");
    let mut out = Vec::with_capacity(n);
    for slot in slots {
        match slot {
            Some(Ok(v)) => out.push(v),
            Some(Err(e)) => return Err(e),
            // Skipped after another worker failed; that error is reported instead.
            None => continue,
        }
    }
    if out.len() != n {
        return Err(Error::Argument("evaluation aborted".into()));
    }
    Ok(out)
}

/// Score `prompt` on `samples` with the Target agent.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_prompt(
    prompt: &Prompt,
    samples: &[Sample],
    space: &LabelSpace,
    config: &RunConfig,
    templates: &TemplateSet,
    backend: &dyn Backend,
    iteration: usize,
    kind: CallKind,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Evaluation(Box::new(Error::Argument("no samples to evaluate".into()))));
    }
    let results = parallel_map(samples.len(), config.parallelism, |i| {
        predict(
            prompt,
            &samples[i],
            i + 1,
            iteration,
            kind,
            space,
            templates,
            backend,
            config.temperature,
        )
    })
    .map_err(|e| Error::Evaluation(Box::new(e)))?;

    let mut tokens = TokenUsage::default();
    let mut predictions = Vec::with_capacity(results.len());
    for (p, t) in results {
        tokens.merge(&t);
        predictions.push(p);
    }
    let preds: Vec<LabelSet> = predictions.iter().map(|p| p.labels.clone()).collect();
    let golds: Vec<LabelSet> = samples.iter().map(|s| s.gold.clone()).collect();
    let failures = predictions.iter().filter(|p| !p.parsed).count();
    let report = metrics::report(&preds, &golds, space, failures).map_err(|e| Error::Evaluation(Box::new(e)))?;
    Ok(Evaluation {
        reward: report.get(config.reward_metric),
        report,
        predictions,
        tokens,
    })
}

/// Offline reward: a base score plus the weight of every keyword found
/// (case-insensitively) in the prompt text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEnv {
    #[serde(default)]
    pub feature_weights: BTreeMap<String, f64>,
    pub base_score: f64,
}

impl SyntheticEnv {
    pub fn new(feature_weights: BTreeMap<String, f64>, base_score: f64) -> Result<Self> {
        let env = Self {
            feature_weights,
            base_score,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.base_score) {
            return Err(Error::Config("base_score must lie in [0,1]".into()));
        }
        if let Some((k, _)) = self.feature_weights.iter().find(|(_, w)| !unit(**w)) {
            return Err(Error::Config(format!("weight of {k:?} must lie in [0,1]")));
        }
        if self.feature_weights.keys().any(|k| k.trim().is_empty()) {
            return Err(Error::Config("keywords must be non-empty".into()));
        }
        let total = self.base_score + self.feature_weights.values().sum::<f64>();
        if total > 1.0 + 1e-12 {
            return Err(Error::Config(format!("base_score + weights = {total} exceeds 1")));
        }
        Ok(())
    }
}

pub fn synthetic_reward(prompt: &Prompt, env: &SyntheticEnv) -> f64 {
    let text = prompt.text.to_lowercase();
    let gained: f64 = env
        .feature_weights
        .iter()
        .filter(|(k, _)| text.contains(&k.to_lowercase()))
        .map(|(_, w)| *w)
        .sum();
    (env.base_score + gained).min(1.0)
}

/// A report whose every metric equals `value`; used where the reward does
/// not come from labelled predictions.
pub fn scalar_report(value: f64) -> MetricReport {
    MetricReport {
        macro_f1: value,
        micro_f1: value,
        emr: Some(value),
        pma: Some(value),
        counts: ConfusionCounts { per_label: Vec::new() },
        n_samples: 0,
        n_parse_failures: 0,
    }
}

/// Where iteration rewards come from.
pub trait RewardSource: Send + Sync {
    fn name(&self) -> &str;

    /// Description of the evaluation data for the Planner.
    fn digest(&self) -> String;

    fn evaluate(&self, prompt: &Prompt, iteration: usize, config: &RunConfig) -> Result<Evaluation>;

    /// One-off report on held-out data after the loop stops.
    fn final_report(&self, _prompt: &Prompt, _iteration: usize, _config: &RunConfig) -> Result<Option<Evaluation>> {
        Ok(None)
    }
}

/// Rewards from Target predictions on a fixed evaluation set.
pub struct TargetReward<'a> {
    backend: &'a dyn Backend,
    templates: &'a TemplateSet,
    space: LabelSpace,
    eval: Vec<Sample>,
    test: Option<Vec<Sample>>,
}

impl<'a> TargetReward<'a> {
    /// The evaluation set is subsampled once (when configured) and reused
    /// for every iteration.
    pub fn new(
        backend: &'a dyn Backend,
        templates: &'a TemplateSet,
        space: LabelSpace,
        eval: Vec<Sample>,
        test: Option<Vec<Sample>>,
        config: &RunConfig,
    ) -> Result<Self> {
        if eval.is_empty() {
            return Err(Error::Argument("evaluation split is empty".into()));
        }
        let eval = match config.eval_subset_size {
            Some(k) if k < eval.len() => subsample(&eval, k, config.seed)?,
            _ => eval,
        };
        Ok(Self {
            backend,
            templates,
            space,
            eval,
            test,
        })
    }

    pub fn eval_samples(&self) -> &[Sample] {
        &self.eval
    }
}

impl RewardSource for TargetReward<'_> {
    fn name(&self) -> &str {
        "target"
    }

    fn digest(&self) -> String {
        input_digest(&self.eval, &self.space)
    }

    fn evaluate(&self, prompt: &Prompt, iteration: usize, config: &RunConfig) -> Result<Evaluation> {
        evaluate_prompt(
            prompt,
            &self.eval,
            &self.space,
            config,
            self.templates,
            self.backend,
            iteration,
            CallKind::Predict,
        )
    }

    fn final_report(&self, prompt: &Prompt, iteration: usize, config: &RunConfig) -> Result<Option<Evaluation>> {
        match &self.test {
            Some(test) if !test.is_empty() => evaluate_prompt(
                prompt,
                test,
                &self.space,
                config,
                self.templates,
                self.backend,
                iteration,
                CallKind::Test,
            )
            .map(Some),
            _ => Ok(None),
        }
    }
}

pub struct SyntheticReward {
    pub env: SyntheticEnv,
}

impl RewardSource for SyntheticReward {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn digest(&self) -> String {
        "synthetic environment (no labelled samples)".into()
    }

    fn evaluate(&self, prompt: &Prompt, _iteration: usize, _config: &RunConfig) -> Result<Evaluation> {
        let reward = synthetic_reward(prompt, &self.env);
        Ok(Evaluation {
            report: scalar_report(reward),
            reward,
            predictions: Vec::new(),
            tokens: TokenUsage::default(),
        })
    }
}

/// Replays a fixed reward per iteration (dry runs of the stopping rule).
pub struct FixedRewards(pub Vec<f64>);

impl RewardSource for FixedRewards {
    fn name(&self) -> &str {
        "fixed"
    }

    fn digest(&self) -> String {
        "fixed reward sequence".into()
    }

    fn evaluate(&self, _prompt: &Prompt, iteration: usize, _config: &RunConfig) -> Result<Evaluation> {
        let reward = *self
            .0
            .get(iteration - 1)
            .ok_or_else(|| Error::Argument(format!("no fixed reward for iteration {iteration}")))?;
        Ok(Evaluation {
            report: scalar_report(reward),
            reward,
            predictions: Vec::new(),
            tokens: TokenUsage::default(),
        })
    }
}

/// Stop status after iteration `t`, or `None` to continue.
pub fn stop_decision(previous: f64, current: f64, delta: f64, t: usize, max_iterations: usize) -> Option<RunStatus> {
    if current - previous <= delta {
        Some(RunStatus::StoppedDelta)
    } else if t >= max_iterations {
        Some(RunStatus::StoppedMaxIter)
    } else {
        None
    }
}

/// Zero-shot or few-shot chain-of-thought variant of `p0`.
pub fn cot_prompt(p0: &Prompt, example: Option<&str>) -> Result<Prompt> {
    let text = match example {
        Some(ex) => format!("{COT_TRIGGER}\n\nExample:\n{}\n\n{}", ex.trim(), p0.text),
        None => format!("{COT_TRIGGER}\n\n{}", p0.text),
    };
    Prompt::new(text, PromptOrigin::Baseline, 0, 0)
}

/// Hooks for durable progress.
pub trait RunObserver {
    fn on_planned(&mut self, _state: &RunState) -> Result<()> {
        Ok(())
    }

    fn on_iteration(&mut self, _state: &RunState, _record: &IterationRecord) -> Result<()> {
        Ok(())
    }

    fn on_finish(&mut self, _state: &RunState) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl RunObserver for NoopObserver {}

/// A failed run together with whatever state it reached.
#[derive(Debug)]
pub struct RunFailure {
    pub state: Option<Box<RunState>>,
    pub error: Error,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        Self { state: None, error }
    }
}

pub struct Optimizer<'a> {
    pub config: &'a RunConfig,
    pub backend: &'a dyn Backend,
    pub templates: &'a TemplateSet,
    pub planners: &'a PlannerRegistry,
    pub reward: &'a dyn RewardSource,
}

impl Optimizer<'_> {
    /// Plan once and return the initial state.
    pub fn plan(&self, p0: &Prompt) -> Result<RunState> {
        self.config.validate()?;
        let strategy = self.planners.for_config(self.config)?;
        let digest = self.reward.digest();
        let ctx = PlanningContext {
            goal: &self.config.goal,
            input_digest: &digest,
            initial_prompt: p0,
            config: self.config,
            templates: self.templates,
        };
        let mut caller = AgentCaller::new(self.backend, self.config.temperature);
        let outcome = strategy.plan(&ctx, &mut caller)?;
        Ok(RunState::new(
            self.config.clone(),
            p0.clone(),
            outcome.selected,
            caller.take_usage(),
        ))
    }

    /// Plan, then iterate until a stopping condition.
    pub fn optimize(&self, p0: &Prompt, observer: &mut dyn RunObserver) -> Result<RunState, RunFailure> {
        let state = self.plan(p0)?;
        observer.on_planned(&state)?;
        self.continue_run(state, observer)
    }

    /// Continue from the last completed iteration of `state`.
    pub fn continue_run(&self, mut state: RunState, observer: &mut dyn RunObserver) -> Result<RunState, RunFailure> {
        if state.status.is_terminal() {
            return Err(Error::Terminated(state.status.to_string()).into());
        }
        state.status = RunStatus::Running;
        state.failure = None;
        match self.iterate(&mut state, observer) {
            Ok(()) => {
                if let Err(e) = self.finish(&mut state) {
                    return Err(self.fail(state, e, observer));
                }
                observer.on_finish(&state).map_err(|e| RunFailure {
                    state: Some(Box::new(state.clone())),
                    error: e,
                })?;
                Ok(state)
            }
            Err(e) => Err(self.fail(state, e, observer)),
        }
    }

    fn fail(&self, mut state: RunState, error: Error, observer: &mut dyn RunObserver) -> RunFailure {
        state.status = RunStatus::Failed;
        state.failure = Some(error.to_string());
        if let Err(e) = observer.on_finish(&state) {
            log::error!("could not persist failed state: {e}");
        }
        RunFailure {
            state: Some(Box::new(state)),
            error,
        }
    }

    fn iterate(&self, state: &mut RunState, observer: &mut dyn RunObserver) -> Result<()> {
        let cfg = self.config;
        let first = state.iterations.len() + 1;
        if first > cfg.max_iterations {
            state.status = RunStatus::StoppedMaxIter;
            return Ok(());
        }
        for t in first..=cfg.max_iterations {
            let start = state.returned_prompt.clone();
            let mut caller = AgentCaller::new(self.backend, cfg.temperature);
            let (final_prompt, turns) =
                run_trajectory(&state.trajectory, &start, t, cfg, self.templates, &mut caller)?;
            let eval = self.reward.evaluate(&final_prompt, t, cfg)?;
            let mut tokens = caller.take_usage();
            tokens.merge(&eval.tokens);

            let previous = state.last_reward();
            let record = IterationRecord {
                t,
                final_prompt,
                reward: eval.reward,
                metrics: eval.report,
                turns,
                tokens,
            };
            log::info!("iteration {t}: reward {:.4} (previous {:.4})", record.reward, previous);
            let reward = record.reward;
            state.push_iteration(record);
            observer.on_iteration(state, state.iterations.last().expect("just pushed"))?;
            if let Some(status) = stop_decision(previous, reward, cfg.delta, t, cfg.max_iterations) {
                state.status = status;
                return Ok(());
            }
        }
        Ok(())
    }

    fn finish(&self, state: &mut RunState) -> Result<()> {
        let t = state.iterations.len();
        if let Some(eval) = self.reward.final_report(&state.returned_prompt, t, self.config)? {
            state.test_tokens = eval.tokens;
            state.test_report = Some(eval.report);
        }
        Ok(())
    }
}

/// Evaluate a chain-of-thought baseline of `p0` without optimization.
pub fn evaluate_baseline(
    p0: &Prompt,
    example: Option<&str>,
    reward: &dyn RewardSource,
    config: &RunConfig,
) -> Result<(Prompt, Evaluation)> {
    let prompt = cot_prompt(p0, example)?;
    let eval = reward.evaluate(&prompt, 0, config)?;
    Ok((prompt, eval))
}

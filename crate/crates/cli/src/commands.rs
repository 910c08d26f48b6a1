use std::fs;
use std::path::Path;
use std::sync::Arc;

use apolo::agents::TemplateSet;
use apolo::backend::{Backend, BackendOptions, BackendRegistry, ScriptedBackend};
use apolo::data::{load_label_space, load_predictions, load_sample_file};
use apolo::domain::{LabelSet, Prompt, RunConfig, RunState};
use apolo::evaluator::{
    evaluate_baseline, Optimizer, RewardSource, RunFailure, SyntheticEnv, SyntheticReward, TargetReward,
};
use apolo::metrics::{self, MetricReport};
use apolo::persistence::{open_run, reopen_run, report_text, summarize};
use apolo::planner::PlannerRegistry;
use apolo::{Error, Result};

use crate::{
    BackendArgs, BackendKind, Baseline, EvaluateArgs, OptimizeArgs, ReportArgs, RunArgs, SimulateArgs,
};

/// A file's contents when `arg` names an existing file, else `arg` itself.
fn text_arg(arg: &str) -> Result<String> {
    let path = Path::new(arg);
    if path.is_file() {
        fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    } else {
        Ok(arg.to_string())
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{what} {}: {e}", path.display())))
}

pub fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => read_json(path, "config")?,
        None => RunConfig::default(),
    };
    macro_rules! overlay {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = args.$flag.clone() { cfg.$field = v; })*
        };
    }
    overlay!(
        seed => seed,
        delta => delta,
        max_iterations => max_iterations,
        candidates => num_candidates,
        gamma_risk => gamma_risk,
        gamma_cost => gamma_cost,
        temperature => temperature,
        parallelism => parallelism,
        goal => goal,
        planner => planner,
    );
    if let Some(k) = args.eval_subset {
        cfg.eval_subset_size = Some(k);
    }
    if let Some(m) = &args.metric {
        cfg.reward_metric = m.parse()?;
    }
    for a in &args.ablate {
        cfg.ablations.insert(a.parse()?);
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Setup {
    agents: Arc<dyn Backend>,
    templates: TemplateSet,
    env: Option<SyntheticEnv>,
}

fn setup(args: &BackendArgs, kind: BackendKind) -> Result<Setup> {
    let templates = match &args.templates {
        Some(dir) => TemplateSet::with_overrides(dir)?,
        None => TemplateSet::builtin(),
    };
    let registry = BackendRegistry::default();
    let options = BackendOptions {
        base_url: args.base_url.clone(),
        model: args.model.clone(),
        api_key: None,
        script: args.script.clone(),
        timeout: None,
    };
    let (agents, env) = match kind {
        BackendKind::Live => (registry.build("live", &options)?, None),
        BackendKind::Scripted => (registry.build("scripted", &options)?, None),
        BackendKind::Synthetic => {
            let path = args
                .env
                .as_ref()
                .ok_or_else(|| Error::Config("the synthetic backend needs --env".into()))?;
            let env: SyntheticEnv = read_json(path, "synthetic environment")?;
            env.validate()?;
            let agents: Arc<dyn Backend> = match &args.script {
                Some(_) => registry.build("scripted", &options)?,
                None => Arc::new(ScriptedBackend::new(Vec::new())?),
            };
            (agents, Some(env))
        }
    };
    Ok(Setup { agents, templates, env })
}

fn f4(x: f64) -> String {
    format!("{x:.4}")
}

fn print_report(report: &MetricReport, json: bool) -> Result<()> {
    if json {
        let text = serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?;
        println!("{text}");
        return Ok(());
    }
    println!("samples {}", report.n_samples);
    println!("parse_failures {}", report.n_parse_failures);
    println!("macro_f1 {}", f4(report.macro_f1));
    println!("micro_f1 {}", f4(report.micro_f1));
    if let Some(v) = report.emr {
        println!("emr {}", f4(v));
    }
    if let Some(v) = report.pma {
        println!("pma {}", f4(v));
    }
    Ok(())
}

fn print_state(state: &RunState) {
    println!("status: {}", state.status);
    println!("iterations: {}", state.iterations.len());
    let rewards: Vec<String> = state.rewards().into_iter().map(f4).collect();
    println!("rewards: {}", rewards.join(" "));
    if !state.iterations.is_empty() {
        println!("final reward: {}", f4(state.last_reward()));
    }
    if let Some(best) = state.best_reward() {
        println!("best reward: {}", f4(best));
    }
    if let Some(test) = &state.test_report {
        println!("test micro_f1: {}", f4(test.micro_f1));
        println!("test macro_f1: {}", f4(test.macro_f1));
    }
    println!("tokens: {}", state.total_tokens().total());
    if let Some(f) = &state.failure {
        println!("failure: {f}");
    }
    println!("returned prompt:\n{}", state.returned_prompt.text);
}

fn finish(outcome: std::result::Result<RunState, RunFailure>) -> Result<()> {
    match outcome {
        Ok(state) => {
            print_state(&state);
            Ok(())
        }
        Err(RunFailure { state, error }) => {
            if let Some(state) = state {
                print_state(&state);
            }
            Err(error)
        }
    }
}

pub fn optimize(a: OptimizeArgs) -> Result<()> {
    let resumed = a.resume.as_deref().map(|id| reopen_run(&a.root, id)).transpose()?;
    let cfg = match &resumed {
        Some((_, state)) => {
            if a.run.config.is_some() || a.run.seed.is_some() {
                log::warn!("resuming: run parameters come from the stored config");
            }
            state.config.clone()
        }
        None => build_config(&a.run)?,
    };
    let s = setup(&a.backend, a.backend.backend)?;
    let space = load_label_space(&a.labels)?;
    let eval = load_sample_file(&a.dataset, &space)?;
    let test = a.test.as_deref().map(|p| load_sample_file(p, &space)).transpose()?;
    let p0 = Prompt::initial(text_arg(&a.p0)?)?;

    let reward: Box<dyn RewardSource + '_> = match s.env.clone() {
        Some(env) => Box::new(SyntheticReward { env }),
        None => Box::new(TargetReward::new(s.agents.as_ref(), &s.templates, space, eval, test, &cfg)?),
    };

    if let Some(kind) = a.baseline {
        let example = match (kind, &a.example) {
            (Baseline::CotZero, _) => None,
            (Baseline::CotFew, Some(ex)) => Some(text_arg(ex)?),
            (Baseline::CotFew, None) => return Err(Error::Config("cot-few needs --example".into())),
        };
        let (prompt, eval) = evaluate_baseline(&p0, example.as_deref(), reward.as_ref(), &cfg)?;
        println!("baseline: {}", if kind == Baseline::CotZero { "cot-zero" } else { "cot-few" });
        println!("reward: {}", f4(eval.reward));
        print_report(&eval.report, false)?;
        println!("prompt:\n{}", prompt.text);
        return Ok(());
    }

    let planners = PlannerRegistry::default();
    let opt = Optimizer {
        config: &cfg,
        backend: s.agents.as_ref(),
        templates: &s.templates,
        planners: &planners,
        reward: reward.as_ref(),
    };
    match resumed {
        Some((mut handle, state)) => {
            println!("run: {}", handle.run_id());
            if state.status.is_terminal() {
                print_state(&state);
            }
            finish(opt.continue_run(state, &mut handle))
        }
        None => {
            let mut handle = open_run(&a.root, &cfg)?;
            println!("run: {}", handle.run_id());
            let outcome = opt.optimize(&p0, &mut handle);
            if let Err(RunFailure { state: None, error }) = &outcome {
                handle.write_failure(&p0, &error.to_string())?;
            }
            finish(outcome)
        }
    }
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let space = load_label_space(&a.labels)?;
    if let (Some(pred), Some(gold)) = (&a.pred, &a.gold) {
        let golds = load_sample_file(gold, &space)?;
        let mut preds = load_predictions(pred, &space)?;
        let mut missing = 0;
        let pred_sets: Vec<LabelSet> = golds
            .iter()
            .map(|s| {
                preds.remove(&s.id).unwrap_or_else(|| {
                    missing += 1;
                    LabelSet::new()
                })
            })
            .collect();
        if let Some(id) = preds.keys().next() {
            return Err(Error::Schema {
                id: id.clone(),
                message: "prediction has no gold sample".into(),
            });
        }
        if missing > 0 {
            log::warn!("{missing} gold samples have no prediction; scored as empty");
        }
        let gold_sets: Vec<LabelSet> = golds.iter().map(|s| s.gold.clone()).collect();
        let report = metrics::report(&pred_sets, &gold_sets, &space, missing)?;
        return print_report(&report, a.json);
    }

    let (Some(prompt), Some(dataset)) = (&a.prompt, &a.dataset) else {
        return Err(Error::Config("give --pred and --gold, or --prompt and --dataset".into()));
    };
    let cfg = build_config(&a.run)?;
    let s = setup(&a.backend, a.backend.backend)?;
    let samples = load_sample_file(dataset, &space)?;
    let prompt = Prompt::initial(text_arg(prompt)?)?;
    let reward: Box<dyn RewardSource + '_> = match s.env.clone() {
        Some(env) => Box::new(SyntheticReward { env }),
        None => Box::new(TargetReward::new(s.agents.as_ref(), &s.templates, space, samples, None, &cfg)?),
    };
    let eval = reward.evaluate(&prompt, 0, &cfg)?;
    if !a.json {
        println!("reward: {}", f4(eval.reward));
    }
    print_report(&eval.report, a.json)
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    if a.backend.env.is_none() {
        return Err(Error::Config("simulate needs --env".into()));
    }
    if a.backend.script.is_none() {
        return Err(Error::Config("simulate needs --script".into()));
    }
    let cfg = build_config(&a.run)?;
    let s = setup(&a.backend, BackendKind::Synthetic)?;
    let reward = SyntheticReward {
        env: s.env.clone().expect("synthetic setup has an env"),
    };
    let planners = PlannerRegistry::default();
    let opt = Optimizer {
        config: &cfg,
        backend: s.agents.as_ref(),
        templates: &s.templates,
        planners: &planners,
        reward: &reward,
    };
    let p0 = Prompt::initial(text_arg(&a.p0)?)?;
    let outcome = opt.optimize(&p0, &mut apolo::evaluator::NoopObserver);
    if let Ok(state) = &outcome {
        let rewards = state.rewards();
        let monotone = rewards.windows(2).all(|w| w[1] >= w[0]);
        println!("non-decreasing: {monotone}");
    }
    finish(outcome)
}

pub fn report(a: ReportArgs) -> Result<()> {
    if let Some(run) = &a.run {
        print!("{}", report_text(&a.root, run)?);
        let s = summarize(&a.root, run)?;
        if !s.status.is_terminal() {
            match &s.failure {
                Some(f) => println!("status: {} ({f})", s.status),
                None => println!("status: {}", s.status),
            }
        }
        return Ok(());
    }
    let mut w = csv::Writer::from_writer(std::io::stdout());
    let io = |e: csv::Error| Error::Io {
        path: "<stdout>".into(),
        source: std::io::Error::other(e),
    };
    w.write_record(["run_id", "status", "iterations", "tokens_total", "best_reward"])
        .map_err(io)?;
    for id in &a.runs {
        let s = summarize(&a.root, id)?;
        w.write_record([
            s.run_id,
            s.status.to_string(),
            s.iterations.to_string(),
            s.tokens_total.to_string(),
            s.best_reward.map(|r| r.to_string()).unwrap_or_default(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<stdout>".into(),
        source,
    })
}

//! Acceptance checks, one line of output per criterion. Runs without a live
//! backend.

mod common;

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use apolo::agents::{parse_plan, parse_target_multi, parse_target_single, parse_verdict, ParseError, TemplateSet};
use apolo::backend::{request_body, CallKind, ChatMessage, ScriptBuilder, ScriptedBackend};
use apolo::domain::{
    Ablation, AgentRole, LabelMode, LabelSet, LabelSpace, Prompt, RunConfig, RunState, RunStatus, Trajectory,
};
use apolo::evaluator::{
    stop_decision, FixedRewards, NoopObserver, Optimizer, SyntheticEnv, SyntheticReward, TargetReward,
};
use apolo::metrics;
use apolo::persistence::{open_run, read_report, resume};
use apolo::planner::{score_cost, select, PlannerRegistry, PlanningContext, PlanningStrategy, RiskAwarePlanner};
use apolo::socratic::run_trajectory;
use apolo::toy::{self, ToyScript};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{all_sequences, reference_stop, Instance};

type Outcome = Result<(), String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn set(space: &LabelSpace, xs: &[&str]) -> LabelSet {
    xs.iter().map(|x| space.resolve(x).unwrap().clone()).collect()
}

fn p0() -> Prompt {
    Prompt::initial("Identify the emotion of the current utterance.").unwrap()
}

fn within(start: Instant, limit: Duration) -> Outcome {
    let took = start.elapsed();
    ensure!(took < limit, "took {took:?}, limit {limit:?}");
    Ok(())
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240);
    for case in 0..200 {
        let inst = Instance::random(&mut rng);
        let space = inst.space();
        let (preds, golds) = (inst.pred_sets(), inst.gold_sets());
        let counts = metrics::confusion(&preds, &golds, &space).map_err(|e| e.to_string())?;
        let got = [
            metrics::macro_f1(&counts),
            metrics::micro_f1(&counts),
            metrics::emr(&preds, &golds).map_err(|e| e.to_string())?,
            metrics::pma(&preds, &golds).map_err(|e| e.to_string())?,
        ];
        let want = [inst.macro_f1(), inst.micro_f1(), inst.emr(), inst.pma()];
        for (name, (g, w)) in ["macro_f1", "micro_f1", "emr", "pma"].iter().zip(got.iter().zip(want)) {
            ensure!(close(*g, w, 1e-9), "case {case}: {name} = {g}, reference {w} ({inst:?})");
        }
    }
    within(start, Duration::from_secs(5))
}

fn worked_fixtures() -> Outcome {
    let space = LabelSpace::from_raw(&["a", "b"], LabelMode::Multi).unwrap();
    let preds = [set(&space, &["a"]), set(&space, &["b"]), set(&space, &["b"])];
    let golds = [set(&space, &["a"]), set(&space, &["a"]), set(&space, &["b"])];
    let r = metrics::report(&preds, &golds, &space, 0).map_err(|e| e.to_string())?;
    let third = 2.0 / 3.0;
    ensure!(close(r.micro_f1, third, 1e-12), "micro_f1 {}", r.micro_f1);
    ensure!(close(r.macro_f1, third, 1e-12), "macro_f1 {}", r.macro_f1);
    ensure!(r.emr.is_some_and(|v| close(v, third, 1e-12)), "emr {:?}", r.emr);
    ensure!(format!("{:.4}", r.micro_f1) == "0.6667", "rounding");

    let strict = metrics::pma(&[set(&space, &["a"])], &[set(&space, &["a", "b"])]).map_err(|e| e.to_string())?;
    ensure!(strict == 0.0, "Y={{a,b}}, Z={{a}} counted as a partial match");
    Ok(())
}

fn scored(proxy: f64, risk: f64, cost: f64) -> Trajectory {
    let mut t = Trajectory::unscored(vec!["x".into()]).unwrap();
    t.likelihood_proxy = proxy;
    t.risk = risk;
    t.cost = cost;
    t
}

fn three_candidate_script(risks: [&str; 3], plausibility: [f64; 3]) -> ScriptedBackend {
    let mut b = ScriptBuilder::new();
    for k in 1..=3 {
        b.at(AgentRole::Planner, 1, 0, CallKind::Plan, k, format!("Total steps: 2\nStep 1: c{k} first\nStep 2: c{k} second"))
            .at(AgentRole::Critic, 1, 0, CallKind::Plausibility, k, format!("Plausibility: {}", plausibility[k - 1]))
            .always(AgentRole::Critic, CallKind::Risk, k, risks[k - 1]);
    }
    b.build().unwrap()
}

fn plan_with(backend: &ScriptedBackend, gamma_risk: f64, gamma_cost: f64) -> Result<usize, String> {
    let config = RunConfig {
        num_candidates: 3,
        gamma_risk,
        gamma_cost,
        ..RunConfig::default()
    };
    let templates = TemplateSet::builtin();
    let prompt = p0();
    let ctx = PlanningContext {
        goal: &config.goal,
        input_digest: "toy data",
        initial_prompt: &prompt,
        config: &config,
        templates: &templates,
    };
    let mut caller = apolo::agents::AgentCaller::new(backend, config.temperature);
    let out = RiskAwarePlanner.plan(&ctx, &mut caller).map_err(|e| e.to_string())?;
    Ok(out.selected_index)
}

fn planner_arithmetic() -> Outcome {
    let third = 1.0 / 3.0;
    let cost = score_cost(2, third, third, third);
    ensure!(close(cost, 10.0 / 3.0, 1e-9), "cost {cost}");
    ensure!(format!("{cost:.4}") == "3.3333", "cost rounds to {cost:.4}");

    let mut two = vec![scored(0.8f64.ln(), 0.4, cost), scored(-0.7, 0.0, 0.0)];
    let idx = select(&mut two, 0.5, 0.05);
    ensure!(idx == Some(0), "selected {idx:?}");
    ensure!(close(two[0].utility, -0.5898, 1e-4), "utility {}", two[0].utility);

    let mut tied = vec![scored(-0.3, 0.2, 1.0), scored(-0.3, 0.2, 1.0), scored(-0.9, 0.0, 0.0)];
    ensure!(select(&mut tied, 0.5, 0.05) == Some(0), "tie not broken by lowest index");

    // Candidate 2 is the most plausible but risky; 3 is safe.
    let risky = "Emotional risk: 0.9\nSafety risk: 0.9";
    let safe = "Emotional risk: 0\nSafety risk: 0";
    let backend = three_candidate_script([safe, risky, safe], [0.5, 0.9, 0.7]);
    let collapsed = plan_with(&backend, 0.0, 0.0)?;
    ensure!(collapsed == 1, "gamma = 0 picked candidate {} instead of the most plausible", collapsed + 1);
    let penalized = plan_with(&backend, 0.5, 0.05)?;
    ensure!(penalized == 2, "risk-penalized choice was candidate {}", penalized + 1);
    Ok(())
}

fn grammar_goldens() -> Outcome {
    let plan = parse_plan("Total steps: 2\nStep 1: Clarify the label set.\nStep 2: Add an output format.");
    ensure!(
        plan == Ok(vec!["Clarify the label set.".into(), "Add an output format.".into()]),
        "valid plan: {plan:?}"
    );
    let mismatch = parse_plan("Total steps: 3\nStep 1: a\nStep 2: b");
    ensure!(
        mismatch == Err(ParseError::StepCount { declared: 3, found: 2 }),
        "count mismatch: {mismatch:?}"
    );
    ensure!(parse_plan("Total steps: 0") == Err(ParseError::ZeroSteps), "zero steps accepted");
    ensure!(parse_plan("Step 1: a") == Err(ParseError::MissingHeader), "headerless plan accepted");

    ensure!(parse_verdict("[True]") == Ok(None), "approval");
    let reject = parse_verdict("[False]\n[suggestion: ask about sarcasm]");
    ensure!(reject == Ok(Some("ask about sarcasm".into())), "rejection: {reject:?}");
    ensure!(parse_verdict("Looks good to me").is_err(), "out-of-grammar verdict accepted");
    ensure!(parse_verdict("[False]").is_err(), "rejection without suggestion accepted");

    let single = LabelSpace::from_raw(&["joy", "sadness", "anger", "neutral"], LabelMode::Single).unwrap();
    let word = parse_target_single("Sadness", &single);
    ensure!(word.parsed && word.labels == set(&single, &["sadness"]), "single word: {word:?}");
    let rescued = parse_target_single("I think the emotion here is anger.", &single);
    ensure!(rescued.parsed && rescued.labels == set(&single, &["anger"]), "fallback: {rescued:?}");
    let ambiguous = parse_target_single("joy or sadness", &single);
    ensure!(!ambiguous.parsed && ambiguous.labels.is_empty(), "ambiguity: {ambiguous:?}");

    let multi = LabelSpace::from_raw(&["sadness", "hopelessness", "loneliness", "anger"], LabelMode::Multi).unwrap();
    let listed = parse_target_multi("**Emotions**: [sadness, loneliness]\n**Reasoning**: isolation.", &multi);
    ensure!(
        listed.parsed && listed.labels == set(&multi, &["sadness", "loneliness"]),
        "emotions list: {listed:?}"
    );
    let fallback = parse_target_multi("Mostly hopelessness, with some anger.", &multi);
    ensure!(
        fallback.parsed && fallback.labels == set(&multi, &["hopelessness", "anger"]),
        "multi fallback: {fallback:?}"
    );
    let none = parse_target_multi("**Emotions**: [calm]", &multi);
    ensure!(!none.parsed && none.dropped == 1, "unknown-only list: {none:?}");
    Ok(())
}

fn socratic_contract() -> Outcome {
    let n = 3;
    let trajectory = Trajectory::unscored((1..=n).map(|i| format!("sub-goal {i}")).collect()).unwrap();
    let templates = TemplateSet::builtin();
    let mut b = ScriptBuilder::new();
    b.always(AgentRole::Teacher, CallKind::Question, 1, "Which cue decides the label?")
        .always(AgentRole::Teacher, CallKind::Revise, 1, "Which words decide the label, and why?")
        .always(AgentRole::Critic, CallKind::Verdict, 1, "[True]")
        .at(AgentRole::Critic, 1, 1, CallKind::Verdict, 1, "[False]\n[suggestion: name the cue words]")
        .at(AgentRole::Critic, 1, 1, CallKind::Verdict, 2, "[True]")
        .always(AgentRole::Critic, CallKind::Alignment, 1, "Alignment: 0.9");
    for i in 1..=n {
        b.at(AgentRole::Student, 1, i, CallKind::Rewrite, 1, format!("prompt after step {i}"));
    }
    let backend = b.build().unwrap().recording();
    let config = RunConfig::default();
    let mut caller = apolo::agents::AgentCaller::new(&backend, 0.6);
    let (last, turns) =
        run_trajectory(&trajectory, &p0(), 1, &config, &templates, &mut caller).map_err(|e| e.to_string())?;
    let revisions: usize = turns.iter().map(|t| t.revisions).sum();
    ensure!(revisions == 1, "{revisions} revisions");
    let teacher = backend.count_calls(AgentRole::Teacher, None);
    ensure!(teacher == n + 1, "{teacher} Teacher calls");
    let verdicts = backend.count_calls(AgentRole::Critic, Some(CallKind::Verdict));
    ensure!(verdicts == n + 1, "{verdicts} Critic verdict calls");
    let alignment = backend.count_calls(AgentRole::Critic, Some(CallKind::Alignment));
    ensure!(alignment == n, "{alignment} alignment rater calls");
    let student = backend.count_calls(AgentRole::Student, None);
    ensure!(student == n, "{student} Student calls");
    ensure!(last.text == format!("prompt after step {n}"), "final prompt {:?}", last.text);

    let no_critic = RunConfig {
        ablations: [Ablation::NoCritic].into(),
        ..RunConfig::default()
    };
    let backend = b.build().unwrap().recording();
    let mut caller = apolo::agents::AgentCaller::new(&backend, 0.6);
    run_trajectory(&trajectory, &p0(), 1, &no_critic, &templates, &mut caller).map_err(|e| e.to_string())?;
    let critic = backend.count_calls(AgentRole::Critic, None);
    ensure!(critic == 0, "{critic} Critic calls under no_critic");

    let no_socratic = RunConfig {
        ablations: [Ablation::NoSocratic].into(),
        ..RunConfig::default()
    };
    let backend = b.build().unwrap().recording();
    let mut caller = apolo::agents::AgentCaller::new(&backend, 0.6);
    let (same, turns) =
        run_trajectory(&trajectory, &p0(), 1, &no_socratic, &templates, &mut caller).map_err(|e| e.to_string())?;
    ensure!(same == p0() && turns.is_empty(), "no_socratic changed the prompt");
    ensure!(backend.calls().is_empty(), "no_socratic made backend calls");
    Ok(())
}

fn run_fixed(rewards: &[f64], max_iterations: usize) -> Result<RunState, String> {
    let config = RunConfig {
        max_iterations,
        ablations: [Ablation::NoPlanner, Ablation::NoSocratic].into(),
        ..RunConfig::default()
    };
    let backend = ScriptBuilder::new().build().unwrap();
    let templates = TemplateSet::builtin();
    let planners = PlannerRegistry::default();
    let reward = FixedRewards(rewards.to_vec());
    let opt = Optimizer {
        config: &config,
        backend: &backend,
        templates: &templates,
        planners: &planners,
        reward: &reward,
    };
    opt.optimize(&p0(), &mut NoopObserver).map_err(|e| e.to_string())
}

fn early_stopping() -> Outcome {
    let state = run_fixed(&[0.50, 0.60, 0.605], 10)?;
    ensure!(
        state.iterations.len() == 3 && state.status == RunStatus::StoppedDelta,
        "halted after {} with {}",
        state.iterations.len(),
        state.status
    );
    let rising: Vec<f64> = (1..=10).map(|t| 0.05 * t as f64).collect();
    let state = run_fixed(&rising, 10)?;
    ensure!(
        state.iterations.len() == 10 && state.status == RunStatus::StoppedMaxIter,
        "rising sequence stopped after {} with {}",
        state.iterations.len(),
        state.status
    );

    let sequences = all_sequences(&[0.0, 0.005, 0.02, 0.1], 5);
    ensure!(sequences.len() == 4 + 16 + 64 + 256 + 1024, "enumerated {}", sequences.len());
    for seq in &sequences {
        let want = reference_stop(seq, 0.01, seq.len());
        let state = run_fixed(seq, seq.len())?;
        let got = (state.iterations.len(), state.status);
        ensure!(got == want, "{seq:?}: loop gave {got:?}, reference {want:?}");
        let mut prev = 0.0;
        for (i, &r) in seq.iter().enumerate().take(want.0) {
            let expected = if i + 1 == want.0 { Some(want.1) } else { None };
            ensure!(
                stop_decision(prev, r, 0.01, i + 1, seq.len()) == expected,
                "{seq:?}: stop rule disagrees at t={}",
                i + 1
            );
            prev = r;
        }
    }
    Ok(())
}

fn synthetic_monotone() -> Outcome {
    let start = Instant::now();
    let keywords: Vec<String> = ["tone", "context", "intensity", "negation", "sarcasm", "stakes"]
        .map(String::from)
        .to_vec();
    let script = ToyScript {
        correct: vec![0; keywords.len()],
        keywords: keywords.clone(),
        ..ToyScript::default()
    };
    let backend = script.build().unwrap();
    let env = SyntheticEnv::new(keywords.iter().map(|k| (k.clone(), 0.1)).collect::<BTreeMap<_, _>>(), 0.2)
        .map_err(|e| e.to_string())?;
    let reward = SyntheticReward { env };
    let config = RunConfig {
        num_candidates: 2,
        max_iterations: keywords.len(),
        gamma_risk: 0.0,
        gamma_cost: 0.0,
        ..RunConfig::default()
    };
    let templates = TemplateSet::builtin();
    let planners = PlannerRegistry::default();
    let opt = Optimizer {
        config: &config,
        backend: &backend,
        templates: &templates,
        planners: &planners,
        reward: &reward,
    };
    let state = opt.optimize(&p0(), &mut NoopObserver).map_err(|e| e.to_string())?;
    let rewards = state.rewards();
    ensure!(rewards.len() >= 5, "only {} iterations: {rewards:?}", rewards.len());
    ensure!(rewards.windows(2).all(|w| w[1] >= w[0]), "rewards decreased: {rewards:?}");
    within(start, Duration::from_secs(1))
}

fn toy_run(parallelism: usize) -> Result<(String, String), String> {
    let backend = ToyScript {
        reject_first: true,
        ..ToyScript::default()
    }
    .build()
    .unwrap()
    .recording();
    let config = RunConfig {
        num_candidates: 2,
        max_iterations: 3,
        parallelism,
        ..RunConfig::default()
    };
    let templates = TemplateSet::builtin();
    let planners = PlannerRegistry::default();
    let reward = TargetReward::new(&backend, &templates, toy::label_space(), toy::samples(10), None, &config)
        .map_err(|e| e.to_string())?;
    let opt = Optimizer {
        config: &config,
        backend: &backend,
        templates: &templates,
        planners: &planners,
        reward: &reward,
    };
    let state = opt.optimize(&p0(), &mut NoopObserver).map_err(|e| e.to_string())?;
    let turns: Vec<_> = state.iterations.iter().map(|r| &r.turns).collect();
    Ok((serde_json::to_string(&turns).unwrap(), format!("{:?}", backend.calls())))
}

fn wire_and_determinism() -> Outcome {
    let golden = include_str!("golden/request_body.json");
    let messages = [
        ChatMessage::system("You are the Critic."),
        ChatMessage::user("Sub-goal: \"clarify the options\"\nQuestions: Is neutral ever right?"),
    ];
    let body = request_body("gpt-4o-mini", &messages, 0.6);
    ensure!(body == golden, "request body differs from golden:\n{body}\n{golden}");

    let reference = toy_run(1)?;
    for parallelism in [1, 4] {
        for repeat in 0..3 {
            let again = toy_run(parallelism)?;
            ensure!(again.0 == reference.0, "transcripts differ (parallelism {parallelism}, run {repeat})");
            ensure!(again.1 == reference.1, "call log differs (parallelism {parallelism}, run {repeat})");
        }
    }
    Ok(())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let backend = ToyScript::default().build().unwrap();
    let config = RunConfig {
        num_candidates: 2,
        max_iterations: 3,
        ..RunConfig::default()
    };
    let templates = TemplateSet::builtin();
    let planners = PlannerRegistry::default();
    let reward = TargetReward::new(
        &backend,
        &templates,
        toy::label_space(),
        toy::samples(10),
        Some(toy::samples(10)),
        &config,
    )
    .map_err(|e| e.to_string())?;
    let opt = Optimizer {
        config: &config,
        backend: &backend,
        templates: &templates,
        planners: &planners,
        reward: &reward,
    };
    let mut handle = open_run(tmp.path(), &config).map_err(|e| e.to_string())?;
    let state = opt.optimize(&p0(), &mut handle).map_err(|e| e.to_string())?;
    ensure!(state.trajectory.len() == 2, "trajectory has {} steps", state.trajectory.len());
    ensure!(state.iterations.len() == 3, "{} iterations", state.iterations.len());

    let dir = handle.dir();
    for f in ["config.json", "trajectory.json", "report.csv", "tokens.json"] {
        ensure!(dir.join(f).is_file(), "missing {f}");
    }
    for t in 1..=3 {
        for f in ["prompt.txt", "metrics.json", "turns.json"] {
            ensure!(dir.join(format!("iterations/{t}/{f}")).is_file(), "missing iterations/{t}/{f}");
        }
    }
    let rows = read_report(dir).map_err(|e| e.to_string())?;
    ensure!(rows.len() == 3, "report.csv has {} rows", rows.len());
    let back = resume(tmp.path(), handle.run_id()).map_err(|e| e.to_string())?;
    ensure!(back == state, "resumed state differs");
    within(start, Duration::from_secs(10))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("metric oracle equivalence", metric_oracle),
        ("worked metric fixtures", worked_fixtures),
        ("planner arithmetic and selection", planner_arithmetic),
        ("grammar parser goldens", grammar_goldens),
        ("socratic call contract", socratic_contract),
        ("early stopping", early_stopping),
        ("synthetic monotone improvement", synthetic_monotone),
        ("wire format and transcript determinism", wire_and_determinism),
        ("end-to-end scripted run", end_to_end),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(()) => println!("PASS  {name} ({:.0?})", start.elapsed()),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: {e}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

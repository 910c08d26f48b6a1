//! Run artifacts on disk.
//!
//! ```text
//! runs/<run-id>/
//!   config.json        effective configuration
//!   trajectory.json    selected plan
//!   status.json        status, failure, initial prompt, test report
//!   tokens.json        token usage by phase
//!   report.csv         one row per completed iteration
//!   iterations/<t>/    prompt.txt, metrics.json, turns.json
//! ```
//!
//! Iteration directories and report rows are append-only. Resume rebuilds the
//! state from these files and refuses to accept gaps or a report that
//! disagrees with the iteration directories.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::domain::{
    IterationRecord, Prompt, PromptOrigin, RunConfig, RunState, RunStatus, SocraticTurn, TokenUsage, Trajectory,
};
use crate::error::{Error, Result};
use crate::evaluator::RunObserver;
use crate::metrics::MetricReport;

pub const RUNS_DIR: &str = "runs";
pub const CONFIG_FILE: &str = "config.json";
pub const TRAJECTORY_FILE: &str = "trajectory.json";
pub const STATUS_FILE: &str = "status.json";
pub const TOKENS_FILE: &str = "tokens.json";
pub const REPORT_FILE: &str = "report.csv";
pub const ITERATIONS_DIR: &str = "iterations";
pub const PROMPT_FILE: &str = "prompt.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const TURNS_FILE: &str = "turns.json";

pub const REPORT_HEADER: [&str; 7] = ["t", "reward", "macro_f1", "micro_f1", "emr", "pma", "tokens_total"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub t: usize,
    pub reward: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub emr: Option<f64>,
    pub pma: Option<f64>,
    /// Cumulative tokens (planning included) up to and including `t`.
    pub tokens_total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IterationMeta {
    t: usize,
    reward: f64,
    prompt_origin: PromptOrigin,
    prompt_iteration: usize,
    prompt_step: usize,
    metrics: MetricReport,
    tokens: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StatusFile {
    status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    failure: Option<String>,
    initial_prompt: Prompt,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_report: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TokensFile {
    planning: TokenUsage,
    iterations: Vec<TokenUsage>,
    test: TokenUsage,
    total: TokenUsage,
    total_tokens: u64,
}

fn pretty<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    Ok(text.into_bytes())
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, pretty(value, path)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// Write `contents` to a file that must not exist yet.
fn create_new(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

pub fn runs_dir(root: &Path) -> PathBuf {
    root.join(RUNS_DIR)
}

pub fn run_dir(root: &Path, run_id: &str) -> PathBuf {
    runs_dir(root).join(run_id)
}

/// Writer for one run directory.
#[derive(Debug)]
pub struct RunHandle {
    run_id: String,
    dir: PathBuf,
    rows: usize,
}

/// Create `runs/<timestamp>-s<seed>` under `root` and record the config.
/// A numeric suffix disambiguates runs opened in the same second.
pub fn open_run(root: &Path, config: &RunConfig) -> Result<RunHandle> {
    let runs = runs_dir(root);
    fs::create_dir_all(&runs).map_err(|e| Error::io(&runs, e))?;
    let stem = format!("{}-s{}", chrono::Local::now().format("%Y%m%dT%H%M%S"), config.seed);
    let mut n = 1;
    let (run_id, dir) = loop {
        let id = if n == 1 { stem.clone() } else { format!("{stem}-{n}") };
        let dir = runs.join(&id);
        match fs::create_dir(&dir) {
            Ok(()) => break (id, dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    };
    write_json(&dir.join(CONFIG_FILE), config)?;
    let report = dir.join(REPORT_FILE);
    create_new(&report, (REPORT_HEADER.join(",") + "\n").as_bytes())?;
    fs::create_dir(dir.join(ITERATIONS_DIR)).map_err(|e| Error::io(dir.join(ITERATIONS_DIR), e))?;
    log::info!("opened run {run_id}");
    Ok(RunHandle { run_id, dir, rows: 0 })
}

/// Reopen an existing run for further iterations.
pub fn reopen_run(root: &Path, run_id: &str) -> Result<(RunHandle, RunState)> {
    let state = resume(root, run_id)?;
    let handle = RunHandle {
        run_id: run_id.to_string(),
        dir: run_dir(root, run_id),
        rows: state.iterations.len(),
    };
    Ok((handle, state))
}

impl RunHandle {
    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_trajectory(&self, trajectory: &Trajectory) -> Result<()> {
        write_json(&self.dir.join(TRAJECTORY_FILE), trajectory)
    }

    /// Rewrite the mutable summaries (status and tokens).
    pub fn write_status(&self, state: &RunState) -> Result<()> {
        write_json(
            &self.dir.join(STATUS_FILE),
            &StatusFile {
                status: state.status,
                failure: state.failure.clone(),
                initial_prompt: state.initial_prompt.clone(),
                test_report: state.test_report.clone(),
            },
        )?;
        write_json(
            &self.dir.join(TOKENS_FILE),
            &TokensFile {
                planning: state.planning_tokens.clone(),
                iterations: state.iterations.iter().map(|r| r.tokens.clone()).collect(),
                test: state.test_tokens.clone(),
                total: state.total_tokens(),
                total_tokens: state.total_tokens().total(),
            },
        )
    }

    /// Record a failure that happened before any state existed.
    pub fn write_failure(&self, initial_prompt: &Prompt, message: &str) -> Result<()> {
        write_json(
            &self.dir.join(STATUS_FILE),
            &StatusFile {
                status: RunStatus::Failed,
                failure: Some(message.to_string()),
                initial_prompt: initial_prompt.clone(),
                test_report: None,
            },
        )
    }

    /// Persist iteration `record.t`; `tokens_total` is the cumulative token
    /// count written to the report row.
    pub fn record_iteration(&mut self, record: &IterationRecord, tokens_total: u64) -> Result<()> {
        if record.t != self.rows + 1 {
            return Err(Error::Argument(format!(
                "iteration {} out of order: {} already recorded",
                record.t, self.rows
            )));
        }
        let it_dir = self.dir.join(ITERATIONS_DIR).join(record.t.to_string());
        fs::create_dir(&it_dir).map_err(|e| match e.kind() {
            std::io::ErrorKind::AlreadyExists => {
                Error::Argument(format!("iteration {} already recorded", record.t))
            }
            _ => Error::io(&it_dir, e),
        })?;
        create_new(&it_dir.join(PROMPT_FILE), record.final_prompt.text.as_bytes())?;
        let meta = IterationMeta {
            t: record.t,
            reward: record.reward,
            prompt_origin: record.final_prompt.origin,
            prompt_iteration: record.final_prompt.iteration,
            prompt_step: record.final_prompt.step,
            metrics: record.metrics.clone(),
            tokens: record.tokens.clone(),
        };
        let metrics_path = it_dir.join(METRICS_FILE);
        create_new(&metrics_path, &pretty(&meta, &metrics_path)?)?;
        let turns_path = it_dir.join(TURNS_FILE);
        create_new(&turns_path, &pretty(&record.turns, &turns_path)?)?;

        let report = self.dir.join(REPORT_FILE);
        let file = OpenOptions::new()
            .append(true)
            .open(&report)
            .map_err(|e| Error::io(&report, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        w.serialize(ReportRow {
            t: record.t,
            reward: record.reward,
            macro_f1: record.metrics.macro_f1,
            micro_f1: record.metrics.micro_f1,
            emr: record.metrics.emr,
            pma: record.metrics.pma,
            tokens_total,
        })
        .and_then(|()| w.flush().map_err(Into::into))
        .map_err(|e| Error::io(&report, std::io::Error::other(e)))?;
        self.rows += 1;
        Ok(())
    }

    /// Write a complete state into this (fresh) run directory.
    pub fn write_state(&mut self, state: &RunState) -> Result<()> {
        self.write_trajectory(&state.trajectory)?;
        let mut running = state.planning_tokens.clone();
        for record in &state.iterations {
            running.merge(&record.tokens);
            self.record_iteration(record, running.total())?;
        }
        self.write_status(state)
    }
}

impl RunObserver for RunHandle {
    fn on_planned(&mut self, state: &RunState) -> Result<()> {
        self.write_trajectory(&state.trajectory)?;
        self.write_status(state)
    }

    fn on_iteration(&mut self, state: &RunState, record: &IterationRecord) -> Result<()> {
        self.record_iteration(record, state.total_tokens().total() - state.test_tokens.total())?;
        self.write_status(state)
    }

    fn on_finish(&mut self, state: &RunState) -> Result<()> {
        self.write_status(state)
    }
}

pub fn read_report(dir: &Path) -> Result<Vec<ReportRow>> {
    let path = dir.join(REPORT_FILE);
    let mut r = csv::Reader::from_path(&path).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::io(&path, std::io::Error::other(e)))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != REPORT_HEADER {
        return Err(Error::Parse {
            path,
            line: 1,
            message: format!("unexpected header {header:?}"),
        });
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 2,
                message: e.to_string(),
            })
        })
        .collect()
}

fn iteration_numbers(dir: &Path) -> Result<Vec<usize>> {
    let it_root = dir.join(ITERATIONS_DIR);
    let mut ts = Vec::new();
    for entry in fs::read_dir(&it_root).map_err(|e| Error::io(&it_root, e))? {
        let entry = entry.map_err(|e| Error::io(&it_root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        match name.parse::<usize>() {
            Ok(t) if t >= 1 => ts.push(t),
            _ => {
                return Err(Error::Resume {
                    iteration: 0,
                    message: format!("unexpected entry {name:?} in {ITERATIONS_DIR}/"),
                })
            }
        }
    }
    ts.sort_unstable();
    Ok(ts)
}

fn load_iteration(dir: &Path, t: usize) -> Result<IterationRecord> {
    let bad = |message: String| Error::Resume { iteration: t, message };
    let it_dir = dir.join(ITERATIONS_DIR).join(t.to_string());
    let text = fs::read_to_string(it_dir.join(PROMPT_FILE)).map_err(|e| bad(format!("{PROMPT_FILE}: {e}")))?;
    let meta: IterationMeta = read_json(&it_dir.join(METRICS_FILE)).map_err(|e| bad(format!("{METRICS_FILE}: {e}")))?;
    let turns: Vec<SocraticTurn> = read_json(&it_dir.join(TURNS_FILE)).map_err(|e| bad(format!("{TURNS_FILE}: {e}")))?;
    if meta.t != t {
        return Err(bad(format!("{METRICS_FILE} records t = {}", meta.t)));
    }
    let final_prompt = Prompt::new(text, meta.prompt_origin, meta.prompt_iteration, meta.prompt_step)
        .map_err(|e| bad(e.to_string()))?;
    Ok(IterationRecord {
        t,
        final_prompt,
        reward: meta.reward,
        metrics: meta.metrics,
        turns,
        tokens: meta.tokens,
    })
}

/// Rebuild the state of run `run_id`.
pub fn resume(root: &Path, run_id: &str) -> Result<RunState> {
    let dir = run_dir(root, run_id);
    if !dir.is_dir() {
        return Err(Error::Argument(format!("unknown run {run_id:?}")));
    }
    let config: RunConfig = read_json(&dir.join(CONFIG_FILE))?;
    let status: StatusFile = read_json(&dir.join(STATUS_FILE))?;
    let trajectory_path = dir.join(TRAJECTORY_FILE);
    if !trajectory_path.exists() {
        return Err(Error::Resume {
            iteration: 0,
            message: "no trajectory recorded; planning did not complete".into(),
        });
    }
    let trajectory: Trajectory = read_json(&trajectory_path)?;
    let tokens: TokensFile = read_json(&dir.join(TOKENS_FILE))?;

    let ts = iteration_numbers(&dir)?;
    let rows = read_report(&dir)?;
    let mut state = RunState::new(config, status.initial_prompt, trajectory, tokens.planning);
    for (i, &t) in ts.iter().enumerate() {
        if t != i + 1 {
            return Err(Error::Resume {
                iteration: i + 1,
                message: "iteration directory missing".into(),
            });
        }
        let record = load_iteration(&dir, t)?;
        match rows.get(i) {
            Some(row) if row.t == t && row.reward == record.reward => {}
            Some(row) => {
                return Err(Error::Resume {
                    iteration: t,
                    message: format!("{REPORT_FILE} row {} disagrees with {METRICS_FILE}", row.t),
                })
            }
            None => {
                return Err(Error::Resume {
                    iteration: t,
                    message: format!("no {REPORT_FILE} row"),
                })
            }
        }
        state.push_iteration(record);
    }
    if rows.len() > ts.len() {
        return Err(Error::Resume {
            iteration: ts.len() + 1,
            message: format!("{REPORT_FILE} row without iteration directory"),
        });
    }
    state.status = status.status;
    state.failure = status.failure;
    state.test_report = status.test_report;
    state.test_tokens = tokens.test;
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub status: RunStatus,
    pub iterations: usize,
    pub tokens_total: u64,
    pub best_reward: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Summarize a run from its report and status files; works for failed runs
/// that cannot be resumed.
pub fn summarize(root: &Path, run_id: &str) -> Result<RunSummary> {
    let dir = run_dir(root, run_id);
    if !dir.is_dir() {
        return Err(Error::Argument(format!("unknown run {run_id:?}")));
    }
    let rows = read_report(&dir)?;
    let status_path = dir.join(STATUS_FILE);
    let (status, failure) = if status_path.exists() {
        let s: StatusFile = read_json(&status_path)?;
        (s.status, s.failure)
    } else {
        (RunStatus::Running, None)
    };
    let tokens_path = dir.join(TOKENS_FILE);
    let tokens_total = if tokens_path.exists() {
        read_json::<TokensFile>(&tokens_path)?.total_tokens
    } else {
        rows.last().map_or(0, |r| r.tokens_total)
    };
    let best_reward = rows.iter().map(|r| r.reward).fold(None, |acc: Option<f64>, r| {
        Some(acc.map_or(r, |a| a.max(r)))
    });
    Ok(RunSummary {
        run_id: run_id.to_string(),
        status,
        iterations: rows.len(),
        tokens_total,
        best_reward,
        failure,
    })
}

/// Raw `report.csv` text of a run.
pub fn report_text(root: &Path, run_id: &str) -> Result<String> {
    let path = run_dir(root, run_id).join(REPORT_FILE);
    if !path.exists() {
        return Err(Error::Argument(format!("unknown run {run_id:?}")));
    }
    fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

//! Command-line front end.
//!
//! Exit codes: 0 success, 1 task failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{Config, CONFIG_ENV};
use crate::orchestrator::{RefinementTrace, Verdict};
use crate::planner::TaskSpec;
use crate::protocol::{log_to_jsonl, now_ms, Body, Envelope, IdGen, TaskRequest, TaskState, TcpLink};
use crate::scenario::{Scenario, BUNDLED};
use crate::tiers::{cloud_serve, device_serve, run_task, serve_listener, submit, Edge, Peer, TaskTraceFile};
use crate::world::World;

pub const EXIT_OK: i32 = 0;
pub const EXIT_TASK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Default output directory when the config names none.
pub const DEFAULT_OUT_DIR: &str = "hiertask-out";

#[derive(Debug, Parser)]
#[command(name = "hiertask", version, about = "Cloud-edge-device task decomposition for robot fleets")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Print a machine-readable report.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a bundled scenario with all tiers in this process.
    RunScenario {
        name: Option<String>,
        #[arg(long = "scenario", conflicts_with = "name")]
        scenario: Option<String>,
    },
    /// Run one tier as a long-lived TCP service.
    Serve {
        #[arg(long, value_enum)]
        tier: TierName,
    },
    /// Send a task to a running edge and wait for the result.
    Submit {
        task: String,
        #[arg(long)]
        edge_addr: Option<String>,
        #[arg(long)]
        task_id: Option<String>,
    },
    /// Pretty-print a refinement trace file.
    Trace { path: PathBuf },
    /// List bundled scenarios.
    Scenarios,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TierName {
    Cloud,
    Edge,
    Device,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task_id: String,
    pub verdict: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<Verdict>,
    pub iterations: u32,
    pub instruction_counts: BTreeMap<String, usize>,
    pub wall_time_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation_log_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_log_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl RunReport {
    pub fn from_reply(task_id: &str, reply: &Envelope, wall_time_ms: u64) -> Self {
        let mut r = RunReport {
            task_id: task_id.to_owned(),
            verdict: TaskState::Failed,
            refinement: None,
            iterations: 0,
            instruction_counts: BTreeMap::new(),
            wall_time_ms,
            trace_path: None,
            observation_log_path: None,
            message_log_path: None,
            detail: None,
        };
        match &reply.body {
            Body::Status(s) => {
                r.verdict = s.state;
                r.refinement = s.verdict;
                r.detail = s.detail.clone();
                if let Some(sum) = &s.summary {
                    r.iterations = sum.iterations;
                    r.instruction_counts = sum.instruction_counts.clone();
                    r.trace_path = sum.trace_path.clone();
                    r.observation_log_path = sum.observation_log_path.clone();
                }
            }
            Body::Error(e) => r.detail = Some(format!("{}: {}", e.code, e.message)),
            other => r.detail = Some(format!("unexpected {} reply", other.msg_type())),
        }
        r
    }

    /// Zero wall time, for comparing runs.
    pub fn redacted(&self) -> Self {
        Self { wall_time_ms: 0, ..self.clone() }
    }

    pub fn exit_code(&self) -> i32 {
        if self.verdict == TaskState::Done {
            EXIT_OK
        } else {
            EXIT_TASK_FAILED
        }
    }

    pub fn render(&self) -> String {
        let mut s =
            format!("task {}: {}", self.task_id, if self.verdict == TaskState::Done { "done" } else { "failed" });
        if let Some(v) = self.refinement {
            s += &format!(" ({})", v.as_str());
        }
        s += &format!("\n  iterations: {}\n  wall time: {} ms\n", self.iterations, self.wall_time_ms);
        for (robot, n) in &self.instruction_counts {
            s += &format!("  {robot}: {n} instructions\n");
        }
        for (label, p) in [
            ("trace", &self.trace_path),
            ("observations", &self.observation_log_path),
            ("messages", &self.message_log_path),
        ] {
            if let Some(p) = p {
                s += &format!("  {label}: {p}\n");
            }
        }
        if let Some(d) = &self.detail {
            s += &format!("  detail: {d}\n");
        }
        s
    }
}

fn emit(report: &RunReport, json: bool, out: &mut dyn Write) {
    let text =
        if json { serde_json::to_string_pretty(report).expect("report serializes") + "\n" } else { report.render() };
    let _ = out.write_all(text.as_bytes());
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    if let Command::Trace { path } = &cli.command {
        return cmd_trace(path, out, err);
    }
    if let Command::Scenarios = &cli.command {
        for name in BUNDLED {
            let _ = writeln!(out, "{name}");
        }
        return EXIT_OK;
    }
    let config = match Config::resolve(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    match cli.command {
        Command::RunScenario { name, scenario } => match name.or(scenario) {
            Some(n) => cmd_run_scenario(&n, &config, cli.json, out, err),
            None => {
                let _ = writeln!(err, "error: name a scenario ({})", BUNDLED.join(", "));
                EXIT_USAGE
            }
        },
        Command::Serve { tier } => cmd_serve(tier, &config, err),
        Command::Submit { task, edge_addr, task_id } => {
            let addr = edge_addr.unwrap_or_else(|| config.tiers.edge_addr.clone());
            cmd_submit(&task, task_id, &addr, cli.json, out, err)
        }
        Command::Trace { .. } | Command::Scenarios => unreachable!("handled above"),
    }
}

pub fn cmd_run_scenario(name: &str, config: &Config, json: bool, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let Some(scenario) = Scenario::bundled(name) else {
        let _ = writeln!(err, "error: unknown scenario `{name}` (bundled: {})", BUNDLED.join(", "));
        return EXIT_USAGE;
    };
    let out_dir = config.out_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let mut deployment = match config.deployment(&scenario.world) {
        Ok(d) => d,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    deployment.out_dir = Some(out_dir.clone());
    let started = Instant::now();
    let run = match run_task(&deployment, &scenario.task, config.tiers.transport) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_TASK_FAILED;
        }
    };
    let mut report = RunReport::from_reply(&scenario.task.id, &run.reply, started.elapsed().as_millis() as u64);
    let log_path = out_dir.join(format!("{}.messages.jsonl", scenario.task.id));
    match std::fs::write(&log_path, log_to_jsonl(&run.edge_log)) {
        Ok(()) => report.message_log_path = Some(log_path.display().to_string()),
        Err(e) => {
            let _ = writeln!(err, "warning: writing {}: {e}", log_path.display());
        }
    }
    let world_path = out_dir.join(format!("{}.world.json", scenario.task.id));
    let world = serde_json::to_string_pretty(run.world.state()).expect("world state serializes") + "\n";
    if let Err(e) = std::fs::write(&world_path, world) {
        let _ = writeln!(err, "warning: writing {}: {e}", world_path.display());
    }
    emit(&report, json, out);
    report.exit_code()
}

fn bind(addr: &str, err: &mut dyn Write) -> Option<TcpListener> {
    match TcpListener::bind(addr) {
        Ok(l) => Some(l),
        Err(e) => {
            let _ = writeln!(err, "error: binding {addr}: {e}");
            None
        }
    }
}

/// Runs until killed.
pub fn cmd_serve(tier: TierName, config: &Config, err: &mut dyn Write) -> i32 {
    let deployment = match config.deployment("field") {
        Ok(d) => d,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let t = &config.tiers;
    match tier {
        TierName::Cloud => {
            let Some(l) = bind(&t.cloud_addr, err) else { return EXIT_USAGE };
            log::info!("cloud listening on {}", t.cloud_addr);
            serve_listener(&l, None, |link| cloud_serve(link, &deployment.rules));
        }
        TierName::Device => {
            let Some(l) = bind(&t.device_addr, err) else { return EXIT_USAGE };
            let mut world = match World::new(&deployment.world, deployment.world_config.clone()) {
                Ok(w) => w,
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    return EXIT_USAGE;
                }
            };
            log::info!("device listening on {}", t.device_addr);
            serve_listener(&l, None, |link| device_serve(link, &mut world));
        }
        TierName::Edge => {
            let Some(l) = bind(&t.edge_addr, err) else { return EXIT_USAGE };
            let mut edge = Edge::new(
                deployment,
                Peer::tcp("cloud", t.cloud_addr.clone()),
                Peer::tcp("device", t.device_addr.clone()),
            );
            log::info!("edge listening on {}", t.edge_addr);
            serve_listener(&l, None, |link| edge.serve(link));
        }
    }
    EXIT_OK
}

pub fn cmd_submit(
    text: &str,
    task_id: Option<String>,
    edge_addr: &str,
    json: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let stamp = now_ms();
    let task = TaskSpec::new(task_id.unwrap_or_else(|| format!("task-{stamp}")), text);
    if let Err(e) = task.validate() {
        let _ = writeln!(err, "error: {e}");
        return EXIT_USAGE;
    }
    let started = Instant::now();
    let mut link = match TcpLink::connect(edge_addr) {
        Ok(l) => l,
        Err(e) => {
            let _ = writeln!(err, "error: connecting to edge at {edge_addr}: {e}");
            return EXIT_TASK_FAILED;
        }
    };
    let mut ids = IdGen::new(format!("client-{}-{stamp}", std::process::id()));
    let req = ids.envelope(None, Body::TaskRequest(TaskRequest { task: task.clone(), fleet: None }));
    match submit(&mut link, &req) {
        Ok(reply) => {
            let report = RunReport::from_reply(&task.id, &reply, started.elapsed().as_millis() as u64);
            emit(&report, json, out);
            report.exit_code()
        }
        Err(e) => {
            let _ = writeln!(err, "error: edge connection: {e}");
            EXIT_TASK_FAILED
        }
    }
}

/// Accepts either a task trace file or a bare refinement trace.
pub fn load_trace(path: &Path) -> Result<TaskTraceFile, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    if let Ok(t) = serde_json::from_str::<TaskTraceFile>(&text) {
        return Ok(t);
    }
    let single: RefinementTrace =
        serde_json::from_str(&text).map_err(|e| format!("{} is not a trace: {e}", path.display()))?;
    Ok(render_bare(single))
}

fn render_bare(trace: RefinementTrace) -> TaskTraceFile {
    TaskTraceFile {
        task_id: trace.task_id.clone(),
        recorded_at: 0,
        state: if trace.verdict == Verdict::Converged { TaskState::Done } else { TaskState::Failed },
        strategy: None,
        refinements: vec![crate::tiers::Refinement {
            phase: String::new(),
            robot_id: trace.robot_id.clone(),
            goal: trace.goal.clone(),
            tree: crate::orchestrator::DecompositionTree {
                task_id: trace.task_id.clone(),
                robot_id: trace.robot_id.clone(),
                robot_class: trace.robot_class,
                verdict: trace.verdict,
                root: crate::planner::SubtaskNode::new("0", trace.goal.clone(), String::new(), 0),
            },
            trace,
        }],
    }
}

pub fn render_trace(file: &TaskTraceFile) -> String {
    let mut s = format!("task {}\n", file.task_id);
    for r in &file.refinements {
        let t = &r.trace;
        s += &format!(
            "\n[{}] {} ({}) goal: {}\n  threshold {}  max_depth {}  max_iterations {}\n",
            if r.phase.is_empty() { "-" } else { &r.phase },
            r.robot_id,
            t.robot_class,
            r.goal,
            t.threshold,
            t.max_depth,
            t.max_iterations
        );
        if let Some(e) = &t.root_expansion {
            s += &format!("  root {} -> {} children\n", e.node_id, e.children.len());
        }
        for it in &t.iterations {
            s += &format!("  iteration {}  flagged {}\n", it.iteration, it.flagged.len());
            for n in &it.scores {
                s += &format!(
                    "    {:<8} {:<36} {:<14} {:.4}{}\n",
                    n.node_id,
                    n.text,
                    n.best_skill,
                    n.best_score,
                    if n.flagged { "  FLAG" } else { "" }
                );
            }
            for e in &it.expansions {
                let kids: Vec<&str> = e.children.iter().map(|c| c.text.as_str()).collect();
                s += &format!(
                    "    expand {}{}: {}\n",
                    e.node_id,
                    if e.fixed_point { " (fixed point)" } else { "" },
                    kids.join(" | ")
                );
            }
        }
        if let Some(p) = &t.planner_error {
            s += &format!("  planner error at {}: {}\n", p.node_id, p.message);
        }
        s += &format!("  verdict: {}\n", t.verdict.as_str());
    }
    let last = file.refinements.iter().find(|r| r.trace.verdict != Verdict::Converged).or(file.refinements.last());
    match last {
        Some(r) if r.trace.verdict != Verdict::Converged && !r.trace.exhausted.is_empty() => {
            s += &format!(
                "\nfinal verdict: {} for {} at node {}\n",
                r.trace.verdict.as_str(),
                r.robot_id,
                r.trace.exhausted.join(", ")
            );
        }
        Some(r) if r.trace.verdict != Verdict::Converged => {
            s += &format!("\nfinal verdict: {} for {}\n", r.trace.verdict.as_str(), r.robot_id);
        }
        Some(_) => s += "\nfinal verdict: converged\n",
        None => s += "\nfinal verdict: none (no refinements)\n",
    }
    s
}

pub fn cmd_trace(path: &Path, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match load_trace(path) {
        Ok(t) => {
            let _ = out.write_all(render_trace(&t).as_bytes());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_USAGE
        }
    }
}

//! Service loops for the cloud, edge and device tiers.
//!
//! Each tier is a serial event loop over a [`Link`]. The edge owns two
//! outbound peers (cloud and device) and answers one client connection at a
//! time. Running all three as threads over [`channel_pair`] links gives the
//! same message sequence as running them over TCP.

use std::collections::{BTreeMap, HashSet};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::cloud_policy::{generate_strategy, FleetDescriptor, RuleSet, Strategy};
use crate::instruction::InstructionSequence;
use crate::orchestrator::{
    annotate_args, emit_sequences, refine_task, DecompositionTree, OrchestratorConfig, RefinementTrace, Verdict,
};
use crate::planner::{Planner, TaskSpec};
use crate::protocol::{
    channel_pair, Ack, Body, Direction, Envelope, ErrorReport, IdGen, InstructionDispatch, Link, LinkError, LogEntry,
    StatusReport, StrategyResponse, TaskRequest, TaskState, TaskSummary, TcpLink,
};
use crate::skills::SkillRegistry;
use crate::world::{
    observations_to_jsonl, EnvironmentSnapshot, Observation, SequenceOutcome, World, WorldConfig, WorldFixture,
};

fn error_body(code: &str, message: impl Into<String>) -> Body {
    Body::Error(ErrorReport { code: code.to_owned(), message: message.into() })
}

/// Answers TaskRequests with the strategy for the attached fleet. Returns
/// when the peer hangs up.
pub fn cloud_serve(link: &mut dyn Link, rules: &RuleSet) {
    let mut ids = IdGen::new("cloud");
    loop {
        let reply = match link.recv() {
            Ok(env) => match &env.body {
                Body::TaskRequest(TaskRequest { task, fleet: Some(fleet) }) => {
                    let body = match generate_strategy(task, fleet, rules) {
                        Ok(strategy) => Body::StrategyResponse(StrategyResponse { strategy }),
                        Err(e) => error_body("strategy", e.to_string()),
                    };
                    ids.envelope(Some(&env.msg_id), body)
                }
                Body::TaskRequest(_) => {
                    ids.envelope(Some(&env.msg_id), error_body("strategy", "request carries no fleet"))
                }
                other => ids.envelope(
                    Some(&env.msg_id),
                    error_body("unexpected", format!("cloud does not accept {}", other.msg_type())),
                ),
            },
            Err(LinkError::Decode { error, .. }) => ids.envelope(None, error_body("decode", error.to_string())),
            Err(LinkError::Timeout) => continue,
            Err(_) => return,
        };
        if link.send(&reply).is_err() {
            return;
        }
    }
}

/// Executes dispatched sequences on `world`, then streams the resulting
/// observations followed by one Status per robot.
pub fn device_serve(link: &mut dyn Link, world: &mut World) {
    let mut ids = IdGen::new("device");
    loop {
        let env = match link.recv() {
            Ok(env) => env,
            Err(LinkError::Decode { error, .. }) => {
                if link.send(&ids.envelope(None, error_body("decode", error.to_string()))).is_err() {
                    return;
                }
                continue;
            }
            Err(LinkError::Timeout) => continue,
            Err(_) => return,
        };
        let replies = match &env.body {
            Body::InstructionDispatch(d) => dispatch_replies(world, d),
            other => vec![error_body("unexpected", format!("device does not accept {}", other.msg_type()))],
        };
        for body in replies {
            if link.send(&ids.envelope(Some(&env.msg_id), body)).is_err() {
                return;
            }
        }
    }
}

fn dispatch_replies(world: &mut World, d: &InstructionDispatch) -> Vec<Body> {
    if let Some(s) = d.sequences.iter().find(|s| world.robot(&s.robot_id).is_none()) {
        return vec![error_body("unknown_robot", format!("no robot `{}` on this device", s.robot_id))];
    }
    let before = world.observations().len();
    let outcomes = match world.run_sequences(&d.sequences) {
        Ok(o) => o,
        Err(e) => return vec![error_body("rejected", e.to_string())],
    };
    let mut out: Vec<Body> = world.observations()[before..].iter().cloned().map(Body::Observation).collect();
    for o in outcomes {
        let mut status = StatusReport::new(d.task_id.clone(), TaskState::Done);
        status.robot_id = Some(o.robot_id().to_owned());
        status.phase = Some(d.phase.clone());
        if let SequenceOutcome::Failed { index, reason, .. } = o {
            status.state = TaskState::Failed;
            status.failed_index = Some(index);
            status.detail = Some(reason);
        }
        out.push(Body::Status(status));
    }
    out
}

type Connector = Box<dyn FnMut() -> Result<Box<dyn Link>, LinkError> + Send>;

/// An outbound connection opened on first use and dropped after any
/// transport error, so the next task reconnects.
pub struct Peer {
    name: &'static str,
    connect: Connector,
    link: Option<Box<dyn Link>>,
}

impl Peer {
    pub fn new(name: &'static str, connect: Connector) -> Self {
        Self { name, connect, link: None }
    }

    /// A peer backed by one pre-built link; it cannot reconnect.
    pub fn fixed(name: &'static str, link: Box<dyn Link>) -> Self {
        let mut slot = Some(link);
        Self::new(name, Box::new(move || slot.take().ok_or(LinkError::Closed)))
    }

    pub fn tcp(name: &'static str, addr: String) -> Self {
        Self::new(name, Box::new(move || Ok(Box::new(TcpLink::connect(&addr)?) as Box<dyn Link>)))
    }

    fn link(&mut self) -> Result<&mut Box<dyn Link>, LinkError> {
        if self.link.is_none() {
            log::debug!("connecting to {}", self.name);
            self.link = Some((self.connect)()?);
        }
        Ok(self.link.as_mut().expect("just connected"))
    }

    fn close(&mut self) {
        self.link = None;
    }
}

/// Everything a deployment needs besides transport.
#[derive(Clone)]
pub struct Deployment {
    pub registry: SkillRegistry,
    pub planner: Arc<dyn Planner>,
    pub rules: RuleSet,
    pub world: WorldFixture,
    pub world_config: WorldConfig,
    pub orchestrator: OrchestratorConfig,
    pub out_dir: Option<PathBuf>,
}

impl Deployment {
    pub fn fleet(&self) -> FleetDescriptor {
        FleetDescriptor::new(self.world.robots.iter().map(|r| (r.id.clone(), r.class)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub phase: String,
    pub robot_id: String,
    pub goal: String,
    pub trace: RefinementTrace,
    pub tree: DecompositionTree,
}

/// Contents of `{task_id}.trace.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTraceFile {
    pub task_id: String,
    /// Milliseconds since the Unix epoch; zero once redacted.
    pub recorded_at: u64,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    pub refinements: Vec<Refinement>,
}

impl TaskTraceFile {
    pub fn redacted(&self) -> Self {
        Self { recorded_at: 0, ..self.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes") + "\n"
    }
}

/// What the edge learned while running one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub status: StatusReport,
    pub trace: TaskTraceFile,
    pub observations: Vec<Observation>,
}

pub struct Edge {
    deployment: Deployment,
    fleet: FleetDescriptor,
    cloud: Peer,
    device: Peer,
    ids: IdGen,
    env: EnvironmentSnapshot,
    seen: HashSet<String>,
    log: Vec<LogEntry>,
    outcomes: Vec<TaskOutcome>,
}

enum Failure {
    /// Reported to the client as an Error envelope.
    Error(&'static str, String),
    /// Reported as a failed Status.
    Task { verdict: Option<Verdict>, detail: String },
}

impl Edge {
    pub fn new(deployment: Deployment, cloud: Peer, device: Peer) -> Self {
        let fleet = deployment.fleet();
        Self {
            deployment,
            fleet,
            cloud,
            device,
            ids: IdGen::new("edge"),
            env: EnvironmentSnapshot::default(),
            seen: HashSet::new(),
            log: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    /// Every envelope the edge sent or received, in order.
    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn outcomes(&self) -> &[TaskOutcome] {
        &self.outcomes
    }

    pub fn env(&self) -> &EnvironmentSnapshot {
        &self.env
    }

    /// Drops both peer connections so their serve loops return.
    pub fn close_peers(&mut self) {
        self.cloud.close();
        self.device.close();
    }

    fn record(&mut self, link: &str, direction: Direction, envelope: &Envelope) {
        self.log.push(LogEntry { link: link.to_owned(), direction, envelope: envelope.clone() });
    }

    fn send_client(&mut self, client: &mut dyn Link, env: Envelope) -> bool {
        self.record("client", Direction::Out, &env);
        client.send(&env).is_ok()
    }

    /// Serves one client until it hangs up.
    pub fn serve(&mut self, client: &mut dyn Link) {
        loop {
            let env = match client.recv() {
                Ok(env) => env,
                Err(LinkError::Decode { error, .. }) => {
                    let reply = self.ids.envelope(None, error_body("decode", error.to_string()));
                    if !self.send_client(client, reply) {
                        return;
                    }
                    continue;
                }
                Err(LinkError::Timeout) => continue,
                Err(_) => return,
            };
            self.record("client", Direction::In, &env);
            let reply = match &env.body {
                Body::TaskRequest(req) if self.seen.contains(&env.msg_id) => {
                    log::info!("duplicate request {} for {}", env.msg_id, req.task.id);
                    self.ids.envelope(Some(&env.msg_id), Body::Ack(Ack {}))
                }
                Body::TaskRequest(req) => {
                    self.seen.insert(env.msg_id.clone());
                    let task = req.task.clone();
                    let body = self.handle_task(&task);
                    self.ids.envelope(Some(&env.msg_id), body)
                }
                other => self.ids.envelope(
                    Some(&env.msg_id),
                    error_body("unexpected", format!("edge does not accept {} from clients", other.msg_type())),
                ),
            };
            if !self.send_client(client, reply) {
                return;
            }
        }
    }

    fn handle_task(&mut self, task: &TaskSpec) -> Body {
        let mut trace = TaskTraceFile {
            task_id: task.id.clone(),
            recorded_at: crate::protocol::now_ms(),
            state: TaskState::Failed,
            strategy: None,
            refinements: Vec::new(),
        };
        let mut observations = Vec::new();
        let result = self.run_task(task, &mut trace, &mut observations);
        let mut status = StatusReport::new(task.id.clone(), TaskState::Done);
        status.verdict = Some(Verdict::Converged);
        match result {
            Ok(()) => {}
            Err(Failure::Error(code, message)) => {
                log::warn!("task {} aborted: {message}", task.id);
                return error_body(code, message);
            }
            Err(Failure::Task { verdict, detail }) => {
                log::warn!("task {} failed: {detail}", task.id);
                status.state = TaskState::Failed;
                status.verdict = verdict;
                status.detail = Some(detail);
            }
        }
        trace.state = status.state;

        let mut summary = TaskSummary::default();
        for r in &trace.refinements {
            summary.iterations += r.trace.iterations_used();
            summary.exhausted.extend(r.trace.exhausted.iter().map(|n| format!("{}:{n}", r.robot_id)));
            let bound = if r.trace.verdict == Verdict::Converged { r.tree.bound_leaves() } else { 0 };
            *summary.instruction_counts.entry(r.robot_id.clone()).or_default() += bound;
        }
        if let Some(dir) = &self.deployment.out_dir {
            match write_artifacts(dir, &trace, &observations) {
                Ok((t, o)) => {
                    summary.trace_path = Some(t.display().to_string());
                    summary.observation_log_path = Some(o.display().to_string());
                }
                Err(e) => {
                    status.state = TaskState::Failed;
                    status.detail = Some(format!("writing artifacts: {e}"));
                }
            }
        }
        status.summary = Some(summary);
        self.outcomes.push(TaskOutcome { status: status.clone(), trace, observations });
        Body::Status(status)
    }

    fn run_task(
        &mut self,
        task: &TaskSpec,
        trace: &mut TaskTraceFile,
        observations: &mut Vec<Observation>,
    ) -> Result<(), Failure> {
        let strategy = self.request_strategy(task)?;
        trace.strategy = Some(strategy.clone());
        for phase in &strategy.phases {
            // Everything folded so far, including upstream survey results.
            let snapshot = self.env.clone();
            let mut sequences: Vec<InstructionSequence> = Vec::new();
            for policy in strategy.policies_for(&phase.name) {
                let d = &self.deployment;
                let (mut tree, rtrace) =
                    refine_task(task, policy, &snapshot, &d.registry, d.planner.as_ref(), &d.orchestrator).map_err(
                        |e| Failure::Task { verdict: None, detail: format!("refining for {}: {e}", policy.robot_id) },
                    )?;
                let verdict = rtrace.verdict;
                let emitted = if verdict == Verdict::Converged {
                    Some(emit_sequences(&tree, &snapshot, &d.registry))
                } else {
                    None
                };
                if let Some(Ok(seqs)) = &emitted {
                    annotate_args(&mut tree, seqs);
                }
                let exhausted = rtrace.exhausted.clone();
                trace.refinements.push(Refinement {
                    phase: phase.name.clone(),
                    robot_id: policy.robot_id.clone(),
                    goal: policy.goal.clone(),
                    trace: rtrace,
                    tree,
                });
                match emitted {
                    None => {
                        let detail = match verdict {
                            Verdict::DepthExhausted => {
                                format!(
                                    "{} {}: exhausted at {}",
                                    policy.robot_id,
                                    verdict.as_str(),
                                    exhausted.join(", ")
                                )
                            }
                            _ => format!("{} {}", policy.robot_id, verdict.as_str()),
                        };
                        return Err(Failure::Task { verdict: Some(verdict), detail });
                    }
                    Some(Err(e)) => {
                        return Err(Failure::Task {
                            verdict: Some(verdict),
                            detail: format!("grounding for {}: {e}", policy.robot_id),
                        })
                    }
                    Some(Ok(seqs)) => sequences.extend(seqs),
                }
            }
            self.dispatch_phase(&task.id, &phase.name, sequences, observations)?;
        }
        Ok(())
    }

    fn request_strategy(&mut self, task: &TaskSpec) -> Result<Strategy, Failure> {
        let req = self
            .ids
            .envelope(None, Body::TaskRequest(TaskRequest { task: task.clone(), fleet: Some(self.fleet.clone()) }));
        let unreachable = |e: LinkError| Failure::Error("cloud_unreachable", format!("cloud: {e}"));
        let reply = {
            let link = self.cloud.link().map_err(unreachable)?;
            link.send(&req).and_then(|_| link.recv())
        };
        self.record("cloud", Direction::Out, &req);
        let reply = match reply {
            Ok(r) => r,
            Err(e) => {
                self.cloud.close();
                return Err(unreachable(e));
            }
        };
        self.record("cloud", Direction::In, &reply);
        if reply.correlates_to.as_deref() != Some(req.msg_id.as_str()) {
            return Err(Failure::Task { verdict: None, detail: "cloud reply does not answer the request".into() });
        }
        match reply.body {
            Body::StrategyResponse(StrategyResponse { strategy }) => {
                strategy
                    .check(&self.fleet)
                    .map_err(|e| Failure::Task { verdict: None, detail: format!("invalid strategy: {e}") })?;
                Ok(strategy)
            }
            Body::Error(e) => Err(Failure::Task { verdict: None, detail: format!("cloud {}: {}", e.code, e.message) }),
            other => Err(Failure::Task { verdict: None, detail: format!("cloud replied with {}", other.msg_type()) }),
        }
    }

    /// Sends one phase to the device and blocks until every robot in it has
    /// reported. Observations are folded into the store as they arrive.
    fn dispatch_phase(
        &mut self,
        task_id: &str,
        phase: &str,
        sequences: Vec<InstructionSequence>,
        observations: &mut Vec<Observation>,
    ) -> Result<(), Failure> {
        let mut pending: BTreeMap<String, ()> = sequences.iter().map(|s| (s.robot_id.clone(), ())).collect();
        let msg = self.ids.envelope(
            None,
            Body::InstructionDispatch(InstructionDispatch {
                task_id: task_id.to_owned(),
                phase: phase.to_owned(),
                sequences,
            }),
        );
        let lost = |e: LinkError| Failure::Task { verdict: Some(Verdict::Converged), detail: format!("device: {e}") };
        let sent = self.device.link().and_then(|l| l.send(&msg));
        self.record("device", Direction::Out, &msg);
        if let Err(e) = sent {
            self.device.close();
            return Err(lost(e));
        }
        let mut failure = None;
        while !pending.is_empty() {
            let env = match self.device.link().and_then(|l| l.recv()) {
                Ok(env) => env,
                Err(LinkError::Timeout) => continue,
                Err(e) => {
                    self.device.close();
                    return Err(lost(e));
                }
            };
            self.record("device", Direction::In, &env);
            match env.body {
                Body::Observation(obs) => {
                    self.env.fold(&obs);
                    observations.push(obs);
                }
                Body::Status(s) => {
                    let robot = s.robot_id.clone().unwrap_or_default();
                    pending.remove(&robot);
                    if s.state == TaskState::Failed && failure.is_none() {
                        failure = Some(format!(
                            "{robot} failed at instruction {}: {}",
                            s.failed_index.map_or("?".into(), |i| i.to_string()),
                            s.detail.unwrap_or_default()
                        ));
                    }
                }
                Body::Error(e) => {
                    return Err(Failure::Task {
                        verdict: Some(Verdict::Converged),
                        detail: format!("device {}: {}", e.code, e.message),
                    })
                }
                other => log::warn!("ignoring {} from device", other.msg_type()),
            }
        }
        match failure {
            Some(detail) => Err(Failure::Task { verdict: Some(Verdict::Converged), detail }),
            None => Ok(()),
        }
    }
}

/// Writes `{task_id}.trace.json` and `{task_id}.observations.jsonl`.
pub fn write_artifacts(
    dir: &Path,
    trace: &TaskTraceFile,
    observations: &[Observation],
) -> std::io::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let t = dir.join(format!("{}.trace.json", trace.task_id));
    let o = dir.join(format!("{}.observations.jsonl", trace.task_id));
    std::fs::write(&t, trace.to_json())?;
    std::fs::write(&o, observations_to_jsonl(observations))?;
    Ok((t, o))
}

/// Accepts connections one after another and serves each to completion.
/// Stops after `limit` connections when given.
pub fn serve_listener(listener: &TcpListener, limit: Option<usize>, mut handle: impl FnMut(&mut TcpLink)) {
    for (i, stream) in listener.incoming().enumerate() {
        match stream.and_then(TcpLink::new) {
            Ok(mut link) => handle(&mut link),
            Err(e) => log::warn!("accept failed: {e}"),
        }
        if limit.is_some_and(|l| i + 1 >= l) {
            return;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transport {
    InProcess,
    Tcp,
}

/// Result of driving one task through a full three-tier deployment.
pub struct Run {
    pub reply: Envelope,
    pub outcome: Option<TaskOutcome>,
    pub edge_log: Vec<LogEntry>,
    pub world: World,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("world: {0}")]
    World(#[from] crate::world::WorldError),
    #[error("link: {0}")]
    Link(#[from] LinkError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0} thread panicked")]
    Panicked(&'static str),
}

/// Boots cloud, edge and device as threads, submits `task` as a client and
/// waits for the terminal reply. TCP mode binds ephemeral loopback ports.
pub fn run_task(deployment: &Deployment, task: &TaskSpec, transport: Transport) -> Result<Run, RunError> {
    let mut world = World::new(&deployment.world, deployment.world_config.clone())?;
    let rules = deployment.rules.clone();
    let (cloud_h, device_h, edge_h, mut client): (_, _, _, Box<dyn Link>) = match transport {
        Transport::InProcess => {
            let (mut cloud_srv, cloud_cli) = channel_pair();
            let (mut dev_srv, dev_cli) = channel_pair();
            let (mut edge_srv, client) = channel_pair();
            let cloud_h = thread::spawn(move || cloud_serve(&mut cloud_srv, &rules));
            let device_h = thread::spawn(move || {
                device_serve(&mut dev_srv, &mut world);
                world
            });
            let mut edge = Edge::new(
                deployment.clone(),
                Peer::fixed("cloud", Box::new(cloud_cli)),
                Peer::fixed("device", Box::new(dev_cli)),
            );
            let edge_h = thread::spawn(move || {
                edge.serve(&mut edge_srv);
                edge.close_peers();
                edge
            });
            (cloud_h, device_h, edge_h, Box::new(client))
        }
        Transport::Tcp => {
            let cloud_l = TcpListener::bind("127.0.0.1:0")?;
            let dev_l = TcpListener::bind("127.0.0.1:0")?;
            let edge_l = TcpListener::bind("127.0.0.1:0")?;
            let cloud_addr = cloud_l.local_addr()?.to_string();
            let dev_addr = dev_l.local_addr()?.to_string();
            let edge_addr = edge_l.local_addr()?.to_string();
            let cloud_h = thread::spawn(move || serve_listener(&cloud_l, Some(1), |l| cloud_serve(l, &rules)));
            let device_h = thread::spawn(move || {
                serve_listener(&dev_l, Some(1), |l| device_serve(l, &mut world));
                world
            });
            let mut edge = Edge::new(deployment.clone(), Peer::tcp("cloud", cloud_addr), Peer::tcp("device", dev_addr));
            let edge_h = thread::spawn(move || {
                serve_listener(&edge_l, Some(1), |l| edge.serve(l));
                edge.close_peers();
                edge
            });
            (cloud_h, device_h, edge_h, Box::new(TcpLink::connect(&edge_addr)?))
        }
    };

    let mut client_ids = IdGen::new("client");
    let req = client_ids.envelope(None, Body::TaskRequest(TaskRequest { task: task.clone(), fleet: None }));
    let reply = submit(client.as_mut(), &req);
    drop(client);
    let edge = edge_h.join().map_err(|_| RunError::Panicked("edge"))?;
    let world = device_h.join().map_err(|_| RunError::Panicked("device"))?;
    cloud_h.join().map_err(|_| RunError::Panicked("cloud"))?;
    let reply = reply?;
    Ok(Run { reply, outcome: edge.outcomes().last().cloned(), edge_log: edge.log().to_vec(), world })
}

/// Sends `req` and waits for the terminal Status or Error that answers it.
pub fn submit(link: &mut dyn Link, req: &Envelope) -> Result<Envelope, LinkError> {
    link.send(req)?;
    loop {
        let env = link.recv()?;
        if env.correlates_to.as_deref() == Some(req.msg_id.as_str())
            && matches!(env.body, Body::Status(_) | Body::Error(_))
        {
            return Ok(env);
        }
    }
}

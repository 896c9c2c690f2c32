//! Edge-tier refinement loop.
//!
//! The policy goal is decomposed once, then every iteration embeds the raw
//! leaves, aligns them against the skills of the policy's robot class and
//! binds each leaf whose best score reaches the threshold. Leaves below the
//! threshold go back to the planner. The loop ends when no raw leaves remain
//! (`converged`), when a flagged leaf cannot be decomposed further
//! (`depth_exhausted`), or when the planner errors (`planner_failed`).
//!
//! A leaf is exhausted when it sits at `max_depth`, or when the planner hands
//! back a node that was itself a verbatim copy of its parent, i.e. the same
//! text twice in a row.

use serde::{Deserialize, Serialize};

use crate::cloud_policy::RobotPolicy;
use crate::instruction::{ArgValue, Instruction, InstructionSequence};
use crate::planner::{decompose, NodeStatus, PlanContext, Planner, SubtaskNode, TaskSpec};
use crate::similarity::{self, DEFAULT_THRESHOLD};
use crate::skills::{skills_for_class, ParamKind, RobotClass, SkillDescriptor, SkillRegistry};
use crate::vectorizer::{embed, token_strings};
use crate::world::{distance, EnvironmentSnapshot, ObjectSighting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorConfig {
    pub threshold: f64,
    pub max_depth: u32,
    pub max_iterations: u32,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, max_depth: 4, max_iterations: 16 }
    }
}

impl OrchestratorConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(OrchestratorError::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.max_depth < 1 || self.max_iterations < 1 {
            return Err(OrchestratorError::Config("max_depth and max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OrchestratorError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("grounding node `{node}`: {reason}")]
    Grounding { node: String, reason: String },
    #[error("precondition: {0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Converged,
    DepthExhausted,
    PlannerFailed,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Converged => "converged",
            Verdict::DepthExhausted => "depth_exhausted",
            Verdict::PlannerFailed => "planner_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub node_id: String,
    pub text: String,
    pub best_skill: String,
    pub best_score: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildRecord {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub node_id: String,
    pub fixed_point: bool,
    pub children: Vec<ChildRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u32,
    pub embedded: Vec<String>,
    pub scores: Vec<NodeScore>,
    /// Cells of the alignment matrix below the threshold.
    pub flagged_cells: usize,
    pub flagged: Vec<String>,
    pub expansions: Vec<Expansion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerFailure {
    pub node_id: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub task_id: String,
    pub robot_id: String,
    pub robot_class: RobotClass,
    pub goal: String,
    pub threshold: f64,
    pub max_depth: u32,
    pub max_iterations: u32,
    /// Skills the leaves were aligned against, in column order.
    pub skills: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_expansion: Option<Expansion>,
    pub iterations: Vec<IterationRecord>,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub exhausted: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planner_error: Option<PlannerFailure>,
}

impl RefinementTrace {
    pub fn iterations_used(&self) -> u32 {
        self.iterations.len() as u32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionTree {
    pub task_id: String,
    pub robot_id: String,
    pub robot_class: RobotClass,
    pub verdict: Verdict,
    pub root: SubtaskNode,
}

impl DecompositionTree {
    pub fn leaves(&self) -> Vec<&SubtaskNode> {
        self.root.leaves()
    }

    pub fn bound_leaves(&self) -> usize {
        self.leaves().iter().filter(|n| n.status == NodeStatus::Bound).count()
    }
}

fn expansion(node_id: &str, children: &[SubtaskNode]) -> Expansion {
    Expansion {
        node_id: node_id.to_owned(),
        fixed_point: children.first().is_some_and(|c| c.fixed_point),
        children: children.iter().map(|c| ChildRecord { id: c.id.clone(), text: c.description.clone() }).collect(),
    }
}

pub fn refine_task(
    task: &TaskSpec,
    policy: &RobotPolicy,
    env: &EnvironmentSnapshot,
    registry: &SkillRegistry,
    planner: &dyn Planner,
    config: &OrchestratorConfig,
) -> Result<(DecompositionTree, RefinementTrace), OrchestratorError> {
    config.validate()?;
    let skills = skills_for_class(registry, policy.robot_class);
    if skills.is_empty() {
        return Err(OrchestratorError::Config(format!("no skills registered for {}", policy.robot_class)));
    }
    let skill_ids: Vec<&str> = skills.iter().map(|s| s.id.as_str()).collect();
    let skill_vectors: Vec<_> = skill_ids.iter().map(|id| registry.vector(id).expect("cached").clone()).collect();
    let ctx = PlanContext { env, skills: &skills, robot_id: Some(&policy.robot_id) };

    let context = task.constraints.join("; ");
    let mut root = SubtaskNode::new("0", policy.goal.clone(), context.clone(), 0);
    root.status = NodeStatus::NeedsDecomposition;

    let mut trace = RefinementTrace {
        task_id: task.id.clone(),
        robot_id: policy.robot_id.clone(),
        robot_class: policy.robot_class,
        goal: policy.goal.clone(),
        threshold: config.threshold,
        max_depth: config.max_depth,
        max_iterations: config.max_iterations,
        skills: skill_ids.iter().map(|s| (*s).to_owned()).collect(),
        root_expansion: None,
        iterations: Vec::new(),
        verdict: Verdict::Converged,
        exhausted: Vec::new(),
        planner_error: None,
    };

    match decompose(planner, &root.id, &root.description, &context, &ctx, 0, config.max_depth) {
        Ok(children) => {
            trace.root_expansion = Some(expansion(&root.id, &children));
            root.children = children;
        }
        Err(e) => {
            root.status = NodeStatus::Failed;
            trace.verdict = Verdict::PlannerFailed;
            trace.planner_error = Some(PlannerFailure {
                node_id: root.id.clone(),
                message: e.to_string(),
                raw: e.raw().map(str::to_owned),
            });
            return Ok((finish(task, policy, root, trace.verdict), trace));
        }
    }

    let mut iteration = 0u32;
    loop {
        let raw: Vec<(String, String, Vec<String>, String)> = root
            .leaves()
            .into_iter()
            .filter(|n| n.status == NodeStatus::Raw)
            .map(|n| (n.id.clone(), n.description.clone(), n.keywords.clone(), n.context.clone()))
            .collect();
        if raw.is_empty() {
            trace.verdict = Verdict::Converged;
            break;
        }
        if iteration >= config.max_iterations {
            // Out of iterations with work left over.
            trace.verdict = Verdict::DepthExhausted;
            trace.exhausted = raw.iter().map(|r| r.0.clone()).collect();
            for (id, ..) in &raw {
                root.find_mut(id).expect("leaf exists").status = NodeStatus::Failed;
            }
            break;
        }
        iteration += 1;

        let vectors: Vec<_> = raw.iter().map(|(_, d, k, c)| embed(d, k, c)).collect();
        let report = similarity::report(&vectors, &skill_ids, &skill_vectors, config.threshold)
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        let flagged_cells = similarity::decide(&report.matrix, config.threshold).count_flagged();

        let mut record = IterationRecord {
            iteration,
            embedded: raw.iter().map(|r| r.0.clone()).collect(),
            scores: Vec::with_capacity(raw.len()),
            flagged_cells,
            flagged: Vec::new(),
            expansions: Vec::new(),
        };
        for ((id, text, ..), a) in raw.iter().zip(&report.subtasks) {
            let node = root.find_mut(id).expect("leaf exists");
            node.score = Some(a.best_score);
            if a.needs_decomposition {
                record.flagged.push(id.clone());
            } else {
                node.status = NodeStatus::Bound;
                node.bound_skill = Some(a.best_skill.clone());
            }
            record.scores.push(NodeScore {
                node_id: id.clone(),
                text: text.clone(),
                best_skill: a.best_skill.clone(),
                best_score: a.best_score,
                flagged: a.needs_decomposition,
            });
        }

        let mut exhausted = Vec::new();
        let mut failure = None;
        for id in &record.flagged {
            let node = root.find_mut(id).expect("leaf exists");
            if node.depth >= config.max_depth {
                node.status = NodeStatus::Failed;
                exhausted.push(id.clone());
                continue;
            }
            match decompose(planner, &node.id, &node.description, &node.context, &ctx, node.depth, config.max_depth) {
                Ok(children) => {
                    let repeated = node.fixed_point && children.first().is_some_and(|c| c.fixed_point);
                    record.expansions.push(expansion(&node.id, &children));
                    if repeated {
                        node.status = NodeStatus::Failed;
                        exhausted.push(id.clone());
                    } else {
                        node.status = NodeStatus::NeedsDecomposition;
                        node.children = children;
                    }
                }
                Err(e) => {
                    node.status = NodeStatus::Failed;
                    failure = Some(PlannerFailure {
                        node_id: id.clone(),
                        message: e.to_string(),
                        raw: e.raw().map(str::to_owned),
                    });
                    break;
                }
            }
        }
        trace.iterations.push(record);

        if let Some(f) = failure {
            trace.verdict = Verdict::PlannerFailed;
            trace.planner_error = Some(f);
            break;
        }
        if !exhausted.is_empty() {
            trace.verdict = Verdict::DepthExhausted;
            trace.exhausted = exhausted;
            break;
        }
    }

    assert!(trace.iterations.len() as u32 <= config.max_iterations, "refinement exceeded max_iterations");
    Ok((finish(task, policy, root, trace.verdict), trace))
}

fn finish(task: &TaskSpec, policy: &RobotPolicy, root: SubtaskNode, verdict: Verdict) -> DecompositionTree {
    DecompositionTree {
        task_id: task.id.clone(),
        robot_id: policy.robot_id.clone(),
        robot_class: policy.robot_class,
        verdict,
        root,
    }
}

/// Env object whose class shares the most tokens with `text`; ties go to
/// the one nearest `robot_id`, then to the lowest id.
fn best_object<'e>(text: &str, env: &'e EnvironmentSnapshot, robot_id: &str) -> Option<&'e ObjectSighting> {
    let words = token_strings(text);
    let robot_pos = env.robot(robot_id).map(|r| r.position);
    env.objects
        .iter()
        .filter_map(|o| {
            let mut class = token_strings(&o.class);
            class.sort();
            class.dedup();
            let overlap = class.iter().filter(|t| words.contains(t)).count();
            (overlap > 0).then(|| (overlap, robot_pos.map_or(0.0, |p| distance(p, o.position)), o))
        })
        .min_by(|a, b| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)).then_with(|| a.2.id.cmp(&b.2.id)))
        .map(|(.., o)| o)
}

fn first_number(text: &str) -> Option<f64> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-')))
        .find_map(|w| w.parse::<f64>().ok().filter(|v| v.is_finite()))
}

/// Fills the skill's parameters from the node text and the environment.
pub fn ground_args(
    node: &SubtaskNode,
    skill: &SkillDescriptor,
    env: &EnvironmentSnapshot,
    robot_id: &str,
) -> Result<Vec<ArgValue>, OrchestratorError> {
    if node.status != NodeStatus::Bound {
        return Err(OrchestratorError::Precondition(format!("node `{}` is not bound", node.id)));
    }
    skill
        .params
        .iter()
        .map(|p| match p.kind {
            ParamKind::Coordinate2d | ParamKind::ObjectRef => {
                let obj =
                    best_object(&node.description, env, robot_id).ok_or_else(|| OrchestratorError::Grounding {
                        node: node.id.clone(),
                        reason: format!("no known object matches `{}` for parameter `{}`", node.description, p.name),
                    })?;
                Ok(if p.kind == ParamKind::Coordinate2d {
                    ArgValue::Coordinate2d(obj.position)
                } else {
                    ArgValue::ObjectRef(obj.id.clone())
                })
            }
            ParamKind::Scalar => Ok(ArgValue::Scalar(first_number(&node.description).unwrap_or(0.0))),
            ParamKind::Text => Ok(ArgValue::Text(node.description.clone())),
        })
        .collect()
}

/// One instruction per bound leaf, depth-first left-to-right.
pub fn emit_sequences(
    tree: &DecompositionTree,
    env: &EnvironmentSnapshot,
    registry: &SkillRegistry,
) -> Result<Vec<InstructionSequence>, OrchestratorError> {
    if tree.verdict != Verdict::Converged {
        return Err(OrchestratorError::Precondition(format!("tree verdict is {}", tree.verdict.as_str())));
    }
    let mut instructions = Vec::new();
    for (i, leaf) in tree.leaves().into_iter().enumerate() {
        let skill_id = match (&leaf.status, &leaf.bound_skill) {
            (NodeStatus::Bound, Some(id)) => id,
            _ => return Err(OrchestratorError::Precondition(format!("leaf `{}` is not bound", leaf.id))),
        };
        let skill = registry
            .get(skill_id)
            .ok_or_else(|| OrchestratorError::Precondition(format!("skill `{skill_id}` not registered")))?;
        let args = ground_args(leaf, skill, env, &tree.robot_id)?;
        instructions.push(Instruction {
            seq_index: i,
            robot_id: tree.robot_id.clone(),
            skill_id: skill_id.clone(),
            args,
        });
    }
    Ok(vec![InstructionSequence::new(tree.robot_id.clone(), instructions)])
}

/// Writes grounded arguments back onto the tree's bound leaves.
pub fn annotate_args(tree: &mut DecompositionTree, sequences: &[InstructionSequence]) {
    let ids: Vec<String> = tree.leaves().iter().map(|n| n.id.clone()).collect();
    if let Some(seq) = sequences.iter().find(|s| s.robot_id == tree.robot_id) {
        for (id, ins) in ids.iter().zip(&seq.instructions) {
            if let Some(node) = tree.root.find_mut(id) {
                node.bound_args = Some(ins.args.clone());
            }
        }
    }
}

/// Post-hoc check of a converged refinement: every leaf is bound, its score
/// reaches the threshold, and its skill serves the robot's class.
pub fn check_soundness(
    tree: &DecompositionTree,
    trace: &RefinementTrace,
    registry: &SkillRegistry,
) -> Result<(), String> {
    if trace.verdict != Verdict::Converged {
        return Ok(());
    }
    for leaf in tree.leaves() {
        let skill = leaf.bound_skill.as_deref().ok_or_else(|| format!("leaf {} unbound", leaf.id))?;
        let recorded = trace
            .iterations
            .iter()
            .flat_map(|it| &it.scores)
            .find(|s| s.node_id == leaf.id)
            .ok_or_else(|| format!("leaf {} has no recorded score", leaf.id))?;
        if recorded.best_score < trace.threshold || recorded.best_skill != skill {
            return Err(format!("leaf {} bound with score {} to {}", leaf.id, recorded.best_score, skill));
        }
        let desc = registry.get(skill).ok_or_else(|| format!("unknown skill {skill}"))?;
        if !desc.supports(tree.robot_class) {
            return Err(format!("skill {skill} not available to {}", tree.robot_class));
        }
    }
    Ok(())
}

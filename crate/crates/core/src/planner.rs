//! Decomposition engines.
//!
//! [`MockPlanner`] expands text with a keyword-matched template table and is
//! what every test runs against. [`RemotePlanner`] renders a prompt and asks a
//! language model over HTTP (`POST {"prompt": ...}` returning `{"text": ...}`).
//!
//! When no template matches, the mock returns the parent text unchanged as its
//! only child. The orchestrator detects that fixed point and decides when to
//! give up; the planner never fails for lack of a template.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::instruction::ArgValue;
use crate::skills::SkillDescriptor;
use crate::vectorizer::token_strings;
use crate::world::{distance, EnvironmentSnapshot, ObjectSighting};

const PROMPT_TEMPLATE: &str = include_str!("../data/prompt.txt");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub description: String,
    pub issued_by: String,
    #[serde(default)]
    pub constraints: Vec<String>,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, description: impl Into<String>) -> Self {
        Self { id: id.into(), description: description.into(), issued_by: "operator".into(), constraints: Vec::new() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.description.trim().is_empty() {
            return Err(format!("task `{}` has an empty description", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Raw,
    Bound,
    NeedsDecomposition,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskNode {
    pub id: String,
    pub description: String,
    pub keywords: Vec<String>,
    pub context: String,
    pub depth: u32,
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_skill: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound_args: Option<Vec<ArgValue>>,
    /// Best alignment score seen for this node, once it has been aligned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// Set when the planner handed the parent text back unchanged.
    #[serde(default)]
    pub fixed_point: bool,
    #[serde(default)]
    pub children: Vec<SubtaskNode>,
}

impl SubtaskNode {
    /// A raw node whose keywords are the distinct tokens of `description`.
    pub fn new(id: impl Into<String>, description: impl Into<String>, context: impl Into<String>, depth: u32) -> Self {
        let description = description.into();
        let mut keywords: Vec<String> = Vec::new();
        for t in token_strings(&description) {
            if !keywords.contains(&t) {
                keywords.push(t);
            }
        }
        Self {
            id: id.into(),
            description,
            keywords,
            context: context.into(),
            depth,
            status: NodeStatus::Raw,
            bound_skill: None,
            bound_args: None,
            score: None,
            fixed_point: false,
            children: Vec::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Leaves in depth-first, left-to-right order.
    pub fn leaves(&self) -> Vec<&SubtaskNode> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a SubtaskNode>) {
        if self.is_leaf() {
            out.push(self);
        } else {
            for c in &self.children {
                c.collect_leaves(out);
            }
        }
    }

    pub fn find_mut(&mut self, id: &str) -> Option<&mut SubtaskNode> {
        if self.id == id {
            return Some(self);
        }
        self.children.iter_mut().find_map(|c| c.find_mut(id))
    }

    pub fn find(&self, id: &str) -> Option<&SubtaskNode> {
        if self.id == id {
            return Some(self);
        }
        self.children.iter().find_map(|c| c.find(id))
    }

    /// Every node, pre-order.
    pub fn walk(&self) -> Vec<&SubtaskNode> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.walk());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlannerError {
    #[error("planner transport failure: {message}")]
    Transport { message: String, raw: Option<String> },
    #[error("malformed planner response: {reason}")]
    Malformed { reason: String, raw: String },
    #[error("planner output contained no subtasks")]
    Empty { raw: String },
    #[error("depth {depth} is at the configured maximum {max_depth}")]
    DepthLimit { depth: u32, max_depth: u32 },
    #[error("template set: {0}")]
    Templates(String),
}

impl PlannerError {
    /// Raw model output, when there was any.
    pub fn raw(&self) -> Option<&str> {
        match self {
            PlannerError::Transport { raw, .. } => raw.as_deref(),
            PlannerError::Malformed { raw, .. } | PlannerError::Empty { raw } => Some(raw),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub pattern: Vec<String>,
    pub expansion: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannerTemplateSet {
    templates: Vec<Template>,
}

impl PlannerTemplateSet {
    pub fn new(templates: Vec<Template>) -> Result<Self, PlannerError> {
        let mut patterns = BTreeSet::new();
        for (i, t) in templates.iter().enumerate() {
            let key: BTreeSet<String> = t.pattern.iter().flat_map(|p| token_strings(p)).collect();
            if key.is_empty() {
                return Err(PlannerError::Templates(format!("template {i} has an empty pattern")));
            }
            if t.expansion.is_empty() || t.expansion.iter().any(|l| l.trim().is_empty()) {
                return Err(PlannerError::Templates(format!("template {i} has an empty expansion")));
            }
            if !patterns.insert(key) {
                return Err(PlannerError::Templates(format!("template {i} repeats an earlier pattern")));
            }
        }
        Ok(Self { templates })
    }

    pub fn from_json(json: &str) -> Result<Self, PlannerError> {
        let templates: Vec<Template> =
            serde_json::from_str(json).map_err(|e| PlannerError::Templates(e.to_string()))?;
        Self::new(templates)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PlannerError> {
        let path = path.as_ref();
        let raw =
            std::fs::read_to_string(path).map_err(|e| PlannerError::Templates(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
    }

    pub fn bundled() -> Self {
        Self::from_json(include_str!("../data/templates.json")).expect("bundled templates are valid")
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    /// Template with the largest pattern overlap with `text`; ties go to the
    /// earliest template. `None` when nothing overlaps.
    pub fn best_match(&self, text: &str) -> Option<&Template> {
        let words: BTreeSet<String> = token_strings(text).into_iter().collect();
        let mut best: Option<(usize, &Template)> = None;
        for t in &self.templates {
            let pattern: BTreeSet<String> = t.pattern.iter().flat_map(|p| token_strings(p)).collect();
            let overlap = pattern.intersection(&words).count();
            if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, t));
            }
        }
        best.map(|(_, t)| t)
    }
}

/// What a planner may look at besides the parent text.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub env: &'a EnvironmentSnapshot,
    pub skills: &'a [&'a SkillDescriptor],
    /// Robot the plan is for; used to break ties by distance.
    pub robot_id: Option<&'a str>,
}

pub trait Planner: Send + Sync {
    /// Proposes child subtask texts for `parent_text`, in execution order.
    fn propose(&self, parent_text: &str, ctx: &PlanContext<'_>) -> Result<Vec<String>, PlannerError>;
}

#[derive(Debug, Clone)]
pub struct MockPlanner {
    templates: PlannerTemplateSet,
}

impl MockPlanner {
    pub fn new(templates: PlannerTemplateSet) -> Self {
        Self { templates }
    }
}

impl Planner for MockPlanner {
    fn propose(&self, parent_text: &str, ctx: &PlanContext<'_>) -> Result<Vec<String>, PlannerError> {
        let Some(template) = self.templates.best_match(parent_text) else {
            return Ok(vec![parent_text.to_owned()]);
        };
        let ranked = rank_objects(parent_text, ctx.env, ctx.robot_id);
        let object = ranked.first().map(|o| o.class.as_str()).unwrap_or("");
        let location = ranked.get(1).map(|o| o.class.as_str()).unwrap_or("");
        Ok(template
            .expansion
            .iter()
            .map(|line| {
                let filled = line.replace("{object}", object).replace("{location}", location);
                filled.split_whitespace().collect::<Vec<_>>().join(" ")
            })
            .collect())
    }
}

/// Env objects whose class shares at least one token with `text`, best
/// first: most shared tokens, then earliest mention in the text, then
/// nearest to `robot_id` (when its pose is known), then id.
pub fn rank_objects<'e>(text: &str, env: &'e EnvironmentSnapshot, robot_id: Option<&str>) -> Vec<&'e ObjectSighting> {
    let words = token_strings(text);
    let robot_pos = robot_id.and_then(|id| env.robot(id)).map(|r| r.position);
    let mut scored: Vec<(usize, usize, f64, &ObjectSighting)> = env
        .objects
        .iter()
        .filter_map(|o| {
            let class: BTreeSet<String> = token_strings(&o.class).into_iter().collect();
            let overlap = class.iter().filter(|t| words.contains(t)).count();
            if overlap == 0 {
                return None;
            }
            let first = words.iter().position(|w| class.contains(w)).unwrap_or(usize::MAX);
            let dist = robot_pos.map_or(0.0, |p| distance(p, o.position));
            Some((overlap, first, dist, o))
        })
        .collect();
    scored
        .sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.total_cmp(&b.2)).then_with(|| a.3.id.cmp(&b.3.id)));
    scored.into_iter().map(|s| s.3).collect()
}

/// HTTP client for a hosted language model.
#[derive(Debug, Clone)]
pub struct RemotePlanner {
    url: String,
    timeout: Duration,
}

#[derive(Serialize)]
struct PromptRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct PromptResponse {
    text: String,
}

impl RemotePlanner {
    pub fn new(url: impl Into<String>, timeout_ms: u64) -> Self {
        Self { url: url.into(), timeout: Duration::from_millis(timeout_ms) }
    }
}

impl Planner for RemotePlanner {
    fn propose(&self, parent_text: &str, ctx: &PlanContext<'_>) -> Result<Vec<String>, PlannerError> {
        let prompt = render_prompt(parent_text, ctx.env, ctx.skills);
        let agent = ureq::AgentBuilder::new().timeout(self.timeout).build();
        let body = match agent.post(&self.url).send_json(PromptRequest { prompt: &prompt }) {
            Ok(resp) => {
                resp.into_string().map_err(|e| PlannerError::Transport { message: e.to_string(), raw: None })?
            }
            Err(ureq::Error::Status(code, resp)) => {
                let raw = resp.into_string().ok();
                return Err(PlannerError::Transport { message: format!("HTTP status {code}"), raw });
            }
            Err(e) => return Err(PlannerError::Transport { message: e.to_string(), raw: None }),
        };
        let parsed: PromptResponse = serde_json::from_str(&body)
            .map_err(|e| PlannerError::Malformed { reason: e.to_string(), raw: body.clone() })?;
        parse_planner_output(&parsed.text)
    }
}

/// Children of `parent_id` at `depth + 1`, ids `"{parent_id}.{k}"` from 1.
/// A single child identical to the parent text is marked as a fixed point.
pub fn decompose(
    planner: &dyn Planner,
    parent_id: &str,
    parent_text: &str,
    context: &str,
    ctx: &PlanContext<'_>,
    depth: u32,
    max_depth: u32,
) -> Result<Vec<SubtaskNode>, PlannerError> {
    if depth >= max_depth {
        return Err(PlannerError::DepthLimit { depth, max_depth });
    }
    let texts = planner.propose(parent_text, ctx)?;
    if texts.is_empty() {
        return Err(PlannerError::Empty { raw: String::new() });
    }
    let fixed_point = texts.len() == 1 && texts[0] == parent_text;
    Ok(texts
        .into_iter()
        .enumerate()
        .map(|(k, text)| {
            let mut node = SubtaskNode::new(format!("{parent_id}.{}", k + 1), text, context, depth + 1);
            node.fixed_point = fixed_point;
            node
        })
        .collect())
}

/// Deterministic prompt: parent text, a compact environment summary and the
/// skill list, rendered into the bundled template.
pub fn render_prompt(parent_text: &str, env: &EnvironmentSnapshot, skills: &[&SkillDescriptor]) -> String {
    let mut environment = String::new();
    for o in &env.objects {
        environment
            .push_str(&format!("- object {}: {} at ({:.1}, {:.1})\n", o.id, o.class, o.position[0], o.position[1]));
    }
    for r in &env.robots {
        environment.push_str(&format!(
            "- robot {}: {} at ({:.1}, {:.1}) altitude {:.1}\n",
            r.id, r.class, r.position[0], r.position[1], r.altitude
        ));
    }
    let mut skill_lines = String::new();
    for s in skills {
        let params: Vec<String> = s
            .params
            .iter()
            .map(|p| format!("{} {}", p.name, serde_json::to_value(p.kind).unwrap().as_str().unwrap()))
            .collect();
        skill_lines.push_str(&format!("- {}: {} [{}]\n", s.id, s.description, params.join(", ")));
    }
    PROMPT_TEMPLATE
        .replace("{parent}", parent_text.trim())
        .replace("{environment}", environment.trim_end())
        .replace("{skills}", skill_lines.trim_end())
}

/// One subtask per non-empty line, with `-`, `*` and `N.` / `N)` list
/// markers stripped.
pub fn parse_planner_output(raw: &str) -> Result<Vec<String>, PlannerError> {
    let lines: Vec<String> =
        raw.lines().map(strip_marker).map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect();
    if lines.is_empty() {
        return Err(PlannerError::Empty { raw: raw.to_owned() });
    }
    Ok(lines)
}

fn strip_marker(line: &str) -> &str {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix('-').or_else(|| line.strip_prefix('*')) {
        return rest;
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix('.').or_else(|| line[digits..].strip_prefix(')')) {
            return rest;
        }
    }
    line
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skills::RobotClass;
    use crate::skills::SkillRegistry;
    use crate::world::RobotPose;

    fn env() -> EnvironmentSnapshot {
        EnvironmentSnapshot {
            objects: vec![
                ObjectSighting { id: "box1".into(), class: "red box".into(), position: [6.0, 8.0] },
                ObjectSighting { id: "dropoff1".into(), class: "drop off".into(), position: [6.0, 2.0] },
            ],
            robots: vec![RobotPose {
                id: "quad1".into(),
                class: RobotClass::Quadruped,
                position: [0.0, 0.0],
                altitude: 0.0,
            }],
            as_of_tick: 0,
        }
    }

    fn ctx<'a>(env: &'a EnvironmentSnapshot, skills: &'a [&'a SkillDescriptor]) -> PlanContext<'a> {
        PlanContext { env, skills, robot_id: Some("quad1") }
    }

    fn texts(nodes: &[SubtaskNode]) -> Vec<&str> {
        nodes.iter().map(|n| n.description.as_str()).collect()
    }

    #[test]
    fn fetch_template_expands_per_fixture() {
        let planner = MockPlanner::new(PlannerTemplateSet::bundled());
        let env = env();
        let nodes = decompose(&planner, "0", "fetch the red box", "", &ctx(&env, &[]), 0, 4).unwrap();
        assert_eq!(texts(&nodes), ["move to red box", "pick up red box", "deliver red box to drop off"]);
        assert!(nodes.iter().all(|n| n.depth == 1 && n.status == NodeStatus::Raw && !n.fixed_point));
        assert_eq!(nodes.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(), ["0.1", "0.2", "0.3"]);

        let nodes = decompose(&planner, "0.3", "deliver red box to drop off", "", &ctx(&env, &[]), 1, 4).unwrap();
        assert_eq!(texts(&nodes), ["move to drop off", "place down red box"]);
    }

    #[test]
    fn unmatched_parent_is_a_fixed_point() {
        let planner = MockPlanner::new(PlannerTemplateSet::bundled());
        let env = env();
        let nodes = decompose(&planner, "0", "juggle flaming torches", "", &ctx(&env, &[]), 0, 4).unwrap();
        assert_eq!(texts(&nodes), ["juggle flaming torches"]);
        assert!(nodes[0].fixed_point);
    }

    #[test]
    fn decompose_is_deterministic() {
        let planner = MockPlanner::new(PlannerTemplateSet::bundled());
        let env = env();
        let a = decompose(&planner, "0", "fetch the red box", "c", &ctx(&env, &[]), 0, 4).unwrap();
        let b = decompose(&planner, "0", "fetch the red box", "c", &ctx(&env, &[]), 0, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn depth_limit_is_enforced() {
        let planner = MockPlanner::new(PlannerTemplateSet::bundled());
        let env = env();
        let err = decompose(&planner, "0", "fetch the red box", "", &ctx(&env, &[]), 4, 4).unwrap_err();
        assert_eq!(err, PlannerError::DepthLimit { depth: 4, max_depth: 4 });
    }

    #[test]
    fn template_ties_go_to_file_order() {
        let set = PlannerTemplateSet::new(vec![
            Template { pattern: vec!["go".into()], expansion: vec!["first".into()] },
            Template { pattern: vec!["run".into()], expansion: vec!["second".into()] },
            Template { pattern: vec!["go".into(), "run".into(), "fast".into()], expansion: vec!["third".into()] },
        ])
        .unwrap();
        assert_eq!(set.best_match("go now").unwrap().expansion, ["first"]);
        assert_eq!(set.best_match("go run").unwrap().expansion, ["third"]);
        assert!(set.best_match("sleep").is_none());
    }

    #[test]
    fn template_set_validation() {
        let dup = vec![
            Template { pattern: vec!["go".into()], expansion: vec!["a".into()] },
            Template { pattern: vec!["Go".into()], expansion: vec!["b".into()] },
        ];
        assert!(PlannerTemplateSet::new(dup).is_err());
        let empty = vec![Template { pattern: vec!["go".into()], expansion: vec![] }];
        assert!(PlannerTemplateSet::new(empty).is_err());
    }

    #[test]
    fn object_ranking_prefers_overlap_then_mention_order() {
        let env = env();
        let ranked = rank_objects("deliver red box to drop off", &env, Some("quad1"));
        assert_eq!(ranked.iter().map(|o| o.id.as_str()).collect::<Vec<_>>(), ["box1", "dropoff1"]);
        let ranked = rank_objects("go to the drop off near the red box", &env, None);
        assert_eq!(ranked[0].id, "dropoff1");
        assert!(rank_objects("nothing here", &env, None).is_empty());
    }

    #[test]
    fn parse_output_examples() {
        assert_eq!(parse_planner_output("- move to door\n- open door").unwrap(), ["move to door", "open door"]);
        assert_eq!(parse_planner_output("1. takeoff\n2. survey area\n").unwrap(), ["takeoff", "survey area"]);
        assert!(matches!(parse_planner_output("\n\n"), Err(PlannerError::Empty { .. })));
        assert_eq!(parse_planner_output("  * land  \n3) hover").unwrap(), ["land", "hover"]);
    }

    #[test]
    fn prompt_with_empty_inputs() {
        let p = render_prompt("do it", &EnvironmentSnapshot::default(), &[]);
        assert!(p.contains("## Task\ndo it\n"));
        assert!(p.contains("## Environment\n\n\n## Skills\n"));
        assert!(p.trim_end().ends_with("## Skills"));
    }

    #[test]
    fn prompt_lists_every_skill_once() {
        let registry = SkillRegistry::bundled();
        let skills: Vec<&SkillDescriptor> = registry.iter().collect();
        let env = env();
        let p = render_prompt("fetch the red box", &env, &skills);
        assert_eq!(p, render_prompt("fetch the red box", &env, &skills));
        for s in &skills {
            assert_eq!(p.matches(&format!("- {}:", s.id)).count(), 1, "{}", s.id);
        }
        assert!(p.contains("- object box1: red box at (6.0, 8.0)"));
    }

    #[test]
    fn node_keywords_are_distinct_tokens() {
        let n = SubtaskNode::new("x", "Move to the box, the red box", "", 0);
        assert_eq!(n.keywords, ["move", "to", "the", "box", "red"]);
    }

    proptest::proptest! {
        #[test]
        fn parsed_lines_are_never_empty(raw in "[-*0-9. a-z\n]{0,80}") {
            if let Ok(lines) = parse_planner_output(&raw) {
                proptest::prop_assert!(lines.iter().all(|l| !l.is_empty()));
            }
        }
    }
}

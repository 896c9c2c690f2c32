//! Cloud tier: turns a task and a fleet into phased per-robot policies.
//!
//! Rules are matched on task keywords (largest overlap wins, ties go to the
//! earlier rule). A task no rule matches gets the built-in default: every
//! drone surveys the area, then every quadruped carries out the task text.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::planner::TaskSpec;
use crate::skills::RobotClass;
use crate::vectorizer::token_strings;

/// Placeholder in a rule goal replaced by the task description.
pub const TASK_PLACEHOLDER: &str = "{task}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetMember {
    pub id: String,
    pub class: RobotClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FleetDescriptor {
    pub robots: Vec<FleetMember>,
}

impl FleetDescriptor {
    pub fn new(robots: impl IntoIterator<Item = (String, RobotClass)>) -> Self {
        Self { robots: robots.into_iter().map(|(id, class)| FleetMember { id, class }).collect() }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.robots.is_empty() {
            return Err(StrategyError::EmptyFleet);
        }
        let mut seen = BTreeSet::new();
        for r in &self.robots {
            if !seen.insert(&r.id) {
                return Err(StrategyError::DuplicateRobot(r.id.clone()));
            }
        }
        Ok(())
    }

    pub fn of_class(&self, class: RobotClass) -> Vec<&FleetMember> {
        self.robots.iter().filter(|r| r.class == class).collect()
    }

    pub fn class_of(&self, id: &str) -> Option<RobotClass> {
        self.robots.iter().find(|r| r.id == id).map(|r| r.class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseRule {
    pub name: String,
    pub robot_class: RobotClass,
    pub goal: String,
    #[serde(default)]
    pub depends_on: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub pattern: Vec<String>,
    pub phases: Vec<PhaseRule>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleSet {
    rules: Vec<Rule>,
}

impl RuleSet {
    pub fn new(rules: Vec<Rule>) -> Result<Self, StrategyError> {
        for (i, r) in rules.iter().enumerate() {
            if r.pattern.iter().all(|p| token_strings(p).is_empty()) {
                return Err(StrategyError::Rules(format!("rule {i} has an empty pattern")));
            }
            check_phase_order(&r.phases).map_err(|e| StrategyError::Rules(format!("rule {i}: {e}")))?;
        }
        Ok(Self { rules })
    }

    pub fn from_json(json: &str) -> Result<Self, StrategyError> {
        let rules: Vec<Rule> = serde_json::from_str(json).map_err(|e| StrategyError::Rules(e.to_string()))?;
        Self::new(rules)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StrategyError> {
        let path = path.as_ref();
        let raw =
            std::fs::read_to_string(path).map_err(|e| StrategyError::Rules(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
    }

    pub fn bundled() -> Self {
        Self::from_json(include_str!("../data/rules.json")).expect("bundled rules are valid")
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    fn matching(&self, text: &str) -> Option<&Rule> {
        let words: BTreeSet<String> = token_strings(text).into_iter().collect();
        let mut best: Option<(usize, &Rule)> = None;
        for r in &self.rules {
            let pattern: BTreeSet<String> = r.pattern.iter().flat_map(|p| token_strings(p)).collect();
            let overlap = pattern.intersection(&words).count();
            if overlap > 0 && best.is_none_or(|(b, _)| overlap > b) {
                best = Some((overlap, r));
            }
        }
        best.map(|(_, r)| r)
    }
}

/// Survey with every drone, then hand the task to every quadruped.
pub fn default_phases() -> Vec<PhaseRule> {
    vec![
        PhaseRule {
            name: "survey".into(),
            robot_class: RobotClass::Drone,
            goal: "survey the area".into(),
            depends_on: vec![],
        },
        PhaseRule {
            name: "execute".into(),
            robot_class: RobotClass::Quadruped,
            goal: TASK_PLACEHOLDER.into(),
            depends_on: vec!["survey".into()],
        },
    ]
}

fn check_phase_order(phases: &[PhaseRule]) -> Result<(), String> {
    let mut earlier = BTreeSet::new();
    for p in phases {
        for d in &p.depends_on {
            if !earlier.contains(d.as_str()) {
                return Err(format!("phase `{}` depends on `{d}`, which is not an earlier phase", p.name));
            }
        }
        if !earlier.insert(p.name.as_str()) {
            return Err(format!("duplicate phase `{}`", p.name));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub robot_ids: Vec<String>,
    pub goal: String,
    pub depends_on: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobotPolicy {
    pub robot_id: String,
    pub robot_class: RobotClass,
    pub goal: String,
    pub phase: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub task_id: String,
    pub phases: Vec<Phase>,
    pub policies: Vec<RobotPolicy>,
}

impl Strategy {
    pub fn policies_for(&self, phase: &str) -> impl Iterator<Item = &RobotPolicy> + '_ {
        let phase = phase.to_owned();
        self.policies.iter().filter(move |p| p.phase == phase)
    }

    /// Dependencies point only at earlier phases, policies name existing
    /// phases, and every robot belongs to `fleet`.
    pub fn check(&self, fleet: &FleetDescriptor) -> Result<(), String> {
        let mut earlier = BTreeSet::new();
        for p in &self.phases {
            for d in &p.depends_on {
                if !earlier.contains(d.as_str()) {
                    return Err(format!("phase `{}` depends on unknown or later `{d}`", p.name));
                }
            }
            for r in &p.robot_ids {
                if fleet.class_of(r).is_none() {
                    return Err(format!("phase `{}` uses robot `{r}` outside the fleet", p.name));
                }
            }
            earlier.insert(p.name.as_str());
        }
        for pol in &self.policies {
            if !earlier.contains(pol.phase.as_str()) {
                return Err(format!("policy for `{}` names unknown phase `{}`", pol.robot_id, pol.phase));
            }
            if pol.goal.trim().is_empty() {
                return Err(format!("policy for `{}` has an empty goal", pol.robot_id));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StrategyError {
    #[error("fleet is empty")]
    EmptyFleet,
    #[error("robot `{0}` listed twice in the fleet")]
    DuplicateRobot(String),
    #[error("fleet has no {0}, which the matched rule requires")]
    MissingClass(RobotClass),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("rule file: {0}")]
    Rules(String),
}

pub fn generate_strategy(task: &TaskSpec, fleet: &FleetDescriptor, rules: &RuleSet) -> Result<Strategy, StrategyError> {
    fleet.validate()?;
    task.validate().map_err(StrategyError::InvalidTask)?;
    let default;
    let phase_rules = match rules.matching(&task.description) {
        Some(rule) => &rule.phases,
        None => {
            default = default_phases();
            &default
        }
    };
    let mut phases = Vec::with_capacity(phase_rules.len());
    let mut policies = Vec::new();
    for rule in phase_rules {
        let members = fleet.of_class(rule.robot_class);
        if members.is_empty() {
            return Err(StrategyError::MissingClass(rule.robot_class));
        }
        let goal = rule.goal.replace(TASK_PLACEHOLDER, task.description.trim());
        for m in &members {
            policies.push(RobotPolicy {
                robot_id: m.id.clone(),
                robot_class: m.class,
                goal: goal.clone(),
                phase: rule.name.clone(),
            });
        }
        phases.push(Phase {
            name: rule.name.clone(),
            robot_ids: members.iter().map(|m| m.id.clone()).collect(),
            goal,
            depends_on: rule.depends_on.clone(),
        });
    }
    Ok(Strategy { task_id: task.id.clone(), phases, policies })
}

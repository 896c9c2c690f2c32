//! Registry of encapsulated atomic robot skills.
//!
//! Alignment only ever sees a skill's text (description and keywords). The
//! executable behaviour lives in [`crate::world`], keyed by skill id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::vectorizer::{embed, FeatureVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobotClass {
    Quadruped,
    Drone,
}

impl RobotClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RobotClass::Quadruped => "quadruped",
            RobotClass::Drone => "drone",
        }
    }
}

impl fmt::Display for RobotClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RobotClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quadruped" => Ok(RobotClass::Quadruped),
            "drone" => Ok(RobotClass::Drone),
            other => Err(format!("unknown robot class `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Scalar,
    Coordinate2d,
    ObjectRef,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillDescriptor {
    pub id: String,
    pub name: String,
    pub description: String,
    pub keywords: Vec<String>,
    pub params: Vec<ParamSpec>,
    pub robot_classes: BTreeSet<RobotClass>,
}

impl SkillDescriptor {
    pub fn supports(&self, class: RobotClass) -> bool {
        self.robot_classes.contains(&class)
    }

    pub fn vector(&self) -> FeatureVector {
        embed(&self.description, &self.keywords, "")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("registry schema: {0}")]
    Schema(#[from] serde_json::Error),
    #[error("skill `{id}`: {reason}")]
    InvalidSkill { id: String, reason: String },
}

/// Immutable after construction; the vector cache always matches a fresh
/// [`embed`] of each skill.
#[derive(Debug, Clone)]
pub struct SkillRegistry {
    skills: BTreeMap<String, SkillDescriptor>,
    vectors: BTreeMap<String, FeatureVector>,
    // File order, used by `to_json` so that load/serialize round-trips.
    order: Vec<String>,
}

impl SkillRegistry {
    pub fn from_skills(skills: Vec<SkillDescriptor>) -> Result<Self, LoadError> {
        let mut map = BTreeMap::new();
        let mut order = Vec::with_capacity(skills.len());
        for skill in skills {
            validate(&skill)?;
            if map.contains_key(&skill.id) {
                return Err(LoadError::InvalidSkill { id: skill.id, reason: "duplicate id".into() });
            }
            order.push(skill.id.clone());
            map.insert(skill.id.clone(), skill);
        }
        let vectors = map.iter().map(|(id, s)| (id.clone(), s.vector())).collect();
        Ok(Self { skills: map, vectors, order })
    }

    pub fn from_json(json: &str) -> Result<Self, LoadError> {
        let skills: Vec<SkillDescriptor> = serde_json::from_str(json)?;
        Self::from_skills(skills)
    }

    /// The ten-skill registry shipped with the crate.
    pub fn bundled() -> Self {
        Self::from_json(include_str!("../data/skills.json")).expect("bundled registry is valid")
    }

    pub fn to_json(&self) -> String {
        let skills: Vec<&SkillDescriptor> = self.order.iter().map(|id| &self.skills[id]).collect();
        serde_json::to_string_pretty(&skills).expect("skills serialize")
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&SkillDescriptor> {
        self.skills.get(id)
    }

    pub fn vector(&self, id: &str) -> Option<&FeatureVector> {
        self.vectors.get(id)
    }

    /// All skills ordered by id.
    pub fn iter(&self) -> impl Iterator<Item = &SkillDescriptor> {
        self.skills.values()
    }
}

pub fn load_registry(path: impl AsRef<Path>) -> Result<SkillRegistry, LoadError> {
    let path = path.as_ref();
    let raw =
        std::fs::read_to_string(path).map_err(|source| LoadError::Io { path: path.display().to_string(), source })?;
    SkillRegistry::from_json(&raw)
}

/// Skills usable by `class`, ordered by id.
pub fn skills_for_class(registry: &SkillRegistry, class: RobotClass) -> Vec<&SkillDescriptor> {
    registry.iter().filter(|s| s.supports(class)).collect()
}

fn validate(skill: &SkillDescriptor) -> Result<(), LoadError> {
    let fail = |reason: &str| Err(LoadError::InvalidSkill { id: skill.id.clone(), reason: reason.into() });
    if skill.id.trim().is_empty() {
        return fail("empty id");
    }
    if skill.description.trim().is_empty() {
        return fail("empty description");
    }
    if skill.robot_classes.is_empty() {
        return fail("robot_classes is empty");
    }
    let mut names = BTreeSet::new();
    for p in &skill.params {
        if !names.insert(p.name.as_str()) {
            return Err(LoadError::InvalidSkill {
                id: skill.id.clone(),
                reason: format!("duplicate param `{}`", p.name),
            });
        }
    }
    Ok(())
}

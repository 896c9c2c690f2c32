//! Bundled end-to-end scenarios.

use serde::{Deserialize, Serialize};

use crate::planner::TaskSpec;

pub const BUNDLED: [&str; 3] = ["survey_and_fetch", "patrol", "unmatched_task"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Name of a bundled world.
    pub world: String,
    pub task: TaskSpec,
}

impl Scenario {
    pub fn bundled(name: &str) -> Option<Self> {
        let raw = match name {
            "survey_and_fetch" => include_str!("../data/scenarios/survey_and_fetch.json"),
            "patrol" => include_str!("../data/scenarios/patrol.json"),
            "unmatched_task" => include_str!("../data/scenarios/unmatched_task.json"),
            _ => return None,
        };
        Some(serde_json::from_str(raw).expect("bundled scenario is valid"))
    }

    pub fn all() -> Vec<Self> {
        BUNDLED.iter().map(|n| Self::bundled(n).expect("listed scenario exists")).collect()
    }
}

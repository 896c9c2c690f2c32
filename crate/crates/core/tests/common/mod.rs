#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use hiertask_core::cloud_policy::RuleSet;
use hiertask_core::orchestrator::OrchestratorConfig;
use hiertask_core::planner::{MockPlanner, PlannerTemplateSet};
use hiertask_core::skills::SkillRegistry;
use hiertask_core::tiers::Deployment;
use hiertask_core::world::{WorldConfig, WorldFixture};

pub fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares `actual` with the stored golden file. With `HIERTASK_BLESS=1`
/// the file is rewritten instead.
pub fn check_golden(name: &str, actual: &str) {
    let path = golden_path(name);
    if std::env::var_os("HIERTASK_BLESS").is_some_and(|v| v == "1") {
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("reading {}: {e} (run with HIERTASK_BLESS=1 to create)", path.display()));
    if expected != actual {
        let line = expected.lines().zip(actual.lines()).position(|(a, b)| a != b).unwrap_or(0);
        panic!(
            "{} differs at line {}:\n  golden: {:?}\n  actual: {:?}",
            name,
            line + 1,
            expected.lines().nth(line),
            actual.lines().nth(line)
        );
    }
}

pub fn deployment() -> Deployment {
    Deployment {
        registry: SkillRegistry::bundled(),
        planner: Arc::new(MockPlanner::new(PlannerTemplateSet::bundled())),
        rules: RuleSet::bundled(),
        world: WorldFixture::bundled("field").unwrap(),
        world_config: WorldConfig::default(),
        orchestrator: OrchestratorConfig::default(),
        out_dir: None,
    }
}

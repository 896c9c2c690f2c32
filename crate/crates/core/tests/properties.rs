mod common;

use common::deployment;
use hiertask_core::cloud_policy::RobotPolicy;
use hiertask_core::instruction::{ArgValue, Instruction, InstructionSequence};
use hiertask_core::orchestrator::{check_soundness, emit_sequences, refine_task, OrchestratorConfig, Verdict};
use hiertask_core::planner::{decompose, MockPlanner, NodeStatus, PlanContext, PlannerTemplateSet, TaskSpec};
use hiertask_core::protocol::{decode, encode, Ack, Body, Envelope, ErrorReport, StatusReport, TaskState};
use hiertask_core::scenario::BUNDLED;
use hiertask_core::similarity::pairwise_matrix;
use hiertask_core::skills::{skills_for_class, RobotClass, SkillRegistry};
use hiertask_core::tiers::{run_task, Transport};
use hiertask_core::vectorizer::embed;
use hiertask_core::world::{
    EnvironmentSnapshot, ObjectSighting, Observation, ObservationBody, World, WorldConfig, WorldFixture,
};
use proptest::prelude::*;

const WORDS: &[&str] = &[
    "fetch", "bring", "deliver", "survey", "patrol", "inspect", "red", "box", "drop", "off", "move", "to", "pick",
    "up", "take", "land", "the", "area", "rotate", "90", "juggle", "torches", "blue", "crate", "fly",
];

fn arb_text() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(WORDS), 1..7).prop_map(|w| w.join(" "))
}

fn field_env() -> EnvironmentSnapshot {
    let fixture = WorldFixture::bundled("field").unwrap();
    EnvironmentSnapshot {
        objects: fixture
            .objects
            .iter()
            .map(|o| ObjectSighting { id: o.id.clone(), class: o.class.clone(), position: o.position })
            .collect(),
        robots: Vec::new(),
        as_of_tick: 0,
    }
}

fn arb_env() -> impl Strategy<Value = EnvironmentSnapshot> {
    prop::collection::vec(any::<bool>(), 3).prop_map(|keep| {
        let mut env = field_env();
        let mut k = keep.into_iter();
        env.objects.retain(|_| k.next().unwrap());
        env
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embed_is_pure(d in arb_text(), k in prop::collection::vec(arb_text(), 0..3), c in arb_text()) {
        prop_assert_eq!(embed(&d, &k, &c), embed(&d, &k, &c));
    }

    #[test]
    fn pairwise_is_bitwise_symmetric(texts in prop::collection::vec(arb_text(), 1..8)) {
        let vs: Vec<_> = texts.iter().map(|t| embed(t, &[], "")).collect();
        let m = pairwise_matrix(&vs).unwrap();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                prop_assert_eq!(m.get(i, j).to_bits(), m.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn mock_planner_is_pure_and_children_are_raw(text in arb_text(), env in arb_env(), depth in 0u32..4) {
        let planner = MockPlanner::new(PlannerTemplateSet::bundled());
        let registry = SkillRegistry::bundled();
        let skills = skills_for_class(&registry, RobotClass::Quadruped);
        let ctx = PlanContext { env: &env, skills: &skills, robot_id: Some("quad1") };
        let a = decompose(&planner, "0", &text, "", &ctx, depth, 5).unwrap();
        let b = decompose(&planner, "0", &text, "", &ctx, depth, 5).unwrap();
        prop_assert_eq!(&a, &b);
        for c in &a {
            prop_assert_eq!(c.depth, depth + 1);
            prop_assert_eq!(c.status, NodeStatus::Raw);
            prop_assert!(!c.description.trim().is_empty() || a.len() == 1);
        }
    }

    #[test]
    fn refinement_halts_soundly(
        text in arb_text(),
        env in arb_env(),
        drone in any::<bool>(),
        threshold in 0.0f64..=1.0,
        max_depth in 1u32..6,
        max_iterations in 1u32..20,
    ) {
        let registry = SkillRegistry::bundled();
        let planner = MockPlanner::new(PlannerTemplateSet::bundled());
        let (robot_id, robot_class) = if drone { ("drone1", RobotClass::Drone) } else { ("quad1", RobotClass::Quadruped) };
        let task = TaskSpec::new("t", text.clone());
        let policy = RobotPolicy { robot_id: robot_id.into(), robot_class, goal: text, phase: "p".into() };
        let config = OrchestratorConfig { threshold, max_depth, max_iterations };
        let (tree, trace) = refine_task(&task, &policy, &env, &registry, &planner, &config).unwrap();
        prop_assert!(trace.iterations_used() <= max_iterations);
        for w in trace.iterations.windows(2) {
            prop_assert!(w[0].iteration < w[1].iteration);
        }
        for n in tree.root.walk() {
            prop_assert!(n.depth <= max_depth);
            for c in &n.children {
                prop_assert_eq!(c.depth, n.depth + 1);
            }
        }
        if trace.verdict == Verdict::Converged {
            prop_assert!(tree.leaves().iter().all(|l| l.status == NodeStatus::Bound));
            check_soundness(&tree, &trace, &registry).map_err(TestCaseError::fail)?;
            if let Ok(seqs) = emit_sequences(&tree, &env, &registry) {
                for ins in seqs.iter().flat_map(|s| &s.instructions) {
                    prop_assert!(registry.get(&ins.skill_id).unwrap().supports(robot_class));
                }
            }
        }
        let (tree2, trace2) = refine_task(&task, &policy, &env, &registry, &planner, &config).unwrap();
        prop_assert_eq!(serde_json::to_string(&trace).unwrap(), serde_json::to_string(&trace2).unwrap());
        prop_assert_eq!(tree, tree2);
    }
}

fn arb_quad_instruction() -> impl Strategy<Value = (String, Vec<ArgValue>)> {
    let point = (0.0f64..12.0, 0.0f64..12.0).prop_map(|(x, y)| [x.round(), y.round()]);
    let obj = prop::sample::select(vec!["box1", "dropoff1", "crate1"]);
    prop_oneof![
        point.prop_map(|p| ("move_to".to_owned(), vec![ArgValue::Coordinate2d(p)])),
        Just(("move_to".to_owned(), vec![ArgValue::Coordinate2d([6.0, 8.0])])),
        obj.clone().prop_map(|o| ("pick".to_owned(), vec![ArgValue::ObjectRef(o.into())])),
        obj.prop_map(|o| ("place".to_owned(), vec![ArgValue::ObjectRef(o.into())])),
        Just(("open_gripper".to_owned(), vec![])),
        Just(("close_gripper".to_owned(), vec![])),
        (0.0f64..360.0).prop_map(|a| ("rotate".to_owned(), vec![ArgValue::Scalar(a)])),
    ]
}

fn arb_drone_instruction() -> impl Strategy<Value = (String, Vec<ArgValue>)> {
    prop_oneof![
        Just(("takeoff".to_owned(), vec![])),
        Just(("land".to_owned(), vec![])),
        Just(("survey_area".to_owned(), vec![])),
        (0.0f64..30.0, 0.0f64..30.0).prop_map(|(x, y)| ("fly_to".to_owned(), vec![ArgValue::Coordinate2d([x, y])])),
    ]
}

fn seq(robot: &str, items: Vec<(String, Vec<ArgValue>)>) -> InstructionSequence {
    InstructionSequence::new(
        robot,
        items
            .into_iter()
            .enumerate()
            .map(|(i, (skill_id, args))| Instruction { seq_index: i, robot_id: robot.into(), skill_id, args })
            .collect(),
    )
}

fn field_world() -> World {
    World::new(&WorldFixture::bundled("field").unwrap(), WorldConfig::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn world_runs_are_deterministic_and_conserving(
        quad in prop::collection::vec(arb_quad_instruction(), 0..8),
        drone in prop::collection::vec(arb_drone_instruction(), 0..6),
    ) {
        let seqs = vec![seq("quad1", quad), seq("drone1", drone)];
        let mut a = field_world();
        let mut b = field_world();
        let oa = a.run_sequences(&seqs).unwrap();
        let ob = b.run_sequences(&seqs).unwrap();
        prop_assert_eq!(oa, ob);
        prop_assert_eq!(a.state(), b.state());
        prop_assert_eq!(a.observations(), b.observations());
        a.check_invariants().map_err(TestCaseError::fail)?;
        let mut ids: Vec<_> = a.state().objects.iter().map(|o| o.id.clone()).collect();
        ids.sort();
        prop_assert_eq!(ids, ["box1", "crate1", "dropoff1"]);
        for o in a.observations() {
            if let ObservationBody::SurveyResult { center, radius, objects } = &o.body {
                for s in objects {
                    prop_assert!(hiertask_core::world::distance(s.position, *center) <= *radius);
                }
            }
        }
    }

    #[test]
    fn held_objects_track_carrier_every_tick(targets in prop::collection::vec((0.0f64..15.0, 0.0f64..15.0), 1..4)) {
        let mut w = field_world();
        let mut items = vec![
            ("move_to".to_owned(), vec![ArgValue::Coordinate2d([6.0, 8.0])]),
            ("pick".to_owned(), vec![ArgValue::ObjectRef("box1".into())]),
        ];
        items.extend(targets.iter().map(|&(x, y)| ("move_to".to_owned(), vec![ArgValue::Coordinate2d([x, y])])));
        let s = seq("quad1", items);
        for ins in &s.instructions {
            w.execute("quad1", ins).unwrap();
            while w.robot("quad1").unwrap().status == hiertask_core::world::RobotStatus::Executing {
                w.step(1.0);
                w.check_invariants().map_err(TestCaseError::fail)?;
            }
        }
        prop_assert_eq!(w.object("box1").unwrap().position, w.robot("quad1").unwrap().position);
    }

    #[test]
    fn envelopes_round_trip(
        id in "[a-z]{1,6}-[0-9]{1,4}",
        corr in proptest::option::of("[a-z]{1,6}-[0-9]{1,4}"),
        sent_at in any::<u64>(),
        text in ".{0,40}",
        tick in any::<u64>(),
        x in -1e6f64..1e6,
        kind in 0u8..4,
    ) {
        let body = match kind {
            0 => Body::Error(ErrorReport { code: "c".into(), message: text.clone() }),
            1 => Body::Ack(Ack {}),
            2 => {
                let mut s = StatusReport::new(text.clone(), TaskState::Failed);
                s.detail = Some(text.clone());
                s.failed_index = Some(tick as usize % 100);
                Body::Status(s)
            }
            _ => Body::Observation(Observation {
                robot_id: text.clone(),
                tick,
                body: ObservationBody::Pose { class: RobotClass::Drone, position: [x, -x], altitude: x.abs() },
            }),
        };
        let env = Envelope { msg_id: id, correlates_to: corr, sent_at, body };
        let line = encode(&env);
        prop_assert_eq!(line.matches('\n').count(), 1);
        prop_assert_eq!(decode(&line).unwrap(), env);
    }
}

/// Upstream robots report done before any downstream robot observes anything.
#[test]
fn phases_run_in_dependency_order() {
    for name in BUNDLED {
        let s = hiertask_core::scenario::Scenario::bundled(name).unwrap();
        let run = run_task(&deployment(), &s.task, Transport::InProcess).unwrap();
        let strategy = run.outcome.unwrap().trace.strategy.unwrap();
        let mut done_at = std::collections::BTreeMap::new();
        let mut first_obs = std::collections::BTreeMap::new();
        for (i, e) in run.edge_log.iter().enumerate() {
            match &e.envelope.body {
                Body::Status(st) if st.phase.is_some() && st.state == TaskState::Done => {
                    done_at.insert(st.phase.clone().unwrap(), i);
                }
                Body::InstructionDispatch(d) => {
                    first_obs.entry(d.phase.clone()).or_insert(i);
                }
                _ => {}
            }
        }
        for p in &strategy.phases {
            let Some(&start) = first_obs.get(&p.name) else { continue };
            for dep in &p.depends_on {
                let done = done_at[dep];
                assert!(done < start, "{name}: phase {} dispatched before {dep} finished", p.name);
            }
        }
    }
}

#[test]
fn scenario_reports_are_reproducible() {
    for name in BUNDLED {
        let s = hiertask_core::scenario::Scenario::bundled(name).unwrap();
        let a = run_task(&deployment(), &s.task, Transport::InProcess).unwrap();
        let b = run_task(&deployment(), &s.task, Transport::InProcess).unwrap();
        let strip = |e: &Envelope| Envelope { msg_id: String::new(), sent_at: 0, correlates_to: None, ..e.clone() };
        assert_eq!(strip(&a.reply), strip(&b.reply));
    }
}

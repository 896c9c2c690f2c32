//! Device tier: a flat, deterministic 2D world with quadrupeds and drones.
//!
//! All motion is constant-speed straight-line travel clamped at the target.
//! Skills are keyed by id; the simulator knows which robot class may run
//! which skill independently of the skill registry.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::instruction::{ArgValue, Instruction, InstructionSequence};
use crate::skills::RobotClass;

/// Kinematic and sensing constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Ground speed of quadrupeds, m/s.
    pub quadruped_speed: f64,
    /// Horizontal speed of drones, m/s.
    pub drone_speed: f64,
    /// Vertical speed of drones, m/s.
    pub climb_rate: f64,
    pub hover_altitude: f64,
    pub pick_range: f64,
    pub survey_radius: f64,
    pub survey_dwell_ticks: u32,
    /// Seconds per tick.
    pub dt: f64,
    /// Hard cap on ticks for one `run_sequences` call.
    pub max_ticks: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            quadruped_speed: 1.0,
            drone_speed: 3.0,
            climb_rate: 1.0,
            hover_altitude: 2.0,
            pick_range: 0.5,
            survey_radius: 20.0,
            survey_dwell_ticks: 2,
            dt: 1.0,
            max_ticks: 10_000,
        }
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: String,
    pub class: String,
    pub position: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held_by: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gripper {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RobotStatus {
    Idle,
    Executing,
    Failed,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub id: String,
    pub class: RobotClass,
    pub position: [f64; 2],
    pub altitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gripper: Option<Gripper>,
    pub status: RobotStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: Vec<WorldObject>,
    pub robots: Vec<RobotState>,
    pub tick: u64,
}

/// Initial world layout as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldFixture {
    pub objects: Vec<FixtureObject>,
    pub robots: Vec<FixtureRobot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureObject {
    pub id: String,
    pub class: String,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureRobot {
    pub id: String,
    pub class: RobotClass,
    pub position: [f64; 2],
}

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("reading world fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("world fixture: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate id `{0}` in world")]
    DuplicateId(String),
    #[error("unknown robot `{0}`")]
    UnknownRobot(String),
    #[error("robot `{robot}` is {status:?}, not idle")]
    NotIdle { robot: String, status: RobotStatus },
    #[error("robot `{0}` appears in more than one sequence")]
    DuplicateSequence(String),
    #[error("sequence for `{0}` has bad seq indices or robot ids")]
    MalformedSequence(String),
}

impl WorldFixture {
    pub fn from_json(json: &str) -> Result<Self, WorldError> {
        Ok(serde_json::from_str(json)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorldError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|source| WorldError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&raw)
    }

    pub fn bundled(name: &str) -> Option<Self> {
        let raw = match name {
            "field" => include_str!("../data/worlds/field.json"),
            _ => return None,
        };
        Some(Self::from_json(raw).expect("bundled world is valid"))
    }
}

/// What the edge knows about the world. Built only from device observations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSnapshot {
    pub objects: Vec<ObjectSighting>,
    pub robots: Vec<RobotPose>,
    pub as_of_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSighting {
    pub id: String,
    pub class: String,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotPose {
    pub id: String,
    pub class: RobotClass,
    pub position: [f64; 2],
    pub altitude: f64,
}

impl EnvironmentSnapshot {
    pub fn robot(&self, id: &str) -> Option<&RobotPose> {
        self.robots.iter().find(|r| r.id == id)
    }

    pub fn object(&self, id: &str) -> Option<&ObjectSighting> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Merges an observation into the store. Survey results upsert objects,
    /// pose reports upsert robots; lists stay sorted by id.
    pub fn fold(&mut self, obs: &Observation) {
        match &obs.body {
            ObservationBody::SurveyResult { objects, .. } => {
                for o in objects {
                    match self.objects.iter_mut().find(|x| x.id == o.id) {
                        Some(x) => *x = o.clone(),
                        None => self.objects.push(o.clone()),
                    }
                }
                self.objects.sort_by(|a, b| a.id.cmp(&b.id));
            }
            ObservationBody::Pose { class, position, altitude } => {
                let pose =
                    RobotPose { id: obs.robot_id.clone(), class: *class, position: *position, altitude: *altitude };
                match self.robots.iter_mut().find(|r| r.id == obs.robot_id) {
                    Some(r) => *r = pose,
                    None => self.robots.push(pose),
                }
                self.robots.sort_by(|a, b| a.id.cmp(&b.id));
            }
            ObservationBody::SkillDone { .. } | ObservationBody::SkillFailed { .. } => {}
        }
        self.as_of_tick = self.as_of_tick.max(obs.tick);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub robot_id: String,
    pub tick: u64,
    #[serde(flatten)]
    pub body: ObservationBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum ObservationBody {
    SurveyResult { center: [f64; 2], radius: f64, objects: Vec<ObjectSighting> },
    SkillDone { seq_index: usize, skill_id: String },
    SkillFailed { seq_index: usize, skill_id: String, reason: String },
    Pose { class: RobotClass, position: [f64; 2], altitude: f64 },
}

impl Observation {
    pub fn kind(&self) -> &'static str {
        match self.body {
            ObservationBody::SurveyResult { .. } => "survey_result",
            ObservationBody::SkillDone { .. } => "skill_done",
            ObservationBody::SkillFailed { .. } => "skill_failed",
            ObservationBody::Pose { .. } => "pose",
        }
    }
}

/// Serializes observations as JSON lines.
pub fn observations_to_jsonl(obs: &[Observation]) -> String {
    obs.iter().map(|o| serde_json::to_string(o).expect("observation serializes") + "\n").collect()
}

/// Why `execute` refused an instruction.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Rejection {
    #[error("robot `{0}` does not exist")]
    UnknownRobot(String),
    #[error("robot is {0:?}, not idle")]
    NotIdle(RobotStatus),
    #[error("skill `{skill}` is not applicable to {class}")]
    NotApplicable { skill: String, class: RobotClass },
    #[error("bad arguments for `{0}`")]
    BadArgs(String),
    #[error("no object `{0}` within pick range")]
    OutOfRange(String),
    #[error("gripper is closed")]
    GripperClosed,
    #[error("not holding `{0}`")]
    NotHolding(String),
    #[error("drone is on the ground")]
    Grounded,
    #[error("unknown object `{0}`")]
    UnknownObject(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SequenceOutcome {
    Done { robot_id: String },
    Failed { robot_id: String, index: usize, reason: String },
}

impl SequenceOutcome {
    pub fn robot_id(&self) -> &str {
        match self {
            SequenceOutcome::Done { robot_id } | SequenceOutcome::Failed { robot_id, .. } => robot_id,
        }
    }

    pub fn is_done(&self) -> bool {
        matches!(self, SequenceOutcome::Done { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Motion {
    Travel([f64; 2]),
    Climb(f64),
    Dwell(u32),
    // Effect already applied by `execute`; finishes on the next step.
    Instant,
}

#[derive(Debug, Clone, PartialEq)]
struct ActiveSkill {
    seq_index: usize,
    skill_id: String,
    motion: Motion,
}

pub fn skill_classes(skill_id: &str) -> Option<&'static [RobotClass]> {
    const GROUND: &[RobotClass] = &[RobotClass::Quadruped];
    const AIR: &[RobotClass] = &[RobotClass::Drone];
    Some(match skill_id {
        "move_to" | "rotate" | "pick" | "place" | "open_gripper" | "close_gripper" => GROUND,
        "takeoff" | "land" | "fly_to" | "survey_area" => AIR,
        _ => return None,
    })
}

// Absorbs rounding left over from stepping along a diagonal.
const ARRIVAL_EPS: f64 = 1e-9;

/// The simulation. Owns every mutation of [`WorldState`] and keeps an
/// append-only observation log.
#[derive(Debug, Clone)]
pub struct World {
    state: WorldState,
    config: WorldConfig,
    active: BTreeMap<String, ActiveSkill>,
    log: Vec<Observation>,
}

impl World {
    pub fn new(fixture: &WorldFixture, config: WorldConfig) -> Result<Self, WorldError> {
        let mut ids = std::collections::BTreeSet::new();
        for id in fixture.objects.iter().map(|o| &o.id).chain(fixture.robots.iter().map(|r| &r.id)) {
            if !ids.insert(id.clone()) {
                return Err(WorldError::DuplicateId(id.clone()));
            }
        }
        let objects = fixture
            .objects
            .iter()
            .map(|o| WorldObject { id: o.id.clone(), class: o.class.clone(), position: o.position, held_by: None })
            .collect();
        let robots = fixture
            .robots
            .iter()
            .map(|r| RobotState {
                id: r.id.clone(),
                class: r.class,
                position: r.position,
                altitude: 0.0,
                gripper: (r.class == RobotClass::Quadruped).then_some(Gripper::Open),
                status: RobotStatus::Idle,
            })
            .collect();
        Ok(Self { state: WorldState { objects, robots, tick: 0 }, config, active: BTreeMap::new(), log: Vec::new() })
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn observations(&self) -> &[Observation] {
        &self.log
    }

    pub fn tick(&self) -> u64 {
        self.state.tick
    }

    pub fn robot(&self, id: &str) -> Option<&RobotState> {
        self.state.robots.iter().find(|r| r.id == id)
    }

    pub fn object(&self, id: &str) -> Option<&WorldObject> {
        self.state.objects.iter().find(|o| o.id == id)
    }

    /// Ground truth, as a drone with unlimited range would see it.
    pub fn snapshot(&self) -> EnvironmentSnapshot {
        EnvironmentSnapshot {
            objects: self
                .state
                .objects
                .iter()
                .map(|o| ObjectSighting { id: o.id.clone(), class: o.class.clone(), position: o.position })
                .collect(),
            robots: self
                .state
                .robots
                .iter()
                .map(|r| RobotPose { id: r.id.clone(), class: r.class, position: r.position, altitude: r.altitude })
                .collect(),
            as_of_tick: self.state.tick,
        }
    }

    fn robot_mut(&mut self, id: &str) -> Option<&mut RobotState> {
        self.state.robots.iter_mut().find(|r| r.id == id)
    }

    fn push(&mut self, robot_id: &str, body: ObservationBody) {
        self.log.push(Observation { robot_id: robot_id.to_owned(), tick: self.state.tick, body });
    }

    /// Starts `ins` on `robot_id`. A rejection marks the robot failed and
    /// logs a `skill_failed` observation.
    pub fn execute(&mut self, robot_id: &str, ins: &Instruction) -> Result<(), Rejection> {
        let result = self.start(robot_id, ins);
        if let Err(rejection) = &result {
            if let Some(r) = self.robot_mut(robot_id) {
                r.status = RobotStatus::Failed;
                self.push(
                    robot_id,
                    ObservationBody::SkillFailed {
                        seq_index: ins.seq_index,
                        skill_id: ins.skill_id.clone(),
                        reason: rejection.to_string(),
                    },
                );
            }
        }
        result
    }

    fn start(&mut self, robot_id: &str, ins: &Instruction) -> Result<(), Rejection> {
        let cfg = self.config.clone();
        let robot = self.robot(robot_id).ok_or_else(|| Rejection::UnknownRobot(robot_id.to_owned()))?.clone();
        if !matches!(robot.status, RobotStatus::Idle | RobotStatus::Done) {
            return Err(Rejection::NotIdle(robot.status));
        }
        let allowed = skill_classes(&ins.skill_id).unwrap_or(&[]);
        if !allowed.contains(&robot.class) {
            return Err(Rejection::NotApplicable { skill: ins.skill_id.clone(), class: robot.class });
        }
        let bad_args = || Rejection::BadArgs(ins.skill_id.clone());
        let motion = match (ins.skill_id.as_str(), ins.args.as_slice()) {
            ("move_to", [ArgValue::Coordinate2d(target)]) => Motion::Travel(*target),
            ("fly_to", [ArgValue::Coordinate2d(target)]) => {
                if robot.altitude <= 0.0 {
                    return Err(Rejection::Grounded);
                }
                Motion::Travel(*target)
            }
            ("takeoff", []) => Motion::Climb(cfg.hover_altitude),
            ("land", []) => Motion::Climb(0.0),
            ("survey_area", []) => Motion::Dwell(cfg.survey_dwell_ticks),
            ("rotate", [ArgValue::Scalar(_)]) => Motion::Instant,
            ("open_gripper", []) => {
                self.robot_mut(robot_id).unwrap().gripper = Some(Gripper::Open);
                Motion::Instant
            }
            ("close_gripper", []) => {
                self.robot_mut(robot_id).unwrap().gripper = Some(Gripper::Closed);
                Motion::Instant
            }
            ("pick", [ArgValue::ObjectRef(object_id)]) => {
                if robot.gripper != Some(Gripper::Open) {
                    return Err(Rejection::GripperClosed);
                }
                let obj = self.object(object_id).ok_or_else(|| Rejection::UnknownObject(object_id.clone()))?;
                if obj.held_by.is_some() || distance(obj.position, robot.position) > cfg.pick_range {
                    return Err(Rejection::OutOfRange(object_id.clone()));
                }
                let obj = self.state.objects.iter_mut().find(|o| &o.id == object_id).unwrap();
                obj.held_by = Some(robot_id.to_owned());
                obj.position = robot.position;
                self.robot_mut(robot_id).unwrap().gripper = Some(Gripper::Closed);
                Motion::Instant
            }
            ("place", [ArgValue::ObjectRef(object_id)]) => {
                let obj = self.object(object_id).ok_or_else(|| Rejection::UnknownObject(object_id.clone()))?;
                if obj.held_by.as_deref() != Some(robot_id) {
                    return Err(Rejection::NotHolding(object_id.clone()));
                }
                let obj = self.state.objects.iter_mut().find(|o| &o.id == object_id).unwrap();
                obj.held_by = None;
                obj.position = robot.position;
                self.robot_mut(robot_id).unwrap().gripper = Some(Gripper::Open);
                Motion::Instant
            }
            _ => return Err(bad_args()),
        };
        self.robot_mut(robot_id).unwrap().status = RobotStatus::Executing;
        self.active.insert(
            robot_id.to_owned(),
            ActiveSkill { seq_index: ins.seq_index, skill_id: ins.skill_id.clone(), motion },
        );
        Ok(())
    }

    /// Advances every executing robot by one tick of `dt` seconds.
    pub fn step(&mut self, dt: f64) {
        assert!(dt > 0.0, "dt must be positive");
        self.state.tick += 1;
        let ids: Vec<String> = self.active.keys().cloned().collect();
        for id in ids {
            let mut skill = self.active.remove(&id).expect("active skill");
            let idx = self.state.robots.iter().position(|r| r.id == id).expect("active robot exists");
            let speed = match self.state.robots[idx].class {
                RobotClass::Quadruped => self.config.quadruped_speed,
                RobotClass::Drone => self.config.drone_speed,
            };
            let finished = match &mut skill.motion {
                Motion::Travel(target) => {
                    let robot = &mut self.state.robots[idx];
                    let remaining = distance(robot.position, *target);
                    let reach = speed * dt;
                    if remaining <= reach + ARRIVAL_EPS {
                        robot.position = *target;
                        true
                    } else {
                        let f = reach / remaining;
                        robot.position[0] += (target[0] - robot.position[0]) * f;
                        robot.position[1] += (target[1] - robot.position[1]) * f;
                        false
                    }
                }
                Motion::Climb(target) => {
                    let robot = &mut self.state.robots[idx];
                    let reach = self.config.climb_rate * dt;
                    if (robot.altitude - *target).abs() <= reach + ARRIVAL_EPS {
                        robot.altitude = *target;
                        true
                    } else {
                        robot.altitude += reach * (*target - robot.altitude).signum();
                        false
                    }
                }
                Motion::Dwell(left) => {
                    *left = left.saturating_sub(1);
                    *left == 0
                }
                Motion::Instant => true,
            };
            let pos = self.state.robots[idx].position;
            for o in self.state.objects.iter_mut().filter(|o| o.held_by.as_deref() == Some(id.as_str())) {
                o.position = pos;
            }
            if !finished {
                self.active.insert(id, skill);
                continue;
            }
            if skill.skill_id == "survey_area" {
                let center = pos;
                let radius = self.config.survey_radius;
                let objects = self
                    .state
                    .objects
                    .iter()
                    .filter(|o| distance(o.position, center) <= radius)
                    .map(|o| ObjectSighting { id: o.id.clone(), class: o.class.clone(), position: o.position })
                    .collect();
                self.push(&id, ObservationBody::SurveyResult { center, radius, objects });
            }
            self.state.robots[idx].status = RobotStatus::Idle;
            self.push(&id, ObservationBody::SkillDone { seq_index: skill.seq_index, skill_id: skill.skill_id });
        }
    }

    pub fn run_sequence(&mut self, seq: &InstructionSequence) -> Result<SequenceOutcome, WorldError> {
        Ok(self.run_sequences(std::slice::from_ref(seq))?.remove(0))
    }

    /// Runs several robots side by side until each finishes or fails.
    /// Every robot executes its own instructions strictly in order and stops
    /// at its first failure. Outcomes come back in input order.
    pub fn run_sequences(&mut self, seqs: &[InstructionSequence]) -> Result<Vec<SequenceOutcome>, WorldError> {
        let mut seen = std::collections::BTreeSet::new();
        for s in seqs {
            let robot = self.robot(&s.robot_id).ok_or_else(|| WorldError::UnknownRobot(s.robot_id.clone()))?;
            if !matches!(robot.status, RobotStatus::Idle | RobotStatus::Done) {
                return Err(WorldError::NotIdle { robot: s.robot_id.clone(), status: robot.status });
            }
            if !seen.insert(s.robot_id.clone()) {
                return Err(WorldError::DuplicateSequence(s.robot_id.clone()));
            }
            if !s.is_well_formed() {
                return Err(WorldError::MalformedSequence(s.robot_id.clone()));
            }
        }
        for s in seqs {
            self.robot_mut(&s.robot_id).unwrap().status = RobotStatus::Idle;
        }

        let mut cursor = vec![0usize; seqs.len()];
        let mut outcome: Vec<Option<SequenceOutcome>> = vec![None; seqs.len()];
        let start_tick = self.state.tick;
        loop {
            for (k, s) in seqs.iter().enumerate() {
                if outcome[k].is_some() || self.active.contains_key(&s.robot_id) {
                    continue;
                }
                match s.instructions.get(cursor[k]) {
                    None => {
                        let r = self.robot_mut(&s.robot_id).unwrap();
                        r.status = RobotStatus::Done;
                        let body = ObservationBody::Pose { class: r.class, position: r.position, altitude: r.altitude };
                        self.push(&s.robot_id, body);
                        outcome[k] = Some(SequenceOutcome::Done { robot_id: s.robot_id.clone() });
                    }
                    Some(ins) => {
                        if let Err(rej) = self.execute(&s.robot_id, ins) {
                            outcome[k] = Some(SequenceOutcome::Failed {
                                robot_id: s.robot_id.clone(),
                                index: cursor[k],
                                reason: rej.to_string(),
                            });
                        } else {
                            cursor[k] += 1;
                        }
                    }
                }
            }
            if outcome.iter().all(Option::is_some) {
                break;
            }
            if self.state.tick - start_tick >= self.config.max_ticks {
                for (k, s) in seqs.iter().enumerate() {
                    if outcome[k].is_none() {
                        self.active.remove(&s.robot_id);
                        self.robot_mut(&s.robot_id).unwrap().status = RobotStatus::Failed;
                        outcome[k] = Some(SequenceOutcome::Failed {
                            robot_id: s.robot_id.clone(),
                            index: cursor[k].saturating_sub(1),
                            reason: "tick budget exhausted".into(),
                        });
                    }
                }
                break;
            }
            let dt = self.config.dt;
            self.step(dt);
        }
        Ok(outcome.into_iter().map(|o| o.expect("all sequences terminal")).collect())
    }

    /// Structural invariants: unique ids, held objects co-located with their
    /// holder, class-specific pose fields.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut ids = std::collections::BTreeSet::new();
        for id in self.state.objects.iter().map(|o| &o.id).chain(self.state.robots.iter().map(|r| &r.id)) {
            if !ids.insert(id) {
                return Err(format!("duplicate id {id}"));
            }
        }
        for o in &self.state.objects {
            if let Some(holder) = &o.held_by {
                let r = self.robot(holder).ok_or_else(|| format!("{} held by unknown {holder}", o.id))?;
                if o.position != r.position {
                    return Err(format!("{} is not at its holder {holder}", o.id));
                }
            }
        }
        for r in &self.state.robots {
            match r.class {
                RobotClass::Quadruped if r.altitude != 0.0 => return Err(format!("{} quadruped off the ground", r.id)),
                RobotClass::Drone if r.gripper.is_some() => return Err(format!("{} drone with gripper", r.id)),
                RobotClass::Drone if r.altitude < 0.0 => return Err(format!("{} below ground", r.id)),
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ins(i: usize, robot: &str, skill: &str, args: Vec<ArgValue>) -> Instruction {
        Instruction { seq_index: i, robot_id: robot.into(), skill_id: skill.into(), args }
    }

    fn world(objects: &[(&str, &str, [f64; 2])], robots: &[(&str, RobotClass, [f64; 2])]) -> World {
        let fixture = WorldFixture {
            objects: objects
                .iter()
                .map(|(id, class, p)| FixtureObject { id: (*id).into(), class: (*class).into(), position: *p })
                .collect(),
            robots: robots
                .iter()
                .map(|(id, c, p)| FixtureRobot { id: (*id).into(), class: *c, position: *p })
                .collect(),
        };
        World::new(&fixture, WorldConfig::default()).unwrap()
    }

    #[test]
    fn idle_step_only_advances_tick() {
        let mut w = world(&[("b", "box", [1.0, 1.0])], &[("q", RobotClass::Quadruped, [0.0, 0.0])]);
        let before = w.state().clone();
        w.step(1.0);
        assert_eq!(w.tick(), 1);
        assert_eq!(w.state().objects, before.objects);
        assert_eq!(w.state().robots, before.robots);
        assert!(w.observations().is_empty());
    }

    #[test]
    fn quadruped_moves_one_meter_per_second() {
        let mut w = world(&[], &[("q", RobotClass::Quadruped, [0.0, 0.0])]);
        w.execute("q", &ins(0, "q", "move_to", vec![ArgValue::Coordinate2d([0.0, 2.0])])).unwrap();
        w.step(1.0);
        assert_eq!(w.robot("q").unwrap().position, [0.0, 1.0]);
        assert_eq!(w.robot("q").unwrap().status, RobotStatus::Executing);
    }

    #[test]
    fn diagonal_travel_takes_distance_over_speed_ticks() {
        let mut w = world(&[], &[("q", RobotClass::Quadruped, [0.0, 0.0])]);
        w.execute("q", &ins(0, "q", "move_to", vec![ArgValue::Coordinate2d([6.0, 8.0])])).unwrap();
        for _ in 0..10 {
            w.step(1.0);
        }
        assert_eq!(w.robot("q").unwrap().position, [6.0, 8.0]);
        assert_eq!(w.robot("q").unwrap().status, RobotStatus::Idle);
        assert_eq!(w.observations().last().unwrap().tick, 10);
    }

    #[test]
    fn drone_fly_to_clamps_at_target() {
        // 10 m at 3 m/s: 3, 6, 9, then clamp to 10 on the 4th tick.
        let expected_ticks = (10.0f64 / 3.0).ceil() as u64;
        let mut w = world(&[], &[("d", RobotClass::Drone, [0.0, 0.0])]);
        let seq = InstructionSequence::new(
            "d",
            vec![ins(0, "d", "takeoff", vec![]), ins(1, "d", "fly_to", vec![ArgValue::Coordinate2d([10.0, 0.0])])],
        );
        assert!(w.run_sequence(&seq).unwrap().is_done());
        let done: Vec<_> = w
            .observations()
            .iter()
            .filter_map(|o| match &o.body {
                ObservationBody::SkillDone { skill_id, .. } => Some((skill_id.as_str(), o.tick)),
                _ => None,
            })
            .collect();
        // takeoff climbs 2 m at 1 m/s.
        assert_eq!(done, [("takeoff", 2), ("fly_to", 2 + expected_ticks)]);
        assert_eq!(w.robot("d").unwrap().position, [10.0, 0.0]);
        assert_eq!(w.robot("d").unwrap().altitude, 2.0);
    }

    #[test]
    fn pick_range_boundary() {
        let mut w = world(&[("b", "box", [0.4, 0.0])], &[("q", RobotClass::Quadruped, [0.0, 0.0])]);
        w.execute("q", &ins(0, "q", "pick", vec![ArgValue::ObjectRef("b".into())])).unwrap();
        assert_eq!(w.object("b").unwrap().held_by.as_deref(), Some("q"));

        let mut w = world(&[("b", "box", [0.6, 0.0])], &[("q", RobotClass::Quadruped, [0.0, 0.0])]);
        let err = w.execute("q", &ins(0, "q", "pick", vec![ArgValue::ObjectRef("b".into())])).unwrap_err();
        assert_eq!(err, Rejection::OutOfRange("b".into()));
        assert_eq!(w.observations().last().unwrap().kind(), "skill_failed");
        assert_eq!(w.robot("q").unwrap().status, RobotStatus::Failed);
    }

    #[test]
    fn pick_with_closed_gripper_fails() {
        let mut w = world(&[("b", "box", [0.0, 0.0])], &[("q", RobotClass::Quadruped, [0.0, 0.0])]);
        let seq = InstructionSequence::new(
            "q",
            vec![ins(0, "q", "close_gripper", vec![]), ins(1, "q", "pick", vec![ArgValue::ObjectRef("b".into())])],
        );
        let out = w.run_sequence(&seq).unwrap();
        assert!(matches!(out, SequenceOutcome::Failed { index: 1, .. }));
    }

    #[test]
    fn skill_class_mismatch_is_rejected() {
        let mut w = world(&[], &[("q", RobotClass::Quadruped, [0.0, 0.0])]);
        let err = w.execute("q", &ins(0, "q", "takeoff", vec![])).unwrap_err();
        assert!(matches!(err, Rejection::NotApplicable { .. }));
    }

    #[test]
    fn survey_radius_excludes_far_objects() {
        let mut w = world(
            &[("near", "red box", [3.0, 4.0]), ("far", "blue crate", [25.0, 0.0])],
            &[("d", RobotClass::Drone, [0.0, 0.0])],
        );
        let seq = InstructionSequence::new("d", vec![ins(0, "d", "survey_area", vec![])]);
        assert!(w.run_sequence(&seq).unwrap().is_done());
        let survey = w.observations().iter().find(|o| o.kind() == "survey_result").unwrap();
        assert_eq!(survey.tick, 2, "two tick dwell");
        match &survey.body {
            ObservationBody::SurveyResult { objects, .. } => {
                assert_eq!(objects.iter().map(|o| o.id.as_str()).collect::<Vec<_>>(), ["near"]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn empty_sequence_is_done_immediately() {
        let mut w = world(&[], &[("q", RobotClass::Quadruped, [0.0, 0.0])]);
        let out = w.run_sequence(&InstructionSequence::new("q", vec![])).unwrap();
        assert!(out.is_done());
        assert_eq!(w.tick(), 0);
    }

    #[test]
    fn stops_at_first_failure() {
        let mut w = world(&[("b", "box", [9.0, 9.0])], &[("q", RobotClass::Quadruped, [0.0, 0.0])]);
        let seq = InstructionSequence::new(
            "q",
            vec![
                ins(0, "q", "rotate", vec![ArgValue::Scalar(90.0)]),
                ins(1, "q", "pick", vec![ArgValue::ObjectRef("b".into())]),
                ins(2, "q", "move_to", vec![ArgValue::Coordinate2d([5.0, 0.0])]),
            ],
        );
        let out = w.run_sequence(&seq).unwrap();
        assert!(matches!(out, SequenceOutcome::Failed { index: 1, .. }));
        assert!(w.observations().iter().all(|o| match &o.body {
            ObservationBody::SkillDone { seq_index, .. } | ObservationBody::SkillFailed { seq_index, .. } =>
                *seq_index <= 1,
            _ => true,
        }));
        assert_eq!(w.robot("q").unwrap().position, [0.0, 0.0]);
    }

    #[test]
    fn held_object_tracks_carrier() {
        let mut w = world(&[("b", "box", [0.0, 0.0])], &[("q", RobotClass::Quadruped, [0.0, 0.0])]);
        w.execute("q", &ins(0, "q", "pick", vec![ArgValue::ObjectRef("b".into())])).unwrap();
        w.step(1.0);
        w.execute("q", &ins(1, "q", "move_to", vec![ArgValue::Coordinate2d([3.0, 0.0])])).unwrap();
        for _ in 0..3 {
            w.step(1.0);
            assert_eq!(w.object("b").unwrap().position, w.robot("q").unwrap().position);
            w.check_invariants().unwrap();
        }
    }

    #[test]
    fn fly_to_requires_altitude() {
        let mut w = world(&[], &[("d", RobotClass::Drone, [0.0, 0.0])]);
        let err = w.execute("d", &ins(0, "d", "fly_to", vec![ArgValue::Coordinate2d([1.0, 0.0])])).unwrap_err();
        assert_eq!(err, Rejection::Grounded);
    }

    #[test]
    fn env_store_folds_survey_and_pose() {
        let mut env = EnvironmentSnapshot::default();
        env.fold(&Observation {
            robot_id: "d".into(),
            tick: 4,
            body: ObservationBody::SurveyResult {
                center: [0.0, 0.0],
                radius: 20.0,
                objects: vec![ObjectSighting { id: "b".into(), class: "box".into(), position: [1.0, 2.0] }],
            },
        });
        env.fold(&Observation {
            robot_id: "d".into(),
            tick: 5,
            body: ObservationBody::Pose { class: RobotClass::Drone, position: [0.0, 0.0], altitude: 0.0 },
        });
        assert_eq!(env.objects.len(), 1);
        assert_eq!(env.robot("d").unwrap().class, RobotClass::Drone);
        assert_eq!(env.as_of_tick, 5);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let fixture = WorldFixture {
            objects: vec![FixtureObject { id: "x".into(), class: "box".into(), position: [0.0, 0.0] }],
            robots: vec![FixtureRobot { id: "x".into(), class: RobotClass::Drone, position: [0.0, 0.0] }],
        };
        assert!(matches!(World::new(&fixture, WorldConfig::default()), Err(WorldError::DuplicateId(_))));
    }
}

//! Grounded skill invocations exchanged between the edge and the device tier.

use serde::{Deserialize, Serialize};

use crate::skills::{ParamKind, SkillDescriptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum ArgValue {
    Scalar(f64),
    Coordinate2d([f64; 2]),
    ObjectRef(String),
    Text(String),
}

impl ArgValue {
    pub fn kind(&self) -> ParamKind {
        match self {
            ArgValue::Scalar(_) => ParamKind::Scalar,
            ArgValue::Coordinate2d(_) => ParamKind::Coordinate2d,
            ArgValue::ObjectRef(_) => ParamKind::ObjectRef,
            ArgValue::Text(_) => ParamKind::Text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub seq_index: usize,
    pub robot_id: String,
    pub skill_id: String,
    pub args: Vec<ArgValue>,
}

impl Instruction {
    /// True when the argument count and kinds match the skill's parameters.
    pub fn matches_schema(&self, skill: &SkillDescriptor) -> bool {
        self.skill_id == skill.id
            && self.args.len() == skill.params.len()
            && self.args.iter().zip(&skill.params).all(|(a, p)| a.kind() == p.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSequence {
    pub robot_id: String,
    pub instructions: Vec<Instruction>,
}

impl InstructionSequence {
    pub fn new(robot_id: impl Into<String>, instructions: Vec<Instruction>) -> Self {
        Self { robot_id: robot_id.into(), instructions }
    }

    /// Seq indices run 0, 1, 2, ... and every instruction targets this robot.
    pub fn is_well_formed(&self) -> bool {
        self.instructions.iter().enumerate().all(|(i, ins)| ins.seq_index == i && ins.robot_id == self.robot_id)
    }
}

//! Per-aspect instruction templates.
//!
//! The robot set serves RoboCasa 365 and MolmoBot/MolmoSpaces; EgoVerse uses
//! the egocentric set. Template text is fixed and must not be edited: the
//! captions in existing annotation corpora were produced with exactly these
//! strings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aspect::AspectKind;
use crate::ingestion::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSet {
    Robot,
    Egocentric,
}

const ROBOT_PHYSICAL_MOTION: &str = "Describe the physical movement of the agent. For example, if the agent is moving its arm, describe the movement of the arm. If the agent is moving its hand (or the gripper of a robot arm), describe the movement of the hand or the gripper. If the agent is grasping the object, describe the grasping movement of the gripper or hand. If the agent is moving the object, describe the movement of the object. Focus only on the movements within the given frames. Do not hallucinate or make up the action.";

const ROBOT_SCENE_COMPOSITION: &str = "Describe the physical environment shown in the video. List the room type, major fixtures, and visible objects on the surfaces (such as specific food items, appliances, or tools).";

const ROBOT_ARM_POSE: &str = "Describe the exact physical posture and spatial location of the agent's arm throughout the trajectory. Focus strictly on the arm's pose (posture, gripper state, orientation) relative to the environment at the start, middle, and end of the clip, without describing the action itself.";

const ROBOT_REASONING: &str = "Reason about the agent's action and environment in the video clips given the task description. The reasoning should be detailed and specific to the video clips, e.g., why the agent is doing this action, what is the goal of the action, what was the previous action, what was the current action, what should be the next action, is the task completed, etc.";

const EGO_PHYSICAL_MOTION: &str = "Describe the physical movements of the person's hands in this clip. Focus on what each hand is doing: reaching, grasping, lifting, pouring, stirring, placing, etc. Mention the objects being manipulated and the direction of movement. Focus only on the movements within the given frames. Do not hallucinate or make up actions.";

const EGO_SCENE_COMPOSITION: &str = "Describe the physical environment shown in the images. List the setting, workspace surfaces, and visible objects (such as tools, containers, food items, or appliances). Note their spatial arrangement.";

const EGO_ARM_POSE: &str = "Describe the exact position and posture of the person's hands at the very first frame. What are they holding, touching, or hovering over? Focus strictly on the hands' state relative to the objects and workspace, without describing the action.";

const EGO_REASONING: &str = "Reason about what the person is doing and why, given the task description and the current action annotation. What is the goal of this action segment? What was likely done before this, and what will likely come next? Is this a preparatory step, the main manipulation, or a cleanup step?";

impl PromptSet {
    pub fn for_dataset(dataset: Dataset) -> Self {
        match dataset {
            Dataset::Egoverse => PromptSet::Egocentric,
            Dataset::Robocasa365 | Dataset::Molmobot => PromptSet::Robot,
        }
    }

    pub fn template(self, aspect: AspectKind) -> &'static str {
        use AspectKind::*;
        match (self, aspect) {
            (PromptSet::Robot, PhysicalMotion) => ROBOT_PHYSICAL_MOTION,
            (PromptSet::Robot, SceneComposition) => ROBOT_SCENE_COMPOSITION,
            (PromptSet::Robot, ArmPose) => ROBOT_ARM_POSE,
            (PromptSet::Robot, Reasoning) => ROBOT_REASONING,
            (PromptSet::Egocentric, PhysicalMotion) => EGO_PHYSICAL_MOTION,
            (PromptSet::Egocentric, SceneComposition) => EGO_SCENE_COMPOSITION,
            (PromptSet::Egocentric, ArmPose) => EGO_ARM_POSE,
            (PromptSet::Egocentric, Reasoning) => EGO_REASONING,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptSet::Robot => "robot",
            PromptSet::Egocentric => "egocentric",
        }
    }
}

impl fmt::Display for PromptSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "robot" => Ok(PromptSet::Robot),
            "egocentric" => Ok(PromptSet::Egocentric),
            other => Err(format!("unknown prompt set '{other}'")),
        }
    }
}

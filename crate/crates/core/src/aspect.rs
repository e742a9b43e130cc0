use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The four annotation aspects. Declaration order is the tie-break order used
/// everywhere a deterministic choice between aspects is needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AspectKind {
    PhysicalMotion,
    SceneComposition,
    ArmPose,
    Reasoning,
}

impl AspectKind {
    pub const ALL: [AspectKind; 4] = [
        AspectKind::PhysicalMotion,
        AspectKind::SceneComposition,
        AspectKind::ArmPose,
        AspectKind::Reasoning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AspectKind::PhysicalMotion => "physical_motion",
            AspectKind::SceneComposition => "scene_composition",
            AspectKind::ArmPose => "arm_pose",
            AspectKind::Reasoning => "reasoning",
        }
    }

    /// Position in [`AspectKind::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Parses a comma-separated list, or `all`. Duplicates collapse; the
    /// result is in canonical order.
    pub fn parse_list(s: &str) -> Result<Vec<AspectKind>, UnknownAspect> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        let mut out: Vec<AspectKind> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl fmt::Display for AspectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown aspect '{0}'")]
pub struct UnknownAspect(pub String);

impl FromStr for AspectKind {
    type Err = UnknownAspect;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| UnknownAspect(s.to_string()))
    }
}

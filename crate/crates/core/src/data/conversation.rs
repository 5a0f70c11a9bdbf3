//! Instruction/response rendering for the unified conversation template.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseFormat {
    Boxes,
    Masks,
    Points,
}

impl ResponseFormat {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Detect | TaskKind::Ground | TaskKind::Count => Self::Boxes,
            TaskKind::Segment | TaskKind::RefSegment => Self::Masks,
            TaskKind::Pose => Self::Points,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Self::Boxes => "boxes",
            Self::Masks => "masks",
            Self::Points => "points",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationSample {
    pub instruction: String,
    pub response: String,
    pub task: TaskKind,
    pub description: String,
    pub format: ResponseFormat,
}

impl ConversationSample {
    pub fn text(&self) -> String {
        format!("{} {}", self.instruction, self.response)
    }
}

pub fn render_conversation(task: TaskKind, description: &str) -> Result<ConversationSample> {
    let description = description.trim();
    if description.is_empty() {
        return Err(Error::invalid("description", "must not be empty"));
    }
    let format = ResponseFormat::for_task(task);
    Ok(ConversationSample {
        instruction: format!(
            "USER: [IMG]. Please find the location of {description}. Respond with {}.",
            format.word()
        ),
        response: format!("ASSISTANT: Sure, the location is [LOC]. The task output is {}.", task.token()),
        task,
        description: description.to_string(),
        format,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detect_person() {
        let s = render_conversation(TaskKind::Detect, "person").unwrap();
        assert_eq!(
            s.text(),
            "USER: [IMG]. Please find the location of person. Respond with boxes. \
             ASSISTANT: Sure, the location is [LOC]. The task output is [DET]."
        );
        assert!(s.response.ends_with("The task output is [DET]."));
    }

    #[test]
    fn pose_and_referring_segmentation() {
        let s = render_conversation(TaskKind::Pose, "left elbow").unwrap();
        assert_eq!(s.format, ResponseFormat::Points);
        assert!(s.response.contains("[POINT]"));
        assert!(s.instruction.ends_with("Respond with points."));
        let s = render_conversation(TaskKind::RefSegment, "the man in red").unwrap();
        assert_eq!(s.format, ResponseFormat::Masks);
        assert!(s.response.ends_with("[REFSEG]."));
    }

    #[test]
    fn empty_description_is_rejected() {
        assert!(render_conversation(TaskKind::Ground, "  ").is_err());
    }
}

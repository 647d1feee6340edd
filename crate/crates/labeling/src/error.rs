use thiserror::Error;

use crate::vote::Stage;

pub type Result<T> = std::result::Result<T, LabelError>;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("unknown judge `{0}`")]
    UnknownJudge(String),

    #[error("unknown image `{0}`")]
    UnknownImage(String),

    #[error("choice must be 1..=4, got {0}")]
    BadChoice(u8),

    #[error("{stage} stage of `{image_id}` was not served to judge `{judge_id}`")]
    NotServed {
        judge_id: String,
        image_id: String,
        stage: Stage,
    },

    #[error("judge `{judge_id}` may not vote on the perturbed `{image_id}`: {reason}")]
    StageViolation {
        judge_id: String,
        image_id: String,
        reason: String,
    },

    #[error("judge `{judge_id}` already voted differently on the {stage} `{image_id}`")]
    ConflictingDuplicate {
        judge_id: String,
        image_id: String,
        stage: Stage,
    },

    #[error("panel for `{0}` is already full")]
    PanelFull(String),

    #[error("incomplete panel for `{image_id}`: {reason}")]
    IncompletePanel { image_id: String, reason: String },

    #[error("vote log line {line}: {reason}")]
    BadLog { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CollapseError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid too small: packet mass outside the window is {mass:e}")]
    GridTooSmall { mass: f64 },

    #[error("degenerate state: squared norm {norm2:e} is numerically zero")]
    DegenerateState { norm2: f64 },

    #[error("step too large: {0}")]
    StepTooLarge(String),

    #[error("schedule mismatch: {0}")]
    ScheduleMismatch(String),

    #[error("grid mismatch between states")]
    GridMismatch,

    #[error("config error: {0}")]
    Config(String),

    #[error("archive format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CollapseError {
    /// Stable machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CollapseError::InvalidParameter(_) => "invalid-parameter",
            CollapseError::GridTooSmall { .. } => "grid-too-small",
            CollapseError::DegenerateState { .. } => "degenerate-state",
            CollapseError::StepTooLarge(_) => "step-too-large",
            CollapseError::ScheduleMismatch(_) => "schedule-mismatch",
            CollapseError::GridMismatch => "grid-mismatch",
            CollapseError::Config(_) => "config",
            CollapseError::Format(_) => "format",
            CollapseError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, CollapseError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CollapseError {
    CollapseError::InvalidParameter(msg.into())
}

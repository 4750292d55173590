use std::path::PathBuf;

use hallucidet_core::Error as CoreError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing checkpoint {0} (run the producing command first)")]
    MissingCheckpoint(PathBuf),

    #[error("{0}")]
    Core(#[from] CoreError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("check failed: {}", .0.join("; "))]
    CheckFailed(Vec<String>),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::MissingCheckpoint(_) => EXIT_CONFIG,
            Self::Core(e) => match e {
                CoreError::Divergence { .. } => EXIT_DIVERGENCE,
                CoreError::InvalidConfig(_)
                | CoreError::InvalidLossWeights(_)
                | CoreError::BadFraction(_)
                | CoreError::UnknownMethod(_) => EXIT_CONFIG,
                _ => EXIT_FAILURE,
            },
            Self::CheckFailed(_) => EXIT_CHECK,
            _ => EXIT_FAILURE,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::MissingCheckpoint(_) => "missing_checkpoint",
            Self::Core(CoreError::Divergence { .. }) => "divergence",
            Self::Core(_) => "core",
            Self::Io(_) => "io",
            Self::Csv(_) => "csv",
            Self::Json(_) => "json",
            Self::Image(_) => "image",
            Self::CheckFailed(_) => "check_failed",
        }
    }

    /// Machine-readable form printed on stderr before exiting.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        });
        if let Self::CheckFailed(failures) = self {
            v["failures"] = serde_json::json!(failures);
        }
        v
    }
}

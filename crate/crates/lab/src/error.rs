use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error(transparent)]
    Core(#[from] reina_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("check failed: {0}")]
    Check(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Self::Format {
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Core(reina_core::Error::InvalidArgument(_)) => "invalid_argument",
            Self::Core(reina_core::Error::ResourceLimit(_)) => "resource_limit",
            Self::Core(reina_core::Error::OutOfDomain(_)) => "out_of_domain",
            Self::Core(reina_core::Error::Diverged { .. }) => "diverged",
            Self::Io { .. } => "io",
            Self::Format { .. } => "format",
            Self::Exists(_) => "exists",
            Self::Config(_) => "config",
            Self::Check(_) => "check_failed",
        }
    }

    /// The machine-readable form printed on stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind(), "message": self.to_string() } }).to_string()
    }
}

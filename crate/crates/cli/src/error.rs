use thiserror::Error;
use topoforge::datagen::DatagenError;
use topoforge::mesh::MeshError;
use topoforge::metrics::MetricsError;
use topoforge::networks::NetworkError;
use topoforge::problem::ProblemError;
use topoforge::simp::SimpError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Simp(#[from] SimpError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::File { .. } | CliError::Io(_) => "io",
            CliError::Json(_) => "json",
            CliError::Problem(_) | CliError::Mesh(_) => "problem",
            CliError::Simp(_) => "simp",
            CliError::Datagen(_) => "datagen",
            CliError::Network(_) => "network",
            CliError::Metrics(_) => "metrics",
        }
    }

    /// Process exit status: 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// One-line JSON description written to stderr.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "v": 1, "error": { "kind": self.kind(), "message": self.to_string() } })
            .to_string()
    }
}

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error{}: {message}", .path.as_ref().map(|p| format!(" at `{p}`")).unwrap_or_default())]
    Config { path: Option<String>, message: String },
    #[error("missing dependency {}: run `{step}` first", .path.display())]
    Dependency { path: PathBuf, step: &'static str },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] armorbench_core::Error),
}

impl CliError {
    pub fn config(path: Option<&str>, message: impl Into<String>) -> Self {
        CliError::Config {
            path: path.map(str::to_string),
            message: message.into(),
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Dependency { .. } => 3,
            _ => 1,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

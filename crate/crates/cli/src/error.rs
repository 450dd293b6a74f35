use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] fbsde_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            context: path.display().to_string(),
            source,
        }
    }

    /// 2 for configuration problems, 3 for numerical aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use fbsde_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(E::InvalidArgument(_)) => 2,
            CliError::Core(E::Diverged { .. } | E::NonFinite { .. }) => 3,
            _ => 1,
        }
    }
}

use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{command}: {source}")]
    Runtime {
        command: &'static str,
        #[source]
        source: lasslab_core::Error,
    },
}

impl CliError {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Config { .. } => ExitCode::from(2),
            CliError::Runtime { .. } => ExitCode::from(1),
        }
    }
}

/// Labels core errors with the stage that raised them; errors already
/// carrying a stage keep it.
pub trait Staged<T> {
    fn stage(self, command: &'static str, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Staged<T> for lasslab_core::Result<T> {
    fn stage(self, command: &'static str, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| {
            let source = match e {
                e @ lasslab_core::Error::Stage { .. } => e,
                e => e.staged(stage),
            };
            CliError::Runtime { command, source }
        })
    }
}

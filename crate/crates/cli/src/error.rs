use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Format(_) => 4,
        })
    }

    pub fn io(path: &std::path::Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<ncs_core::Error> for CliError {
    fn from(err: ncs_core::Error) -> Self {
        use ncs_core::Error as E;
        match err {
            E::Format(_) | E::Length { .. } | E::UnknownPrior(_) => CliError::Format(err.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

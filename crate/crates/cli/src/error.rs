use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, configuration or input artifacts. Exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running a valid command. Exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<vlrm_core::Error> for CliError {
    fn from(e: vlrm_core::Error) -> Self {
        use vlrm_core::Error as E;
        match e {
            E::Config(_) | E::Contract(_) | E::Decode(_) | E::HashMismatch { .. } | E::Format(_) | E::Json(_) => {
                CliError::Usage(e.to_string())
            }
            E::NonFinite(_) | E::Io(_) => CliError::Runtime(e.to_string()),
        }
    }
}

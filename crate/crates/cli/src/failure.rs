use std::process::ExitCode;

use caustiq::Error;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("post-selection kept no trajectories")]
    EmptySelection,

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Failure {
    /// 1 configuration or I/O, 2 numerical failure, 3 empty post-selection.
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Config(_) | Failure::Io(_) => 1,
            Failure::EmptySelection => 3,
            Failure::Core(e) => match e {
                Error::InvalidParams(_) | Error::GridMismatch(_) | Error::Format(_) | Error::Io(_) => 1,
                Error::TooFewTrajectories { .. } => 3,
                Error::Integration { .. }
                | Error::NoEnergyBracket(_)
                | Error::EndpointMismatch(_)
                | Error::InsufficientBins { .. }
                | Error::NoTransition { .. } => 2,
            },
        })
    }
}

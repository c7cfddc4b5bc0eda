use std::process::ExitCode;

use thiserror::Error;

/// Failures mapped onto the exit-code contract: 2 bad input, 3 empty
/// result, 4 numeric or output failure.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("empty result: {0}")]
    Empty(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("output error: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Empty(_) => 3,
            CliError::Numeric(_) | CliError::Output(_) => 4,
        })
    }
}

impl From<fryum::Error> for CliError {
    fn from(e: fryum::Error) -> Self {
        use fryum::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidParameter { .. }
            | E::InvalidAngularSpec(_)
            | E::ApertureTooSmall { .. }
            | E::RadiusUndefined(_)
            | E::DimensionTooSmall(_)
            | E::ErrorRateOutOfRange(_)
            | E::MixedBases
            | E::InsufficientSamples { .. }
            | E::InvalidSegmentation(_)
            | E::Grid(_)
            | E::EventLog(_) => CliError::Config(msg),
            E::AllPixelsDiscarded | E::EmptyKeptRegion { .. } => CliError::Empty(msg),
            _ => CliError::Numeric(msg),
        }
    }
}

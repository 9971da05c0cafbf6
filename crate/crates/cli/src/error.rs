use std::fmt;
use std::io::ErrorKind;
use std::process::ExitCode;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or unreadable inputs.
    Input(String),
    /// The pipeline failed or produced an unusable record.
    Pipeline(String),
    /// A requested `--check` did not hold.
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Pipeline(_) => 3,
            CliError::Check(_) => 4,
        }
    }

    pub fn exit(&self) -> ExitCode {
        ExitCode::from(self.exit_code())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Pipeline(m) => write!(f, "pipeline error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<icontra_core::Error> for CliError {
    fn from(e: icontra_core::Error) -> Self {
        use icontra_core::Error as E;
        match &e {
            E::Io { path, source } if source.kind() == ErrorKind::NotFound => {
                CliError::Input(format!("file not found: {}", path.display()))
            }
            E::InvalidArgument(_) | E::Format { .. } | E::Io { .. } => CliError::Input(e.to_string()),
            _ => CliError::Pipeline(e.to_string()),
        }
    }
}

impl From<icontra_service::ServiceError> for CliError {
    fn from(e: icontra_service::ServiceError) -> Self {
        CliError::Pipeline(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    #[test]
    fn core_errors_map_to_exit_codes() {
        let missing = icontra_core::Error::io(
            PathBuf::from("/no/such.png"),
            std::io::Error::from(ErrorKind::NotFound),
        );
        let err = CliError::from(missing);
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/no/such.png"));
        let unusable = icontra_core::Error::UnusableRecord { psnr: 20.0, floor: 25.0 };
        assert_eq!(CliError::from(unusable).exit_code(), 3);
        assert_eq!(CliError::from(icontra_core::Error::invalid("x")).exit_code(), 2);
        assert_eq!(CliError::Check("x".into()).exit_code(), 4);
    }
}

use std::fmt;
use std::process::ExitCode;

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or design: exit 2.
    Usage(String),
    /// Unreadable, malformed or inconsistent input data: exit 3.
    Data(String),
    /// The estimation itself broke down: exit 4.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        })
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<iwgvem::Error> for CliError {
    fn from(e: iwgvem::Error) -> Self {
        use iwgvem::Error as E;
        match e {
            _ if e.is_numerical() => CliError::Numerical(e.to_string()),
            E::Config(_) | E::Design(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_errors_map_to_stable_codes() {
        let cases = [
            (iwgvem::Error::Singular("x".into()), 4),
            (iwgvem::Error::DegenerateWeights { person: 0, draw: 1 }, 4),
            (iwgvem::Error::Config("x".into()), 2),
            (iwgvem::Error::Design("x".into()), 2),
            (iwgvem::Error::InvalidData("x".into()), 3),
            (iwgvem::Error::Dimension("x".into()), 3),
        ];
        for (e, want) in cases {
            assert_eq!(CliError::from(e).exit_code(), ExitCode::from(want));
        }
    }
}

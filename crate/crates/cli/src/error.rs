use std::fmt;
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Config { line: Option<usize>, message: String },
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError::Config {
            line: None,
            message: message.into(),
        }
    }

    pub fn config_at(line: usize, message: impl Into<String>) -> Self {
        CliError::Config {
            line: Some(line),
            message: message.into(),
        }
    }

    #[cfg(test)]
    pub fn line(&self) -> Option<usize> {
        match self {
            CliError::Config { line, .. } => *line,
            _ => None,
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config { .. } => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        })
    }
}

impl fmt::Display for CliError {
    // Single line, `kind: [line N: ]message`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat = |s: &str| s.replace('\n', " ");
        match self {
            CliError::Config {
                line: Some(l),
                message,
            } => write!(f, "config error: line {l}: {}", flat(message)),
            CliError::Config { line: None, message } => write!(f, "config error: {}", flat(message)),
            CliError::Numerical(m) => write!(f, "numerical error: {}", flat(m)),
            CliError::Io(m) => write!(f, "io error: {}", flat(m)),
        }
    }
}

impl std::error::Error for CliError {}

impl From<newtonflow::Error> for CliError {
    fn from(e: newtonflow::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::config(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

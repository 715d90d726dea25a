use std::fmt;

/// Failure classes with stable process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad arguments, unreadable or malformed files, or a request the server rejected.
    Input,
    /// The server could not be reached or the exchange broke off.
    Transport,
    NotFound,
    Server,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Input => 2,
            Kind::Transport => 3,
            Kind::NotFound => 4,
            Kind::Server => 5,
        }
    }

    /// Kind of an HTTP error status.
    pub fn of_status(status: u16) -> Kind {
        match status {
            404 => Kind::NotFound,
            400..=499 => Kind::Input,
            _ => Kind::Server,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        Self::new(Kind::Input, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = Result<T, CliError>;

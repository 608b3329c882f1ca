use lddmm_core::Error;

/// A one-line reason plus the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub const USAGE: u8 = 2;
pub const DIVERGENCE: u8 = 3;
pub const IO: u8 = 4;
pub const CORRESPONDENCE: u8 = 5;
pub const OTHER: u8 = 1;

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Failure {
            code: IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidConfig(_) => USAGE,
            Error::Divergence { .. } | Error::NonFiniteState { .. } | Error::NonFiniteGradient(_) => DIVERGENCE,
            Error::Io { .. } | Error::Parse { .. } | Error::Serialization(_) => IO,
            Error::MissingCorrespondence(_) => CORRESPONDENCE,
            _ => OTHER,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

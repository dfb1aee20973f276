use softclu::Error;

pub const VERIFY_FAILED: u8 = 1;
pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERICAL: u8 = 4;
pub const CHECKPOINT: u8 = 5;

/// An error together with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(CONFIG, anyhow::anyhow!(message.into()))
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(DATA, anyhow::anyhow!(message.into()))
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self::new(CHECKPOINT, anyhow::anyhow!(message.into()))
    }

    pub fn verify(message: impl Into<String>) -> Self {
        Self::new(VERIFY_FAILED, anyhow::anyhow!(message.into()))
    }

    pub fn context(self, context: impl std::fmt::Display + Send + Sync + 'static) -> Self {
        Self {
            code: self.code,
            error: self.error.context(context),
        }
    }
}

pub fn code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_) => CONFIG,
        Error::Parse { .. } | Error::EmptyCloud | Error::Io { .. } => DATA,
        Error::Checkpoint(_) => CHECKPOINT,
        Error::Numerical(_) | Error::Shape(_) | Error::Size(_) | Error::Divisibility { .. } => NUMERICAL,
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self::new(code_for(&error), error)
    }
}

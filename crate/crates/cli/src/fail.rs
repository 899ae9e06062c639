use std::fmt;

use longview::runner::RunError;
use longview::synthesis::SynthesisError;
use longview::world::WorldError;

/// A command failure and its exit code class.
#[derive(Debug)]
pub enum Failure {
    /// Bad input or configuration; exit 1.
    Invalid(String),
    /// Backend or I/O failure; exit 2.
    Backend(String),
}

impl Failure {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Failure::Invalid(msg.into())
    }

    pub fn backend(e: impl fmt::Display) -> Self {
        Failure::Backend(e.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Backend(_) => 2,
        }
    }

    pub fn from_world(e: WorldError) -> Self {
        match e {
            WorldError::Spec(_) | WorldError::UnknownTask(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Backend(e.to_string()),
        }
    }

    pub fn from_run(e: RunError) -> Self {
        match e {
            RunError::Policy(_) => Failure::Invalid(e.to_string()),
            RunError::Tool(_) => Failure::Backend(e.to_string()),
        }
    }

    pub fn from_synthesis(e: SynthesisError) -> Self {
        match e {
            SynthesisError::Config(_) | SynthesisError::Task(_) => Failure::Invalid(e.to_string()),
            SynthesisError::Tool { .. } => Failure::Backend(e.to_string()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) => write!(f, "invalid input: {m}"),
            Failure::Backend(m) => write!(f, "{m}"),
        }
    }
}

pub trait OrFail<T> {
    fn or_invalid(self, context: impl fmt::Display) -> Result<T, Failure>;
    fn or_io(self, context: impl fmt::Display) -> Result<T, Failure>;
}

impl<T, E: fmt::Display> OrFail<T> for Result<T, E> {
    fn or_invalid(self, context: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(format!("{context}: {e}")))
    }

    fn or_io(self, context: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::Backend(format!("{context}: {e}")))
    }
}

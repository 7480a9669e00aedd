use std::fmt;

use thiserror::Error;

/// One violated model invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Zero-based agent index, `None` for market-level fields.
    pub agent: Option<usize>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.agent {
            Some(i) => write!(f, "agent {i}, field {}: {}", self.field, self.message),
            None => write!(f, "field {}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid market model:\n{}", list(.0))]
    Invalid(Vec<Violation>),

    #[error("t = {t} outside [0, {horizon}]")]
    Domain { t: f64, horizon: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("interaction matrix not invertible (smallest singular value {smallest_sv:e})")]
    Singular { smallest_sv: f64 },

    #[error("Riccati blow-up at t={t} in block {block}")]
    BlowUp { t: f64, block: String },

    #[error("homogeneous solver requires identical agents and all-ones weights")]
    NotHomogeneous,

    #[error("invariant region argument not applicable: {0}")]
    NotApplicable(String),

    #[error("agent count mismatch: model has {model}, policy has {policy}")]
    AgentMismatch { model: usize, policy: usize },

    #[error("coefficient blocks were not retained for this solution")]
    BlocksDropped,

    #[error("horizon T={horizon} exceeds the well-posedness bound {t_max}")]
    IllPosed { horizon: f64, t_max: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  - {x}")).collect::<Vec<_>>().join("\n")
}

impl Error {
    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) | Error::Config(_) | Error::Json(_) | Error::NotHomogeneous
            | Error::NotApplicable(_) | Error::AgentMismatch { .. } | Error::Domain { .. } => 2,
            Error::IllPosed { .. } => 4,
            Error::Io(_) | Error::Csv(_) => 1,
            Error::Singular { .. } | Error::BlowUp { .. } | Error::BlocksDropped => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

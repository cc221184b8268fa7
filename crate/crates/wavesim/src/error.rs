use std::path::PathBuf;

/// Faults that reject an input artifact or abort a simulation.
#[derive(Debug, thiserror::Error)]
pub enum SimError {
    /// A configuration field failed validation. Always names the field and
    /// echoes the offending value so sweeps can be debugged from logs alone.
    #[error("config field `{field}` {reason} (got {value})")]
    InvalidConfig {
        field: String,
        value: String,
        reason: String,
    },

    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse `{path}`: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("trajectory `{id}`: {reason}")]
    Trajectory { id: String, reason: String },

    /// A follower's bumper-to-bumper gap closed to zero or below.
    #[error("collision at step {step}: vehicle {rear_id} ran into vehicle {front_id}")]
    Collision { front_id: u32, rear_id: u32, step: u64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Miscellaneous precondition violation (mismatched descriptors, bad
    /// shapes, out-of-domain arguments).
    #[error("{0}")]
    Invalid(String),
}

impl SimError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for faults that indicate a broken simulation run (as opposed to
    /// bad usage or unreadable inputs). The CLI maps these to exit code 2.
    pub fn is_sim_fault(&self) -> bool {
        matches!(
            self,
            SimError::Collision { .. } | SimError::NonFinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, SimError>;

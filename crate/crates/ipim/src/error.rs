//! Error types shared across the crate.

use thiserror::Error;

/// Failure to parse a unit-suffixed value (`"150us"`, `"10Mbps"`).
#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("invalid value {input:?}: {reason}")]
pub struct UnitParseError {
    pub input: String,
    pub reason: String,
}

impl UnitParseError {
    pub fn new(input: impl Into<String>, reason: impl Into<String>) -> Self {
        UnitParseError {
            input: input.into(),
            reason: reason.into(),
        }
    }
}

/// Shim encoding failures. Presence is derived from the optional fields, so
/// the only rejectable headers are those carrying out-of-range field values.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("timing field {field} = {value} exceeds the 10-bit compact range")]
    TimingOverflow { field: &'static str, value: u64 },
    #[error("integrity cover 0x{0:02x} uses bits outside the defined field classes")]
    BadCover(u8),
    #[error("capacity class {0} exceeds the 4-bit range")]
    BadRateClass(u8),
    #[error("unsupported shim version {0}")]
    BadVersion(u8),
}

/// Shim decoding failures.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("input ends mid-{context} (need {needed} more bytes)")]
    Truncated { context: &'static str, needed: usize },
    #[error("unknown shim version {0}")]
    BadVersion(u8),
    #[error("field {field} holds undefined value {value}")]
    BadValue { field: &'static str, value: u8 },
}

/// Integrity digest computation failures.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum IntegrityError {
    #[error("mode {0} requires a nonempty salt")]
    MissingSalt(&'static str),
    #[error("plain mode takes no salt")]
    UnexpectedSalt,
}

/// Arrival reconstruction failures.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ArrivalError {
    /// No subset of outstanding nonces explains an observed sum: tampering,
    /// duplication, or state loss.
    #[error("observation {observation} (sum delta {delta}) is explained by no subset of outstanding nonces")]
    Inconsistent { observation: usize, delta: u32 },
    /// Two observations carry the same observer nonce with different sums.
    #[error("conflicting observations share observer nonce {nonce}")]
    ConflictingObservation { nonce: u32 },
    /// The unexplained window outgrew the exact search (consumer bears the
    /// cost, but not unboundedly).
    #[error("arrival window too large for exact reconstruction ({size})")]
    WindowTooLarge { size: usize },
}

/// Network construction failures. `path` is the offending scenario field.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BuildError {
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("dangling reference at {path}: {name:?} does not exist")]
    DanglingReference { path: String, name: String },
}

impl BuildError {
    pub fn schema(path: impl Into<String>, reason: impl Into<String>) -> Self {
        BuildError::Schema {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn dangling(path: impl Into<String>, name: impl Into<String>) -> Self {
        BuildError::DanglingReference {
            path: path.into(),
            name: name.into(),
        }
    }
}

/// Analysis failures.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("flow {0:?} carries no timing tuples")]
    Empty(String),
    #[error("need at least {needed} samples, trace provides {got}")]
    InsufficientData { needed: usize, got: usize },
}

/// Trace (de)serialization failures.
#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace parse error at line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

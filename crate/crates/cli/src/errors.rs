//! Error-to-exit-code mapping: each failure class gets a distinct
//! nonzero code so scripts can branch on the cause.

use svydid_core::Error as CoreError;

#[derive(Debug)]
pub enum CliError {
    /// Invalid flags or flag combinations (exit 2).
    Usage(String),
    /// Input file could not be parsed (exit 3).
    Parse(String),
    /// A named column is absent from the header (exit 4).
    MissingColumn(String),
    /// The survey design is invalid (exit 5).
    Design(CoreError),
    /// Model fitting failed: separation, overlap, convergence (exit 6).
    Fit(CoreError),
    /// Any other estimation failure (exit 7).
    Estimation(CoreError),
    /// Filesystem failure (exit 8).
    Io(std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Parse(_) => 3,
            CliError::MissingColumn(_) => 4,
            CliError::Design(_) => 5,
            CliError::Fit(_) => 6,
            CliError::Estimation(_) => 7,
            CliError::Io(_) => 8,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Parse(m) => write!(f, "parse error: {m}"),
            CliError::MissingColumn(c) => write!(f, "missing column '{c}'"),
            CliError::Design(e) => write!(f, "invalid design: {e}"),
            CliError::Fit(e) => write!(f, "model fitting failed: {e}"),
            CliError::Estimation(e) => write!(f, "estimation failed: {e}"),
            CliError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

/// Classify a core error into the design / fit / other buckets.
pub fn classify(e: CoreError) -> CliError {
    match e {
        CoreError::NonpositiveWeight { .. }
        | CoreError::SingletonStratum(_)
        | CoreError::InvalidSamplingFraction { .. }
        | CoreError::InconsistentFpc { .. }
        | CoreError::NonpositiveDf(_)
        | CoreError::TooFewPsus(_) => CliError::Design(e),
        CoreError::Separation(_)
        | CoreError::IrlsNoConvergence(_)
        | CoreError::PropensityOverlap { .. } => CliError::Fit(e),
        other => CliError::Estimation(other),
    }
}

use thiserror::Error;

/// Errors produced by design construction, estimation, and variance routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("weight at index {index} is not strictly positive (got {value})")]
    NonpositiveWeight { index: usize, value: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("stratum '{0}' has a single sampled PSU; variance requires n_h >= 2 per stratum")]
    SingletonStratum(String),

    #[error("invalid sampling fraction {value} for stratum '{stratum}' (must lie in [0, 1])")]
    InvalidSamplingFraction { stratum: String, value: f64 },

    #[error(
        "inconsistent FPC for stratum '{stratum}': population count implies f = {from_count}, \
         stated fraction is {stated}"
    )]
    InconsistentFpc {
        stratum: String,
        from_count: f64,
        stated: f64,
    },

    #[error("design degrees of freedom are not positive ({0}); inference is impossible")]
    NonpositiveDf(i64),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("panel is unbalanced: unit '{unit}' is missing period {period}")]
    UnbalancedPanel { unit: String, period: i64 },

    #[error("first_treat is not constant within unit '{0}'")]
    InconsistentFirstTreat(String),

    #[error("{what} is not constant within {group} '{label}'")]
    InconsistentWithinGroup {
        what: &'static str,
        group: &'static str,
        label: String,
    },

    #[error("empty cell for cohort {cohort} at period {period}: {which} group has no mass")]
    EmptyCell {
        cohort: i64,
        period: i64,
        which: &'static str,
    },

    #[error("no post-treatment (g, t) cells to aggregate")]
    NoPostCells,

    #[error("design matrix has rank 0 after dropping collinear columns")]
    RankZero,

    #[error("singular cross-product matrix: rank {rank} of {cols} columns (condition {condition:.3e})")]
    SingularBread {
        rank: usize,
        cols: usize,
        condition: f64,
    },

    #[error("zero residual degrees of freedom: n = {n}, k = {k}")]
    ZeroResidualDf { n: usize, k: usize },

    #[error("apparent perfect separation in logistic fit: |beta| exceeded {0}")]
    Separation(f64),

    #[error("logistic fit did not converge within {0} iterations")]
    IrlsNoConvergence(usize),

    #[error("propensity score at or above 1 - 1e-6 after clipping for {count} observation(s), first at index {first}")]
    PropensityOverlap { count: usize, first: usize },

    #[error("no variation in treatment after demeaning")]
    NoTreatmentVariation,

    #[error("invalid confidence level {0} (must lie strictly between 0 and 1)")]
    InvalidLevel(f64),

    #[error("invalid degrees of freedom {0}")]
    InvalidDf(usize),

    #[error("replicate spec invalid: {0}")]
    ReplicateSpec(String),

    #[error("fewer than 2 PSUs ({0}); cluster variance is undefined")]
    TooFewPsus(usize),

    #[error("infeasible allocation: {0}")]
    InfeasibleAllocation(String),

    #[error("estimator failed in {failures} of {reps} replications, above the 1% cap")]
    TooManyFailures { failures: usize, reps: usize },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

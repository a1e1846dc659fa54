use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-monotone missingness in {} subject(s): {}", .0.len(), format_violations(.0))]
    NonMonotone(Vec<MonotoneViolation>),

    #[error("rows with missing baseline data: {0:?}")]
    MissingBaseline(Vec<usize>),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("design matrix is rank deficient ({columns} columns); use a positive ridge")]
    RankDeficient { columns: usize },

    #[error("treatment is constant among subjects observed at time {time}; cannot fit the propensity score")]
    SingleArm { time: usize },

    #[error("no subjects available to fit {what} at time {time}, arm {arm}")]
    EmptySubset {
        what: &'static str,
        time: usize,
        arm: u8,
    },

    #[error("estimator {estimator} requires nuisance `{nuisance}`, which was not supplied")]
    MissingNuisance {
        estimator: &'static str,
        nuisance: &'static str,
    },

    #[error("calibrated estimator requires calibration weights")]
    MissingWeights,

    #[error("calibration did not converge after {iterations} iterations (residual {residual:.3e})")]
    CalibrationFailed { iterations: usize, residual: f64 },

    #[error("{failed} of {total} bootstrap replicates failed")]
    Bootstrap { failed: usize, total: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneViolation {
    pub row: usize,
    pub missing_at: usize,
    pub observed_at: usize,
}

fn format_violations(v: &[MonotoneViolation]) -> String {
    v.iter()
        .take(10)
        .map(|m| {
            format!(
                "row {} (missing at {}, observed at {})",
                m.row, m.missing_at, m.observed_at
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    /// True for failures caused by the input data rather than the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Schema(_)
                | Error::NonMonotone(_)
                | Error::MissingBaseline(_)
                | Error::EmptyDataset
                | Error::InvalidInput(_)
                | Error::SingleArm { .. }
                | Error::EmptySubset { .. }
                | Error::MissingNuisance { .. }
                | Error::MissingWeights
                | Error::Io(_)
        )
    }
}

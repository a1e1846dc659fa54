//! Multiply robust estimation of the average treatment effect under
//! jump-to-reference for trials with monotone dropout.

pub mod calibrate;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod nuisance;
pub mod regress;
pub mod sim;

pub use calibrate::{solve_entropy_weights, CalibrationProblem, CalibrationSpec, CalibrationWeights, Moments, WeightSet};
pub use dataset::{CsvSchema, LoadOptions, TrialDataset};
pub use error::{Error, Result};
pub use estimators::{estimate, EstimateValue, EstimatorKind};
pub use inference::{analyze, Analysis, AnalysisOptions, CiChoice, EstimateReport};
pub use nuisance::{fit_nuisances, BasisKind, ModelSpec, NuisanceValues};

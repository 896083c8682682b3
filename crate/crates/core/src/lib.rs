//! SIMEX-corrected estimation for the semiparametric transformation model
//! with length-biased, right-censored data and covariates measured with
//! additive error.

pub mod covariates;
pub mod datagen;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod model;
pub mod rng;
pub mod simex;
pub mod survival;

pub use covariates::Covariates;
pub use error::{Error, Result};
pub use estimator::{
    fit_naive, fit_true, profile_h, score, solve_beta, EstimatingEquations, FitOptions, FitResult,
    MonotoneStep, WeightScheme,
};
pub use model::TransformationLink;
pub use survival::{
    km_censoring_survivor, validate_cohort, weight_r, Cohort, StepSurvivor, SubjectRecord,
};
pub use datagen::{add_measurement_error, calibrate_censoring, draw_prevalent_cohort, SimScenario};
pub use simex::{
    bootstrap_ci, contaminate, simex_beta, simex_fit, simex_h, Extrapolant, ExtrapolationFit, FitReport,
    SimexConfig, SimexPath, SimexTransform, WaldInterval,
};
pub use harness::{
    emit_report, load_cohort_csv, run_simulation, sensitivity_analysis, ColumnMap, KeyValueConfig, Method,
    ReportFormat, SensitivityRow, SummaryRow,
};

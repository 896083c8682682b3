//! Refits under a grid of assumed measurement-error covariances.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::simulate::plain_interval;
use super::Method;
use crate::error::{Error, Result};
use crate::estimator::fit_naive;
use crate::model::TransformationLink;
use crate::simex::{bootstrap_simex, simex_beta, SimexConfig};
use crate::survival::Cohort;

/// One estimator under one assumed error level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub model: TransformationLink,
    /// Common diagonal added to the covariance of `W`; absent for the naive row.
    pub sigma_e: Option<f64>,
    pub method: Method,
    pub est: Vec<f64>,
    pub se: Vec<f64>,
    pub p_value: Vec<f64>,
}

/// `2·(1 − Φ(|z|))`.
pub fn two_sided_p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

fn row(model: TransformationLink, sigma_e: Option<f64>, method: Method, est: Vec<f64>, se: Vec<f64>) -> SensitivityRow {
    let p_value = est.iter().zip(&se).map(|(e, s)| two_sided_p_value(e / s)).collect();
    SensitivityRow {
        model,
        sigma_e,
        method,
        est,
        se,
        p_value,
    }
}

/// Naive row followed by one SIMEX row per `σ_e`, with
/// `Σ_η = cov(W) + σ_e·I`. `config.error_cov` is ignored.
pub fn sensitivity_analysis(
    cohort: &Cohort,
    link: TransformationLink,
    sigma_e_grid: &[f64],
    config: &SimexConfig,
) -> Result<Vec<SensitivityRow>> {
    let base = cohort.surrogates().sample_covariance();
    sensitivity_with_base(cohort, link, sigma_e_grid, config, &base)
}

/// As [`sensitivity_analysis`] with `base` in place of the sample covariance.
pub fn sensitivity_with_base(
    cohort: &Cohort,
    link: TransformationLink,
    sigma_e_grid: &[f64],
    config: &SimexConfig,
    base: &DMatrix<f64>,
) -> Result<Vec<SensitivityRow>> {
    let p = cohort.dim();
    if base.nrows() != p || base.ncols() != p {
        return Err(Error::InvalidCovariance(format!(
            "base covariance is {}x{}, cohort has {p} covariates",
            base.nrows(),
            base.ncols()
        )));
    }
    if let Some(bad) = sigma_e_grid.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("sigma_e {bad} outside [0, 1]")));
    }
    if config.bootstrap_reps < 2 {
        return Err(Error::InvalidArgument("standard errors need at least 2 bootstrap replicates".into()));
    }
    let naive = fit_naive(cohort, link, &config.fit)?;
    if !naive.converged {
        return Err(Error::NonConvergence(format!(
            "naive fit: score norm {:.3e} after {} iterations",
            naive.score_norm, naive.iterations
        )));
    }
    let ci = plain_interval(cohort, link, config, false, &naive.beta, config.seed)?;
    let mut rows = vec![row(link, None, Method::Naive, naive.beta.clone(), ci.se)];
    for &s in sigma_e_grid {
        let mut cfg = config.clone();
        cfg.error_cov = base + DMatrix::identity(p, p) * s;
        let (_, fit) = simex_beta(cohort, link, &cfg)?;
        let draws = bootstrap_simex(cohort, link, &cfg, Some(&naive.beta))?;
        rows.push(row(link, Some(s), Method::Simex, fit.predicted_at_minus_one, draws.standard_errors()));
    }
    Ok(rows)
}

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Method;
use crate::datagen::{calibrate_censoring, draw_prevalent_cohort, SimScenario};
use crate::error::{Error, Result};
use crate::estimator::{EstimatingEquations, FitOptions};
use crate::model::TransformationLink;
use crate::rng::{derive_seed, substream, tag};
use crate::simex::{bootstrap, bootstrap_simex, simex_beta, SimexConfig, WaldInterval};
use crate::survival::Cohort;

/// Attempts per replicate before the study gives up.
pub const MAX_ATTEMPTS: usize = 50;
/// Share of regenerated replicates above which the report carries a warning.
pub const REGENERATION_WARNING: f64 = 0.05;

/// Monte Carlo summary of one estimator under one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: TransformationLink,
    pub censoring_rate: f64,
    pub sigma_eta: f64,
    pub method: Method,
    pub reps: usize,
    /// Mean estimate minus the true value, per coordinate.
    pub bias: Vec<f64>,
    /// Empirical variance (`n − 1` divisor).
    pub var: Vec<f64>,
    pub mse: Vec<f64>,
    /// Coverage of the 95% intervals in percent; absent without a bootstrap.
    pub cp: Option<Vec<f64>>,
}

impl SummaryRow {
    pub fn from_estimates(
        model: TransformationLink,
        censoring_rate: f64,
        sigma_eta: f64,
        method: Method,
        beta0: &[f64],
        estimates: &[Vec<f64>],
        covered: Option<&[Vec<bool>]>,
    ) -> Self {
        let r = estimates.len() as f64;
        let p = beta0.len();
        let mean: Vec<f64> = (0..p).map(|j| estimates.iter().map(|e| e[j]).sum::<f64>() / r).collect();
        let bias = mean.iter().zip(beta0).map(|(m, b)| m - b).collect();
        let var = (0..p)
            .map(|j| estimates.iter().map(|e| (e[j] - mean[j]).powi(2)).sum::<f64>() / (r - 1.0))
            .collect();
        let mse = (0..p)
            .map(|j| estimates.iter().map(|e| (e[j] - beta0[j]).powi(2)).sum::<f64>() / r)
            .collect();
        let cp = covered.map(|c| {
            (0..p)
                .map(|j| 100.0 * c.iter().filter(|v| v[j]).count() as f64 / c.len() as f64)
                .collect()
        });
        SummaryRow {
            model,
            censoring_rate,
            sigma_eta,
            method,
            reps: estimates.len(),
            bias,
            var,
            mse,
            cp,
        }
    }
}

/// One method's result on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEstimate {
    pub method: Method,
    pub beta: Vec<f64>,
    pub interval: Option<WaldInterval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    /// Cohorts drawn before one was usable.
    pub attempts: usize,
    pub observed_censoring: f64,
    pub estimates: Vec<MethodEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub rows: Vec<SummaryRow>,
    /// Calibrated upper bound `c` of the censoring law.
    pub censoring_bound: f64,
    pub mean_observed_censoring: f64,
    pub regenerated: usize,
    pub bootstrap_failures: usize,
    pub warnings: Vec<String>,
    pub replicates: Vec<ReplicateResult>,
}

/// Faults that send a replicate back for a fresh cohort.
fn retryable(e: &Error) -> bool {
    matches!(
        e,
        Error::Validation(_)
            | Error::NoEvents
            | Error::NonConvergence(_)
            | Error::UnstableContamination { .. }
            | Error::BracketFailure { .. }
            | Error::SingularRiskSet { .. }
            | Error::DegenerateWeight { .. }
            | Error::Degenerate(_)
    )
}

fn converged_fit(eq: &EstimatingEquations, z: &crate::covariates::Covariates, opts: &FitOptions) -> Result<Vec<f64>> {
    let fit = eq.solve_beta(z, opts)?;
    if !fit.converged {
        return Err(Error::NonConvergence(format!(
            "score norm {:.3e} after {} iterations",
            fit.score_norm, fit.iterations
        )));
    }
    Ok(fit.beta)
}

/// Bootstrap of the naive or true-covariate fit.
pub(crate) fn plain_interval(
    cohort: &Cohort,
    link: TransformationLink,
    config: &SimexConfig,
    truth: bool,
    point: &[f64],
    seed: u64,
) -> Result<WaldInterval> {
    let draws = bootstrap(cohort, config.bootstrap_reps, seed, |res, _| {
        let eq = EstimatingEquations::new(res, link, config.fit.weighting)?;
        let z = if truth {
            res.truths().ok_or_else(|| Error::InvalidArgument("cohort lacks true covariates".into()))?
        } else {
            res.surrogates()
        };
        let opts = FitOptions {
            beta_init: Some(point.to_vec()),
            ..config.fit.clone()
        };
        converged_fit(&eq, &z, &opts)
    })?;
    Ok(WaldInterval::new(point.to_vec(), draws))
}

fn fit_replicate(
    cohort: &Cohort,
    link: TransformationLink,
    methods: &[Method],
    config: &SimexConfig,
    seed: u64,
) -> Result<Vec<MethodEstimate>> {
    let eq = EstimatingEquations::new(cohort, link, config.fit.weighting)?;
    let w = cohort.surrogates();
    let naive = converged_fit(&eq, &w, &config.fit)?;
    let with_ci = config.bootstrap_reps > 0;
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let est = match m {
            Method::Naive => MethodEstimate {
                method: m,
                interval: if with_ci {
                    Some(plain_interval(cohort, link, config, false, &naive, seed)?)
                } else {
                    None
                },
                beta: naive.clone(),
            },
            Method::True => {
                let x = cohort
                    .truths()
                    .ok_or_else(|| Error::InvalidArgument("cohort lacks true covariates".into()))?;
                let beta = converged_fit(&eq, &x, &config.fit)?;
                MethodEstimate {
                    method: m,
                    interval: if with_ci {
                        Some(plain_interval(cohort, link, config, true, &beta, seed)?)
                    } else {
                        None
                    },
                    beta,
                }
            }
            Method::Simex => {
                let mut cfg = config.clone();
                cfg.seed = seed;
                cfg.fit.beta_init = Some(naive.clone());
                let (_, ext) = simex_beta(cohort, link, &cfg)?;
                let beta = ext.predicted_at_minus_one;
                let interval = if with_ci {
                    let draws = bootstrap_simex(cohort, link, &cfg, Some(&naive))?;
                    Some(WaldInterval::new(beta.clone(), draws))
                } else {
                    None
                };
                MethodEstimate {
                    method: m,
                    beta,
                    interval,
                }
            }
        };
        out.push(est);
    }
    Ok(out)
}

/// The simulation study: calibrate censoring, then for each replicate draw
/// a cohort, fit every method and bootstrap its interval. Replicates that
/// fail validation or numerically are redrawn from the next substream.
pub fn run_simulation(
    scenario: &SimScenario,
    methods: &[Method],
    reps: usize,
    simex: &SimexConfig,
    seed: u64,
) -> Result<SimulationOutcome> {
    if reps < 2 {
        return Err(Error::Config("a simulation needs at least 2 replicates".into()));
    }
    if methods.is_empty() {
        return Err(Error::Config("no methods requested".into()));
    }
    if simex.bootstrap_reps == 1 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    scenario.validate()?;
    simex.validate(scenario.dim())?;
    let c = calibrate_censoring(scenario, scenario.target_censoring, seed)?;

    let results: Vec<Result<ReplicateResult>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut last = None;
            for attempt in 0..MAX_ATTEMPTS {
                let key = [tag::COHORT, r as u64, attempt as u64];
                let cohort = match draw_prevalent_cohort(scenario, c, &mut substream(seed, &key)) {
                    Ok(c) => c,
                    Err(e) if retryable(&e) => {
                        last = Some(e);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let rep_seed = derive_seed(seed, &[tag::REPLICATE, r as u64, attempt as u64]);
                match fit_replicate(&cohort, scenario.link, methods, simex, rep_seed) {
                    Ok(estimates) => {
                        return Ok(ReplicateResult {
                            replicate: r,
                            attempts: attempt + 1,
                            observed_censoring: cohort.censoring_rate(),
                            estimates,
                        })
                    }
                    Err(e) if retryable(&e) => last = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(Error::NonConvergence(format!(
                "replicate {r} failed {MAX_ATTEMPTS} times, last: {}",
                last.map_or_else(String::new, |e| e.to_string())
            )))
        })
        .collect();
    let replicates = results.into_iter().collect::<Result<Vec<_>>>()?;

    let regenerated: usize = replicates.iter().map(|r| r.attempts - 1).sum();
    let bootstrap_failures = replicates
        .iter()
        .flat_map(|r| &r.estimates)
        .filter_map(|e| e.interval.as_ref())
        .map(|i| i.draws.failures)
        .sum();
    let mut warnings = Vec::new();
    if regenerated as f64 > REGENERATION_WARNING * reps as f64 {
        warnings.push(format!(
            "scenario health: {regenerated} regenerated cohorts over {reps} replicates"
        ));
    }
    let rows = methods
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let est: Vec<Vec<f64>> = replicates.iter().map(|r| r.estimates[mi].beta.clone()).collect();
            let covered: Option<Vec<Vec<bool>>> = replicates
                .iter()
                .map(|r| {
                    r.estimates[mi]
                        .interval
                        .as_ref()
                        .map(|ci| (0..scenario.dim()).map(|j| ci.covers(j, scenario.beta0[j])).collect())
                })
                .collect();
            SummaryRow::from_estimates(
                scenario.link,
                scenario.target_censoring,
                scenario.sigma_eta,
                m,
                &scenario.beta0,
                &est,
                covered.as_deref(),
            )
        })
        .collect();
    let mean_observed_censoring =
        replicates.iter().map(|r| r.observed_censoring).sum::<f64>() / reps as f64;
    Ok(SimulationOutcome {
        rows,
        censoring_bound: c,
        mean_observed_censoring,
        regenerated,
        bootstrap_failures,
        warnings,
        replicates,
    })
}

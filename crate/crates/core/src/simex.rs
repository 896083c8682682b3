//! Simulation–extrapolation correction of `β` and `H`.
//!
//! For each `b` a single standard-normal matrix `η̃_b` is drawn from the
//! substream `(seed, CONTAMINATE, b)` and scaled by `√ζ L` for every grid
//! point, so the draws do not move when the grid changes and the transform
//! step replays exactly the contamination used for `β`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::covariates::{psd_cholesky, Covariates};
use crate::error::{Error, Result};
use crate::estimator::{EstimatingEquations, FitOptions, FitResult, MonotoneStep};
use crate::model::TransformationLink;
use crate::rng::{derive_seed, substream, tag};
use crate::survival::Cohort;

/// Largest share of `(b, ζ)` fits that may be dropped at one grid point.
pub const MAX_DROP_FRACTION: f64 = 0.2;
/// Attempts at drawing a bootstrap resample that contains an event.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 100;
const WALD_Z: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extrapolant {
    #[default]
    Quadratic,
}

impl Extrapolant {
    /// Number of free coefficients.
    pub fn parameters(self) -> usize {
        match self {
            Extrapolant::Quadratic => 3,
        }
    }
}

impl fmt::Display for Extrapolant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("quadratic")
    }
}

impl FromStr for Extrapolant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "quadratic" => Ok(Extrapolant::Quadratic),
            other => Err(Error::Config(format!("unknown extrapolant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimexConfig {
    /// Contaminated copies per grid point.
    pub b: usize,
    pub zeta_grid: Vec<f64>,
    pub extrapolant: Extrapolant,
    pub seed: u64,
    pub bootstrap_reps: usize,
    /// Contaminated copies per grid point inside each bootstrap resample;
    /// `b` when absent.
    pub bootstrap_b: Option<usize>,
    /// Measurement-error covariance `Σ_η`.
    pub error_cov: DMatrix<f64>,
    pub fit: FitOptions,
}

impl SimexConfig {
    /// Desk-scale defaults: `B = 50`, grid `0, 0.25, …, 2`, 200 bootstrap draws.
    pub fn new(error_cov: DMatrix<f64>) -> Self {
        SimexConfig {
            b: 50,
            zeta_grid: zeta_grid(2.0, 0.25).expect("default grid is valid"),
            extrapolant: Extrapolant::Quadratic,
            seed: 0,
            bootstrap_reps: 200,
            bootstrap_b: None,
            error_cov,
            fit: FitOptions::default(),
        }
    }

    /// Check the configuration against a `p`-covariate cohort and return the
    /// Cholesky factor of `Σ_η`.
    pub fn validate(&self, p: usize) -> Result<DMatrix<f64>> {
        if self.b == 0 || self.bootstrap_b == Some(0) {
            return Err(Error::Config("B must be positive".into()));
        }
        let g = &self.zeta_grid;
        if g.len() < self.extrapolant.parameters() {
            return Err(Error::Config(format!(
                "{} grid points cannot identify a {} extrapolant",
                g.len(),
                self.extrapolant
            )));
        }
        if g[0] != 0.0 {
            return Err(Error::Config("zeta grid must start at 0".into()));
        }
        if g.iter().any(|z| !z.is_finite()) || g.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("zeta grid must be strictly increasing".into()));
        }
        if self.error_cov.nrows() != p {
            return Err(Error::InvalidCovariance(format!(
                "error covariance is {}x{}, cohort has {p} covariates",
                self.error_cov.nrows(),
                self.error_cov.ncols()
            )));
        }
        psd_cholesky(&self.error_cov)
    }
}

/// `0, step, 2·step, …` up to and including `max` (within rounding).
pub fn zeta_grid(max: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && max > 0.0 && max.is_finite()) {
        return Err(Error::Config(format!("bad zeta grid: max {max}, step {step}")));
    }
    let m = (max / step + 1e-9).floor() as usize;
    Ok((0..=m).map(|i| i as f64 * step).collect())
}

/// Standard-normal draws `η̃` scaled by `L`, one row per subject.
fn draw_noise(n: usize, l: &DMatrix<f64>, rng: &mut impl Rng) -> Covariates {
    let p = l.nrows();
    let mut out = Covariates::zeros(n, p);
    let mut e = vec![0.0; p];
    for i in 0..n {
        for v in e.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let row = out.row_mut(i);
        for a in 0..p {
            row[a] = (0..=a).map(|c| l[(a, c)] * e[c]).sum();
        }
    }
    out
}

fn shifted(w: &Covariates, noise: &Covariates, zeta: f64) -> Covariates {
    let s = zeta.sqrt();
    let data = w
        .as_slice()
        .iter()
        .zip(noise.as_slice())
        .map(|(a, e)| a + s * e)
        .collect();
    Covariates::new(w.nrows(), w.ncols(), data).expect("same shape")
}

/// `W + √ζ · L η̃`. The stream advances by `n·p` normals whatever `ζ` is.
pub fn contaminate(
    w: &Covariates,
    zeta: f64,
    error_cov: &DMatrix<f64>,
    rng: &mut impl Rng,
) -> Result<Covariates> {
    if !(zeta >= 0.0 && zeta.is_finite()) {
        return Err(Error::InvalidArgument(format!("zeta must be non-negative, got {zeta}")));
    }
    if error_cov.nrows() != w.ncols() {
        return Err(Error::InvalidCovariance(format!(
            "error covariance is {}x{}, covariates have {} columns",
            error_cov.nrows(),
            error_cov.ncols(),
            w.ncols()
        )));
    }
    let l = psd_cholesky(error_cov)?;
    let noise = draw_noise(w.nrows(), &l, rng);
    if zeta == 0.0 {
        return Ok(w.clone());
    }
    Ok(shifted(w, &noise, zeta))
}

fn noise_for(seed: u64, b: usize, n: usize, l: &DMatrix<f64>) -> Covariates {
    draw_noise(n, l, &mut substream(seed, &[tag::CONTAMINATE, b as u64]))
}

/// One `β̂(b, ζ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawFit {
    pub b: usize,
    pub zeta: f64,
    pub beta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimexPath {
    pub zeta_grid: Vec<f64>,
    /// `β̂(ζ)`, the mean over retained `b`, per grid point.
    pub mean_beta: Vec<Vec<f64>>,
    /// Every `(b, ζ)` fit, ordered by `b` then `ζ`.
    pub raw: Vec<RawFit>,
    pub dropped_per_zeta: Vec<usize>,
    pub dropped_fits: usize,
    /// The uncontaminated fit shared by every `b` at `ζ = 0`.
    pub naive: FitResult,
}

/// Per-coordinate polynomial in `ζ` fitted by least squares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationFit {
    pub extrapolant: Extrapolant,
    /// `(γ₀, γ₁, γ₂)` per coordinate.
    pub gamma: Vec<Vec<f64>>,
    pub predicted_at_minus_one: Vec<f64>,
    /// Observed minus fitted, `[grid point][coordinate]`.
    pub residuals: Vec<Vec<f64>>,
}

impl ExtrapolationFit {
    /// Fit `values[m][j]` observed at `grid[m]`.
    pub fn fit(extrapolant: Extrapolant, grid: &[f64], values: &[Vec<f64>]) -> Result<Self> {
        let q = extrapolant.parameters();
        let m = grid.len();
        if m < q {
            return Err(Error::Config(format!("{m} grid points cannot identify a {extrapolant} extrapolant")));
        }
        if values.len() != m {
            return Err(Error::InvalidArgument(format!("{} rows for {m} grid points", values.len())));
        }
        let k = values.first().map_or(0, Vec::len);
        if values.iter().any(|v| v.len() != k) {
            return Err(Error::InvalidArgument("ragged extrapolation input".into()));
        }
        let design = DMatrix::from_fn(m, q, |r, c| grid[r].powi(c as i32));
        let y = DMatrix::from_fn(m, k, |r, c| values[r][c]);
        let svd = design.clone().svd(true, true);
        let coef = svd
            .solve(&y, 1e-14)
            .map_err(|e| Error::Degenerate(format!("extrapolation least squares: {e}")))?;
        let fitted = &design * &coef;
        let gamma: Vec<Vec<f64>> = (0..k).map(|c| coef.column(c).iter().copied().collect()).collect();
        let predicted_at_minus_one = gamma.iter().map(|g| eval_poly(g, -1.0)).collect();
        let residuals = (0..m)
            .map(|r| (0..k).map(|c| y[(r, c)] - fitted[(r, c)]).collect())
            .collect();
        Ok(ExtrapolationFit {
            extrapolant,
            gamma,
            predicted_at_minus_one,
            residuals,
        })
    }

    /// `φ(ζ, γ_j)`.
    pub fn eval(&self, j: usize, zeta: f64) -> f64 {
        eval_poly(&self.gamma[j], zeta)
    }
}

fn eval_poly(g: &[f64], x: f64) -> f64 {
    g.iter().rev().fold(0.0, |acc, c| acc * x + c)
}

fn check_drops(grid: &[f64], dropped: &[usize], total: usize) -> Result<()> {
    for (&zeta, &d) in grid.iter().zip(dropped) {
        if d as f64 > MAX_DROP_FRACTION * total as f64 {
            return Err(Error::UnstableContamination {
                zeta,
                dropped: d,
                total,
            });
        }
    }
    Ok(())
}

/// Index-ordered mean of the kept vectors.
fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>, len: usize) -> Vec<f64> {
    let mut sum = vec![0.0; len];
    let mut count = 0usize;
    for r in rows {
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
        count += 1;
    }
    sum.iter().map(|s| s / count as f64).collect()
}

/// Stages 1 to 3: contaminate, refit, average over `b`, extrapolate to `ζ = −1`.
pub fn simex_beta(
    cohort: &Cohort,
    link: TransformationLink,
    config: &SimexConfig,
) -> Result<(SimexPath, ExtrapolationFit)> {
    let l = config.validate(cohort.dim())?;
    let eq = EstimatingEquations::new(cohort, link, config.fit.weighting)?;
    simex_beta_with(&eq, &cohort.surrogates(), &l, config)
}

fn simex_beta_with(
    eq: &EstimatingEquations,
    w: &Covariates,
    l: &DMatrix<f64>,
    config: &SimexConfig,
) -> Result<(SimexPath, ExtrapolationFit)> {
    let grid = &config.zeta_grid;
    let p = w.ncols();
    let naive = eq.solve_beta(w, &config.fit)?;

    let per_b: Vec<Vec<RawFit>> = (0..config.b)
        .into_par_iter()
        .map(|b| {
            let noise = noise_for(config.seed, b, w.nrows(), l);
            let mut warm = naive.beta.clone();
            let mut fits = Vec::with_capacity(grid.len());
            for &zeta in grid {
                if zeta == 0.0 {
                    fits.push(RawFit {
                        b,
                        zeta,
                        beta: naive.beta.clone(),
                        converged: naive.converged,
                        iterations: naive.iterations,
                    });
                    continue;
                }
                let z = shifted(w, &noise, zeta);
                let opts = FitOptions {
                    beta_init: Some(warm.clone()),
                    ..config.fit.clone()
                };
                let fit = match eq.solve_beta(&z, &opts) {
                    Ok(f) => RawFit {
                        b,
                        zeta,
                        converged: f.converged && f.beta.iter().all(|v| v.is_finite()),
                        beta: f.beta,
                        iterations: f.iterations,
                    },
                    Err(_) => RawFit {
                        b,
                        zeta,
                        beta: vec![f64::NAN; p],
                        converged: false,
                        iterations: 0,
                    },
                };
                if fit.converged {
                    warm = fit.beta.clone();
                }
                fits.push(fit);
            }
            fits
        })
        .collect();

    let mut dropped_per_zeta = vec![0usize; grid.len()];
    for fits in &per_b {
        for (m, f) in fits.iter().enumerate() {
            if !f.converged {
                dropped_per_zeta[m] += 1;
            }
        }
    }
    check_drops(grid, &dropped_per_zeta, config.b)?;
    let mean_beta: Vec<Vec<f64>> = (0..grid.len())
        .map(|m| {
            mean_of(
                per_b.iter().map(|f| &f[m]).filter(|f| f.converged).map(|f| f.beta.as_slice()),
                p,
            )
        })
        .collect();
    let fit = ExtrapolationFit::fit(config.extrapolant, grid, &mean_beta)?;
    let path = SimexPath {
        zeta_grid: grid.clone(),
        mean_beta,
        raw: per_b.into_iter().flatten().collect(),
        dropped_fits: dropped_per_zeta.iter().sum(),
        dropped_per_zeta,
        naive,
    };
    Ok((path, fit))
}

/// `Ĥ_SIMEX` with the size of the monotone repair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimexTransform {
    pub h: MonotoneStep,
    /// Largest absolute change made by pooling adjacent violators.
    pub max_adjustment: f64,
    /// `Ĥ(t_k; ζ, β̂_SIMEX)` averaged over `b`, `[grid point][event time]`.
    pub mean_path: Vec<Vec<f64>>,
    pub dropped_fits: usize,
}

/// Stage 4: profile `H` at `β̂_SIMEX` on the replayed contaminated
/// covariates, average over `b` and extrapolate each event time.
pub fn simex_h(
    cohort: &Cohort,
    link: TransformationLink,
    config: &SimexConfig,
    beta_simex: &[f64],
) -> Result<SimexTransform> {
    let l = config.validate(cohort.dim())?;
    let eq = EstimatingEquations::new(cohort, link, config.fit.weighting)?;
    simex_h_with(&eq, &cohort.surrogates(), &l, config, beta_simex)
}

fn simex_h_with(
    eq: &EstimatingEquations,
    w: &Covariates,
    l: &DMatrix<f64>,
    config: &SimexConfig,
    beta_simex: &[f64],
) -> Result<SimexTransform> {
    let grid = &config.zeta_grid;
    let k = eq.event_times().len();
    let base = eq.profile_values(w, beta_simex)?;

    let per_b: Vec<Vec<Option<Vec<f64>>>> = (0..config.b)
        .into_par_iter()
        .map(|b| {
            let noise = noise_for(config.seed, b, w.nrows(), l);
            grid.iter()
                .map(|&zeta| {
                    if zeta == 0.0 {
                        return Some(base.clone());
                    }
                    let z = shifted(w, &noise, zeta);
                    eq.profile_values(&z, beta_simex)
                        .ok()
                        .filter(|h| h.iter().all(|v| v.is_finite()))
                })
                .collect()
        })
        .collect();

    let mut dropped = vec![0usize; grid.len()];
    for row in &per_b {
        for (m, h) in row.iter().enumerate() {
            if h.is_none() {
                dropped[m] += 1;
            }
        }
    }
    check_drops(grid, &dropped, config.b)?;
    let mean_path: Vec<Vec<f64>> = (0..grid.len())
        .map(|m| mean_of(per_b.iter().filter_map(|r| r[m].as_deref()), k))
        .collect();
    let fit = ExtrapolationFit::fit(config.extrapolant, grid, &mean_path)?;
    let raw = fit.predicted_at_minus_one;
    let repaired = pool_adjacent_violators(&raw);
    let max_adjustment = raw
        .iter()
        .zip(&repaired)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(SimexTransform {
        h: MonotoneStep::new(eq.event_times().to_vec(), repaired)?,
        max_adjustment,
        mean_path,
        dropped_fits: dropped.iter().sum(),
    })
}

/// Least-squares non-decreasing fit with equal weights.
pub fn pool_adjacent_violators(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (m2, c2) = blocks[blocks.len() - 1];
            let (m1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let c = c1 + c2;
            *blocks.last_mut().unwrap() = ((m1 * c1 as f64 + m2 * c2 as f64) / c as f64, c);
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, c)| std::iter::repeat_n(m, c))
        .collect()
}

/// Bootstrap replicates of some estimator, one row per successful resample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub replicates: Vec<Vec<f64>>,
    /// Resamples rejected for having no events.
    pub redraws: usize,
    /// Resamples whose estimator returned an error.
    pub failures: usize,
}

impl BootstrapDraws {
    /// Per-coordinate standard deviation with the `n − 1` divisor.
    pub fn standard_errors(&self) -> Vec<f64> {
        let r = self.replicates.len();
        let p = self.replicates.first().map_or(0, Vec::len);
        let mean = mean_of(self.replicates.iter().map(Vec::as_slice), p);
        (0..p)
            .map(|j| {
                let ss: f64 = self.replicates.iter().map(|x| (x[j] - mean[j]).powi(2)).sum();
                (ss / (r as f64 - 1.0)).sqrt()
            })
            .collect()
    }
}

/// Nonparametric bootstrap: resample subjects with replacement and apply
/// `estimate` to each resample. The closure receives the resample and a
/// seed private to it.
pub fn bootstrap<F>(cohort: &Cohort, reps: usize, seed: u64, estimate: F) -> Result<BootstrapDraws>
where
    F: Fn(&Cohort, u64) -> Result<Vec<f64>> + Sync,
{
    if reps < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    let n = cohort.len();
    let outcomes: Vec<Result<(usize, Result<Vec<f64>>)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, &[tag::BOOTSTRAP, r as u64]);
            let mut redraws = 0;
            let resample = loop {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                match cohort.resample(&idx) {
                    Ok(c) => break c,
                    Err(Error::NoEvents) if redraws + 1 < MAX_RESAMPLE_ATTEMPTS => redraws += 1,
                    Err(Error::NoEvents) => {
                        return Err(Error::Degenerate(format!(
                            "no bootstrap resample with an event after {MAX_RESAMPLE_ATTEMPTS} attempts"
                        )))
                    }
                    Err(e) => return Err(e),
                }
            };
            let est = estimate(&resample, derive_seed(seed, &[tag::BOOTSTRAP_FIT, r as u64]));
            Ok((redraws, est))
        })
        .collect();
    let mut draws = BootstrapDraws {
        replicates: Vec::with_capacity(reps),
        redraws: 0,
        failures: 0,
    };
    for o in outcomes {
        let (redraws, est) = o?;
        draws.redraws += redraws;
        match est {
            Ok(v) if v.iter().all(|x| x.is_finite()) => draws.replicates.push(v),
            _ => draws.failures += 1,
        }
    }
    if draws.replicates.len() < 2 {
        return Err(Error::NonConvergence(format!(
            "only {} of {reps} bootstrap replicates succeeded",
            draws.replicates.len()
        )));
    }
    Ok(draws)
}

/// Point estimate with bootstrap standard errors and Wald intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldInterval {
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub draws: BootstrapDraws,
}

impl WaldInterval {
    pub fn new(estimate: Vec<f64>, draws: BootstrapDraws) -> Self {
        let se = draws.standard_errors();
        let lower = estimate.iter().zip(&se).map(|(e, s)| e - WALD_Z * s).collect();
        let upper = estimate.iter().zip(&se).map(|(e, s)| e + WALD_Z * s).collect();
        WaldInterval {
            estimate,
            se,
            lower,
            upper,
            draws,
        }
    }

    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.lower[j] <= value && value <= self.upper[j]
    }
}

/// `β̂_SIMEX` on each resample, with the full-data solution as warm start.
pub fn bootstrap_simex(
    cohort: &Cohort,
    link: TransformationLink,
    config: &SimexConfig,
    warm_start: Option<&[f64]>,
) -> Result<BootstrapDraws> {
    let l = config.validate(cohort.dim())?;
    bootstrap(cohort, config.bootstrap_reps, config.seed, |resample, seed| {
        let eq = EstimatingEquations::new(resample, link, config.fit.weighting)?;
        let mut inner = config.clone();
        inner.seed = seed;
        inner.b = config.bootstrap_b.unwrap_or(config.b);
        if let Some(b) = warm_start {
            inner.fit.beta_init = Some(b.to_vec());
        }
        let (_, fit) = simex_beta_with(&eq, &resample.surrogates(), &l, &inner)?;
        Ok(fit.predicted_at_minus_one)
    })
}

/// SIMEX point estimate with bootstrap SE and 95% Wald interval.
pub fn bootstrap_ci(cohort: &Cohort, link: TransformationLink, config: &SimexConfig) -> Result<WaldInterval> {
    let (path, fit) = simex_beta(cohort, link, config)?;
    let draws = bootstrap_simex(cohort, link, config, Some(&path.naive.beta))?;
    Ok(WaldInterval::new(fit.predicted_at_minus_one, draws))
}

/// Everything produced by a full SIMEX analysis of one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub link: TransformationLink,
    pub n: usize,
    pub events: usize,
    pub b: usize,
    pub seed: u64,
    pub path: SimexPath,
    pub extrapolation: ExtrapolationFit,
    pub transform: SimexTransform,
    /// Absent when `bootstrap_reps` is zero.
    pub interval: Option<WaldInterval>,
}

impl FitReport {
    pub fn beta(&self) -> &[f64] {
        &self.extrapolation.predicted_at_minus_one
    }
}

/// Stages 1 to 4 plus the bootstrap.
pub fn simex_fit(cohort: &Cohort, link: TransformationLink, config: &SimexConfig) -> Result<FitReport> {
    let l = config.validate(cohort.dim())?;
    let eq = EstimatingEquations::new(cohort, link, config.fit.weighting)?;
    let w = cohort.surrogates();
    let (path, extrapolation) = simex_beta_with(&eq, &w, &l, config)?;
    let transform = simex_h_with(&eq, &w, &l, config, &extrapolation.predicted_at_minus_one)?;
    let interval = if config.bootstrap_reps > 0 {
        let draws = bootstrap_simex(cohort, link, config, Some(&path.naive.beta))?;
        Some(WaldInterval::new(extrapolation.predicted_at_minus_one.clone(), draws))
    } else {
        None
    };
    Ok(FitReport {
        link,
        n: cohort.len(),
        events: cohort.event_count(),
        b: config.b,
        seed: config.seed,
        path,
        extrapolation,
        transform,
        interval,
    })
}

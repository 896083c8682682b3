//! Simulated prevalent cohorts.
//!
//! Latent triples `(A*, T*, X*)` are drawn from the incident population and
//! kept only when `T* >= A*`, which realises length-biased sampling without
//! ever evaluating its normaliser.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::covariates::{psd_cholesky, Covariates};
use crate::error::{Error, Result};
use crate::model::TransformationLink;
use crate::rng::{substream, tag, StreamRng};
use crate::survival::{validate_cohort, Cohort, SubjectRecord};

/// Latent draws allowed before a scenario with almost no acceptances is
/// declared infeasible.
pub const DRAW_BUDGET: u64 = 10_000_000;
pub const MIN_ACCEPTANCE: f64 = 1e-6;
pub const PILOT_SIZE: usize = 100_000;
pub const CALIBRATION_TOL: f64 = 0.005;
pub const CALIBRATION_BRACKET: (f64, f64) = (1e-3, 1e3);

#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub link: TransformationLink,
    pub beta0: Vec<f64>,
    pub cov_x: DMatrix<f64>,
    /// Truncation times are `U(0, trunc_max)`.
    pub trunc_max: f64,
    pub target_censoring: f64,
    /// Common diagonal of `Σ_η`, read as a variance.
    pub sigma_eta: f64,
    pub n: usize,
}

impl SimScenario {
    /// `β₀ = (1, 1)`, `Σ_X = [[4, 0.7], [0.7, 3]]`, `A* ~ U(0, 1)`, `n = 200`.
    pub fn standard(link: TransformationLink, target_censoring: f64, sigma_eta: f64) -> Self {
        SimScenario {
            link,
            beta0: vec![1.0, 1.0],
            cov_x: DMatrix::from_row_slice(2, 2, &[4.0, 0.7, 0.7, 3.0]),
            trunc_max: 1.0,
            target_censoring,
            sigma_eta,
            n: 200,
        }
    }

    pub fn dim(&self) -> usize {
        self.beta0.len()
    }

    /// `σ_η · I`.
    pub fn error_cov(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) * self.sigma_eta
    }

    /// Check the scenario and return the Cholesky factor of `Σ_X`.
    pub fn validate(&self) -> Result<DMatrix<f64>> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if !(self.target_censoring > 0.0 && self.target_censoring < 1.0) {
            return Err(Error::Config(format!(
                "target censoring {} outside (0, 1)",
                self.target_censoring
            )));
        }
        if !(self.sigma_eta >= 0.0 && self.sigma_eta.is_finite()) {
            return Err(Error::Config(format!("sigma_eta {} must be non-negative", self.sigma_eta)));
        }
        if !(self.trunc_max > 0.0 && self.trunc_max.is_finite()) {
            return Err(Error::Config("truncation bound must be positive".into()));
        }
        if self.beta0.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config("beta0 must be finite".into()));
        }
        if self.cov_x.nrows() != self.dim() {
            return Err(Error::InvalidCovariance(format!(
                "covariate covariance is {}x{}, beta0 has length {}",
                self.cov_x.nrows(),
                self.cov_x.ncols(),
                self.dim()
            )));
        }
        psd_cholesky(&self.cov_x)
    }
}

/// An accepted latent subject before censoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSubject {
    pub trunc_time: f64,
    pub failure_time: f64,
    pub x: Vec<f64>,
}

/// Draws latent subjects and keeps those with `T* >= A*`.
pub struct PrevalentSampler<'a> {
    scenario: &'a SimScenario,
    lx: DMatrix<f64>,
    draws: u64,
    accepted: u64,
}

impl<'a> PrevalentSampler<'a> {
    pub fn new(scenario: &'a SimScenario) -> Result<Self> {
        let lx = scenario.validate()?;
        Ok(PrevalentSampler {
            scenario,
            lx,
            draws: 0,
            accepted: 0,
        })
    }

    /// Latent draws so far, accepted or not.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn accepted(&self) -> u64 {
        self.accepted
    }

    fn draw_x(&self, rng: &mut impl Rng) -> Vec<f64> {
        let p = self.scenario.dim();
        let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        (0..p)
            .map(|a| (0..=a).map(|c| self.lx[(a, c)] * z[c]).sum())
            .collect()
    }

    /// The latent failure time `T*`, whether or not it would be accepted.
    pub fn draw_unconditional(&self, rng: &mut impl Rng) -> (Vec<f64>, f64) {
        let x = self.draw_x(rng);
        let xb: f64 = x.iter().zip(&self.scenario.beta0).map(|(a, b)| a * b).sum();
        let u: f64 = rng.random();
        let eps = self.scenario.link.sample_error(u.max(f64::MIN_POSITIVE));
        (x, (eps - xb).exp())
    }

    pub fn next(&mut self, rng: &mut impl Rng) -> Result<LatentSubject> {
        loop {
            if self.draws >= DRAW_BUDGET
                && (self.accepted as f64) < MIN_ACCEPTANCE * self.draws as f64
            {
                return Err(Error::ScenarioInfeasible(format!(
                    "{} acceptances in {} latent draws",
                    self.accepted, self.draws
                )));
            }
            self.draws += 1;
            let (x, t) = self.draw_unconditional(rng);
            let a = rng.random::<f64>() * self.scenario.trunc_max;
            if t >= a && t.is_finite() {
                self.accepted += 1;
                return Ok(LatentSubject {
                    trunc_time: a,
                    failure_time: t,
                    x,
                });
            }
        }
    }
}

/// `W = X + η` rowwise with `η ~ N(0, Σ_η)`.
pub fn add_measurement_error(
    x: &Covariates,
    error_cov: &DMatrix<f64>,
    rng: &mut impl Rng,
) -> Result<Covariates> {
    let p = x.ncols();
    if error_cov.nrows() != p {
        return Err(Error::InvalidCovariance(format!(
            "error covariance is {}x{}, covariates have {p} columns",
            error_cov.nrows(),
            error_cov.ncols()
        )));
    }
    let l = psd_cholesky(error_cov)?;
    let mut w = x.clone();
    let mut e = vec![0.0; p];
    for i in 0..w.nrows() {
        for v in e.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let row = w.row_mut(i);
        for a in 0..p {
            row[a] += (0..=a).map(|c| l[(a, c)] * e[c]).sum::<f64>();
        }
    }
    Ok(w)
}

/// `n` accepted subjects with `C ~ U(0, c)` and surrogates `W = X + η`.
/// The true covariates are kept on each record.
pub fn draw_prevalent_cohort(scenario: &SimScenario, c: f64, rng: &mut impl Rng) -> Result<Cohort> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidArgument(format!("censoring bound {c} must be positive")));
    }
    let mut sampler = PrevalentSampler::new(scenario)?;
    let mut latent = Vec::with_capacity(scenario.n);
    for _ in 0..scenario.n {
        latent.push(sampler.next(rng)?);
    }
    let mut subjects = Vec::with_capacity(scenario.n);
    let mut rows = Vec::with_capacity(scenario.n);
    for s in latent {
        let cens = s.trunc_time + rng.random::<f64>() * c;
        let event = s.failure_time <= cens;
        let obs = if event { s.failure_time } else { cens };
        rows.push(s.x.clone());
        subjects.push(SubjectRecord::new(s.trunc_time, obs, event, Vec::new()).with_truth(s.x));
    }
    let x = Covariates::from_rows(&rows)?;
    let w = add_measurement_error(&x, &scenario.error_cov(), rng)?;
    for (s, r) in subjects.iter_mut().zip(w.rows()) {
        s.surrogate = r.to_vec();
    }
    validate_cohort(subjects)
}

/// The cohort for one simulation replicate.
pub fn replicate_cohort(scenario: &SimScenario, c: f64, seed: u64, replicate: u64) -> Result<Cohort> {
    draw_prevalent_cohort(scenario, c, &mut substream(seed, &[tag::COHORT, replicate]))
}

/// Frozen pilot sample: accepted `(A, T)` pairs with a uniform per subject
/// that becomes `C = c·u` for every candidate `c`.
#[derive(Debug, Clone)]
pub struct CensoringPilot {
    residual_gap: Vec<f64>,
}

impl CensoringPilot {
    pub fn draw(scenario: &SimScenario, size: usize, rng: &mut StreamRng) -> Result<Self> {
        let mut sampler = PrevalentSampler::new(scenario)?;
        let mut residual_gap = Vec::with_capacity(size);
        for _ in 0..size {
            let s = sampler.next(rng)?;
            let u: f64 = rng.random();
            // censored iff T - A > c·u, i.e. (T - A) / u > c
            residual_gap.push((s.failure_time - s.trunc_time) / u);
        }
        residual_gap.sort_by(f64::total_cmp);
        Ok(CensoringPilot { residual_gap })
    }

    /// Empirical `1 − mean(δ)` at bound `c`.
    pub fn censoring_rate(&self, c: f64) -> f64 {
        let not_censored = self.residual_gap.partition_point(|&g| g <= c);
        1.0 - not_censored as f64 / self.residual_gap.len() as f64
    }
}

/// Bisection on `c` (geometric midpoints over `[1e-3, 1e3]`) until the
/// pilot censoring rate is within `0.005` of `target`.
pub fn calibrate_censoring(scenario: &SimScenario, target: f64, seed: u64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!("target censoring {target} outside (0, 1)")));
    }
    let pilot = CensoringPilot::draw(scenario, PILOT_SIZE, &mut substream(seed, &[tag::PILOT]))?;
    calibrate_with(&pilot, target)
}

pub fn calibrate_with(pilot: &CensoringPilot, target: f64) -> Result<f64> {
    let (mut lo, mut hi) = CALIBRATION_BRACKET;
    let (r_lo, r_hi) = (pilot.censoring_rate(lo), pilot.censoring_rate(hi));
    if !(r_lo >= target - CALIBRATION_TOL && r_hi <= target + CALIBRATION_TOL) {
        return Err(Error::CalibrationRange { target });
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        let r = pilot.censoring_rate(mid);
        if (r - target).abs() <= CALIBRATION_TOL {
            return Ok(mid);
        }
        if r > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::CalibrationRange { target })
}

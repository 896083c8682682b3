//! Profile estimating equations for the transformation model.
//!
//! For fixed `beta` the transform is solved event time by event time from
//!
//! ```text
//! Σ_i R_i(t_k) r_i(t_k) [Λ{Z_i'β + H(t_k)} - Λ{Z_i'β + H(t_{k-1})}] = d_k,
//! ```
//!
//! with `H(t_0) = -∞`, and `beta` is then the root of the covariate-weighted
//! counterpart `U(β)`. Both equations share the risk-set weights, so they
//! are precomputed once per cohort in [`EstimatingEquations`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariates::Covariates;
use crate::error::{Error, Result};
use crate::model::TransformationLink;
use crate::survival::{km_censoring_survivor, weight_r, Cohort};

/// How subjects at risk are weighted in the compensator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// Every subject with `A_i <= t <= Y_i` counts with weight one.
    #[default]
    Conditional,
    /// Only observed failures count, weighted by
    /// `ŵ(t - A_i) / ŵ(Y_i - A_i)` with `ŵ` the integrated Kaplan–Meier
    /// censoring survivor.
    LengthBiased,
}

/// Non-decreasing step function on the distinct event times, `-∞` before
/// the first one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneStep {
    event_times: Vec<f64>,
    values: Vec<f64>,
}

impl MonotoneStep {
    pub fn new(event_times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if event_times.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "{} event times but {} values",
                event_times.len(),
                values.len()
            )));
        }
        if event_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidArgument(
                "event times must be strictly increasing".into(),
            ));
        }
        if values.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(Error::InvalidArgument("values must be non-decreasing".into()));
        }
        Ok(MonotoneStep {
            event_times,
            values,
        })
    }

    pub(crate) fn from_parts_unchecked(event_times: Vec<f64>, values: Vec<f64>) -> Self {
        MonotoneStep {
            event_times,
            values,
        }
    }

    pub fn event_times(&self) -> &[f64] {
        &self.event_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn eval(&self, t: f64) -> f64 {
        let idx = self.event_times.partition_point(|&x| x <= t);
        match idx.checked_sub(1) {
            Some(k) => self.values[k],
            None => f64::NEG_INFINITY,
        }
    }

    /// `(t_k, H(t_k))` pairs.
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.event_times.iter().copied().zip(self.values.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Convergence threshold on `‖U(β)‖∞`.
    pub tol: f64,
    pub max_iter: usize,
    /// Starting point; zero when absent.
    pub beta_init: Option<Vec<f64>>,
    pub weighting: WeightScheme,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 100,
            beta_init: None,
            weighting: WeightScheme::Conditional,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub h: MonotoneStep,
    /// `‖U(β̂)‖∞` at the returned point.
    pub score_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Number of Newton steps that needed the `1e-8` diagonal ridge.
    pub ridge_steps: usize,
    /// Reciprocal condition estimate of the last Jacobian, `|min pivot| / |max pivot|`.
    pub jacobian_rcond: f64,
}

/// Upper bound on bracket doublings and on root iterations per event time.
const MAX_BRACKET_DOUBLINGS: usize = 200;
const MAX_ROOT_ITER: usize = 200;
const BRACKET_WIDTH_TOL: f64 = 1e-12;
const RIDGE: f64 = 1e-8;
const MAX_HALVINGS: usize = 30;

/// Subjects entering and leaving the risk set at each event time, for
/// weights that factor as `a_k b_j` over an interval of event times.
#[derive(Debug, Clone)]
struct Sweep {
    enter_off: Vec<usize>,
    enter: Vec<u32>,
    leave_off: Vec<usize>,
    leave: Vec<u32>,
}

/// Risk-set weights `r_jk > 0` per event time in compressed rows.
#[derive(Debug, Clone)]
struct RiskRows {
    offsets: Vec<usize>,
    members: Vec<u32>,
    weights: Vec<f64>,
}

impl RiskRows {
    #[inline]
    fn row(&self, k: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[k], self.offsets[k + 1]);
        (&self.members[a..b], &self.weights[a..b])
    }
}

/// The estimating equations of one cohort under one link.
#[derive(Debug, Clone)]
pub struct EstimatingEquations {
    link: TransformationLink,
    scheme: WeightScheme,
    n: usize,
    p: usize,
    times: Vec<f64>,
    deaths: Vec<f64>,
    event_subjects: Vec<u32>,
    sweep: Option<Sweep>,
    rows: Option<RiskRows>,
}

/// How much of the system to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Want {
    Profile,
    Score,
    Jacobian,
}

struct Evaluation {
    h: Vec<f64>,
    u: Vec<f64>,
    /// `dU/dβ` with `H` profiled out.
    jac: Option<DMatrix<f64>>,
}

#[derive(Default)]
struct Scratch {
    eta: Vec<f64>,
    expo: Vec<f64>,
    cum_prev: Vec<f64>,
    haz_prev: Vec<f64>,
    seen: Vec<usize>,
    cum_new: Vec<f64>,
    haz_new: Vec<f64>,
}

impl EstimatingEquations {
    pub fn new(cohort: &Cohort, link: TransformationLink, scheme: WeightScheme) -> Result<Self> {
        let subjects = cohort.subjects();
        let n = subjects.len();
        let mut event_y: Vec<f64> = subjects.iter().filter(|s| s.event).map(|s| s.obs_time).collect();
        if event_y.is_empty() {
            return Err(Error::NoEvents);
        }
        event_y.sort_by(f64::total_cmp);
        let mut times: Vec<f64> = Vec::new();
        let mut deaths: Vec<f64> = Vec::new();
        for y in event_y {
            if times.last() == Some(&y) {
                *deaths.last_mut().unwrap() += 1.0;
            } else {
                times.push(y);
                deaths.push(1.0);
            }
        }
        let k_len = times.len();
        let event_subjects = (0..n as u32).filter(|&i| subjects[i as usize].event).collect();

        // event-time index range [first, last] of each subject's risk interval
        let span = |a: f64, y: f64| -> Option<(usize, usize)> {
            let first = times.partition_point(|&t| t < a);
            let end = times.partition_point(|&t| t <= y);
            (first < end).then(|| (first, end - 1))
        };

        let mut eq = EstimatingEquations {
            link,
            scheme,
            n,
            p: cohort.dim(),
            times: Vec::new(),
            deaths,
            event_subjects,
            sweep: None,
            rows: None,
        };

        match scheme {
            WeightScheme::Conditional => {
                let spans: Vec<Option<(usize, usize)>> =
                    subjects.iter().map(|s| span(s.trunc_time, s.obs_time)).collect();
                let mut enter_cnt = vec![0usize; k_len + 1];
                let mut leave_cnt = vec![0usize; k_len + 1];
                for &(f, l) in spans.iter().flatten() {
                    enter_cnt[f] += 1;
                    leave_cnt[l + 1] += 1;
                }
                let enter_off = prefix_offsets(&enter_cnt);
                let leave_off = prefix_offsets(&leave_cnt);
                let mut enter = vec![0u32; enter_off[k_len + 1]];
                let mut leave = vec![0u32; leave_off[k_len + 1]];
                let mut ef = enter_off.clone();
                let mut lf = leave_off.clone();
                for (j, s) in spans.iter().enumerate() {
                    if let Some((f, l)) = *s {
                        enter[ef[f]] = j as u32;
                        ef[f] += 1;
                        leave[lf[l + 1]] = j as u32;
                        lf[l + 1] += 1;
                    }
                }
                // every event subject is at risk at its own time, so no row is empty
                if link != TransformationLink::Ph {
                    let mut counts = vec![0usize; k_len];
                    for &(f, l) in spans.iter().flatten() {
                        for c in &mut counts[f..=l] {
                            *c += 1;
                        }
                    }
                    let mut offsets = Vec::with_capacity(k_len + 1);
                    offsets.push(0);
                    for c in &counts {
                        offsets.push(offsets.last().unwrap() + c);
                    }
                    let total = *offsets.last().unwrap();
                    let mut members = vec![0u32; total];
                    let mut fill = offsets[..k_len].to_vec();
                    for (j, s) in spans.iter().enumerate() {
                        if let Some((f, l)) = *s {
                            for k in f..=l {
                                members[fill[k]] = j as u32;
                                fill[k] += 1;
                            }
                        }
                    }
                    eq.rows = Some(RiskRows {
                        offsets,
                        members,
                        weights: vec![1.0; total],
                    });
                }
                eq.sweep = Some(Sweep {
                    enter_off,
                    enter,
                    leave_off,
                    leave,
                });
            }
            WeightScheme::LengthBiased => {
                let survivor = km_censoring_survivor(cohort)?;
                let mut per_k: Vec<Vec<(u32, f64)>> = vec![Vec::new(); k_len];
                for (j, s) in subjects.iter().enumerate() {
                    if !s.event {
                        continue;
                    }
                    let Some((f, l)) = span(s.trunc_time, s.obs_time) else {
                        continue;
                    };
                    for (k, row) in per_k.iter_mut().enumerate().take(l + 1).skip(f) {
                        let r = weight_r(&survivor, times[k], s.obs_time, true, s.trunc_time)?;
                        if r > 0.0 {
                            row.push((j as u32, r));
                        }
                    }
                }
                let mut offsets = vec![0usize];
                let mut members = Vec::new();
                let mut weights = Vec::new();
                for (k, row) in per_k.iter().enumerate() {
                    if row.is_empty() {
                        return Err(Error::SingularRiskSet { time: times[k] });
                    }
                    for &(j, r) in row {
                        members.push(j);
                        weights.push(r);
                    }
                    offsets.push(members.len());
                }
                eq.rows = Some(RiskRows {
                    offsets,
                    members,
                    weights,
                });
            }
        }
        eq.times = times;
        Ok(eq)
    }

    pub fn link(&self) -> TransformationLink {
        self.link
    }

    pub fn scheme(&self) -> WeightScheme {
        self.scheme
    }

    /// Distinct event times `t_1 < … < t_K`.
    pub fn event_times(&self) -> &[f64] {
        &self.times
    }

    /// Multiplicities `d_k`.
    pub fn event_counts(&self) -> &[f64] {
        &self.deaths
    }

    /// Number of subjects.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn check_dims(&self, z: &Covariates, beta: &[f64]) -> Result<()> {
        if z.nrows() != self.n || z.ncols() != beta.len() {
            return Err(Error::InvalidArgument(format!(
                "covariates {}x{} and beta of length {} do not match {} subjects",
                z.nrows(),
                z.ncols(),
                beta.len(),
                self.n
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("non-finite beta".into()));
        }
        Ok(())
    }

    /// `Ĥ(·; β)` solving the unweighted equation at every event time.
    pub fn profile_h(&self, z: &Covariates, beta: &[f64]) -> Result<MonotoneStep> {
        self.check_dims(z, beta)?;
        let h = self.evaluate(z, beta, None, Want::Profile)?.h;
        Ok(MonotoneStep::from_parts_unchecked(self.times.clone(), h))
    }

    /// `U(β)` for a supplied transform `H`, which must live on this cohort's
    /// event times.
    pub fn score(&self, z: &Covariates, beta: &[f64], h: &MonotoneStep) -> Result<Vec<f64>> {
        self.check_dims(z, beta)?;
        if h.event_times() != self.times.as_slice() {
            return Err(Error::InvalidArgument(
                "transform is not defined on this cohort's event times".into(),
            ));
        }
        let p = z.ncols();
        let mut eta = Vec::new();
        z.linear_predictor(beta, &mut eta);
        let mut u = self.event_covariate_sum(z);
        let hv = h.values();
        match (&self.sweep, &self.rows, self.link) {
            (Some(sweep), _, TransformationLink::Ph) => {
                let c = eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let expo: Vec<f64> = eta.iter().map(|e| (e - c).exp()).collect();
                let mut s0 = Compensated::default();
                let mut s1 = vec![Compensated::default(); p];
                let mut prev = 0.0;
                for k in 0..self.times.len() {
                    sweep_step(sweep, k, z, &expo, &mut s0, &mut s1, &mut []);
                    let cur = (hv[k] + c).exp();
                    let dl = cur - prev;
                    prev = cur;
                    for (uj, s) in u.iter_mut().zip(&s1) {
                        *uj -= dl * s.value();
                    }
                }
            }
            (_, Some(rows), link) => {
                for k in 0..self.times.len() {
                    let (mem, w) = rows.row(k);
                    for (&j, &wj) in mem.iter().zip(w) {
                        let j = j as usize;
                        let e = eta[j];
                        let prev = if k == 0 { 0.0 } else { link.lambda_cum(e + hv[k - 1]) };
                        let dl = wj * (link.lambda_cum(e + hv[k]) - prev);
                        for (uj, zj) in u.iter_mut().zip(z.row(j)) {
                            *uj -= zj * dl;
                        }
                    }
                }
            }
            _ => unreachable!("risk rows exist whenever the sweep cannot be used"),
        }
        Ok(u)
    }

    /// Residual of the unweighted equation at each event time for a given `H`.
    pub fn profile_residuals(&self, z: &Covariates, beta: &[f64], h: &MonotoneStep) -> Result<Vec<f64>> {
        self.check_dims(z, beta)?;
        let mut eta = Vec::new();
        z.linear_predictor(beta, &mut eta);
        let hv = h.values();
        let mut out = Vec::with_capacity(self.times.len());
        let link = self.link;
        for k in 0..self.times.len() {
            let mut s = 0.0;
            self.for_each_member(k, |j, w| {
                let prev = if k == 0 { 0.0 } else { link.lambda_cum(eta[j] + hv[k - 1]) };
                s += w * (link.lambda_cum(eta[j] + hv[k]) - prev);
            });
            out.push(s - self.deaths[k]);
        }
        Ok(out)
    }

    fn for_each_member(&self, k: usize, mut f: impl FnMut(usize, f64)) {
        if let Some(rows) = &self.rows {
            let (mem, w) = rows.row(k);
            for (&j, &wj) in mem.iter().zip(w) {
                f(j as usize, wj);
            }
        } else if let Some(sweep) = &self.sweep {
            // rebuild membership from the enter/leave lists
            let mut active = vec![false; self.n];
            for kk in 0..=k {
                for &j in &sweep.leave[sweep.leave_off[kk]..sweep.leave_off[kk + 1]] {
                    active[j as usize] = false;
                }
                for &j in &sweep.enter[sweep.enter_off[kk]..sweep.enter_off[kk + 1]] {
                    active[j as usize] = true;
                }
            }
            for (j, a) in active.iter().enumerate() {
                if *a {
                    f(j, 1.0);
                }
            }
        }
    }

    fn event_covariate_sum(&self, z: &Covariates) -> Vec<f64> {
        let mut u = vec![0.0; z.ncols()];
        for &i in &self.event_subjects {
            for (uj, zj) in u.iter_mut().zip(z.row(i as usize)) {
                *uj += zj;
            }
        }
        u
    }

    /// Profile transform, score and Jacobian at `beta` in one pass. `warm`
    /// holds a nearby transform used to start the per-time root searches.
    fn evaluate(&self, z: &Covariates, beta: &[f64], warm: Option<&[f64]>, want: Want) -> Result<Evaluation> {
        let mut scratch = Scratch::default();
        z.linear_predictor(beta, &mut scratch.eta);
        match (&self.sweep, self.link) {
            (Some(sweep), TransformationLink::Ph) => self.evaluate_ph_sweep(sweep, z, &mut scratch, want),
            (None, TransformationLink::Ph) => self.evaluate_ph_rows(z, &mut scratch, want),
            _ => self.evaluate_general(z, &mut scratch, warm, want),
        }
    }

    /// Closed form for `Λ = exp`: `e^{H_k} = Σ_{l<=k} d_l / S_l` with
    /// `S_l = Σ_{j∈R_l} e^{η_j}`, and the score reduces to
    /// `Σ_events Z_i - Σ_k d_k S1_k / S_k`.
    fn evaluate_ph_sweep(&self, sweep: &Sweep, z: &Covariates, s: &mut Scratch, want: Want) -> Result<Evaluation> {
        let p = z.ncols();
        let c = s.eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        s.expo.clear();
        s.expo.extend(s.eta.iter().map(|e| (e - c).exp()));
        let mut s0 = Compensated::default();
        let mut s1 = vec![Compensated::default(); if want >= Want::Score { p } else { 0 }];
        let mut s2 = vec![Compensated::default(); if want >= Want::Jacobian { p * p } else { 0 }];
        let mut acc = PhAccumulator::new(self, z, want);
        for k in 0..self.times.len() {
            sweep_step(sweep, k, z, &s.expo, &mut s0, &mut s1, &mut s2);
            let v1: Vec<f64> = s1.iter().map(Compensated::value).collect();
            let v2: Vec<f64> = s2.iter().map(Compensated::value).collect();
            acc.push(self, k, s0.value(), &v1, &v2, c)?;
        }
        Ok(acc.finish())
    }

    fn evaluate_ph_rows(&self, z: &Covariates, s: &mut Scratch, want: Want) -> Result<Evaluation> {
        let rows = self.rows.as_ref().expect("weighted scheme keeps risk rows");
        let p = z.ncols();
        let c = s.eta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        s.expo.clear();
        s.expo.extend(s.eta.iter().map(|e| (e - c).exp()));
        let mut acc = PhAccumulator::new(self, z, want);
        let mut s1 = vec![0.0; if want >= Want::Score { p } else { 0 }];
        let mut s2 = vec![0.0; if want >= Want::Jacobian { p * p } else { 0 }];
        for k in 0..self.times.len() {
            let (mem, w) = rows.row(k);
            let mut s0 = 0.0;
            s1.iter_mut().for_each(|v| *v = 0.0);
            s2.iter_mut().for_each(|v| *v = 0.0);
            for (&j, &wj) in mem.iter().zip(w) {
                let j = j as usize;
                let t = wj * s.expo[j];
                s0 += t;
                add_moments(&mut s1, &mut s2, z.row(j), t);
            }
            acc.push(self, k, s0, &s1, &s2, c)?;
        }
        Ok(acc.finish())
    }

    /// Any link: one monotone scalar root per event time.
    fn evaluate_general(
        &self,
        z: &Covariates,
        s: &mut Scratch,
        warm: Option<&[f64]>,
        want: Want,
    ) -> Result<Evaluation> {
        let want_score = want >= Want::Score;
        let want_jac = want >= Want::Jacobian;
        let p = z.ncols();
        // dH_{k-1}/dβ and the running Jacobian
        let mut grad_prev = vec![0.0; p];
        let mut grad = vec![0.0; p];
        let mut jac = DMatrix::<f64>::zeros(p, p);
        let (mut b_new, mut b_prev) = (vec![0.0; p], vec![0.0; p]);
        let mut c_diff = vec![0.0; p * p];
        let rows = self.rows.as_ref().expect("general links keep risk rows");
        let link = self.link;
        let n = self.n;
        s.cum_prev.clear();
        s.cum_prev.resize(n, 0.0);
        s.haz_prev.clear();
        s.haz_prev.resize(n, 0.0);
        s.seen.clear();
        s.seen.resize(n, usize::MAX);
        s.expo.clear();
        s.expo.extend(s.eta.iter().map(|e| e.exp()));
        let mut u = if want_score { self.event_covariate_sum(z) } else { Vec::new() };
        let mut h: Vec<f64> = Vec::with_capacity(self.times.len());

        for k in 0..self.times.len() {
            let (mem, w) = rows.row(k);
            let d = self.deaths[k];
            let h_prev = if k == 0 { f64::NEG_INFINITY } else { h[k - 1] };

            // Λ and λ at the previous level for members not carried over
            let mut base = 0.0;
            let mut slope_prev = 0.0;
            let mut lin = 0.0;
            let e_prev = h_prev.exp();
            for (&j, &wj) in mem.iter().zip(w) {
                let j = j as usize;
                if k == 0 {
                    s.cum_prev[j] = 0.0;
                    s.haz_prev[j] = 0.0;
                    lin += wj * s.expo[j];
                } else if s.seen[j] != k - 1 {
                    let (cum, haz) = link.lambda_pair_from_exp(s.eta[j] + h_prev, s.expo[j] * e_prev);
                    s.cum_prev[j] = cum;
                    s.haz_prev[j] = haz;
                }
                base += wj * s.cum_prev[j];
                slope_prev += wj * s.haz_prev[j];
            }

            let guess = match warm {
                Some(wv) if wv[k].is_finite() && (k == 0 || wv[k] > h_prev) => wv[k],
                _ if k == 0 => (d / lin).ln(),
                _ if slope_prev > 0.0 => h_prev + d / slope_prev,
                _ => h_prev + 1.0,
            };

            s.cum_new.resize(mem.len(), 0.0);
            s.haz_new.resize(mem.len(), 0.0);
            let scale = base + d;
            let eval = |x: f64, cum: &mut [f64], haz: &mut [f64]| -> (f64, f64) {
                let mut g = 0.0;
                let mut dg = 0.0;
                let ex = x.exp();
                for (idx, (&j, &wj)) in mem.iter().zip(w).enumerate() {
                    let j = j as usize;
                    let (c, l) = link.lambda_pair_from_exp(s.eta[j] + x, s.expo[j] * ex);
                    cum[idx] = c;
                    haz[idx] = l;
                    g += wj * c;
                    dg += wj * l;
                }
                (g - base - d, dg)
            };
            let lo = (k > 0).then_some(h_prev);
            let (hk, at) = solve_increasing(
                |x| eval(x, &mut s.cum_new, &mut s.haz_new),
                guess,
                lo,
                scale,
            )
            .map_err(|_| Error::BracketFailure { time: self.times[k] })?;
            if hk != at {
                // first-order move from the last evaluated point
                let dx = hk - at;
                for (c, l) in s.cum_new.iter_mut().zip(&s.haz_new) {
                    *c += l * dx;
                }
            }
            h.push(hk);

            if want_jac {
                // implicit differentiation of the equation at t_k
                b_new.iter_mut().for_each(|v| *v = 0.0);
                b_prev.iter_mut().for_each(|v| *v = 0.0);
                c_diff.iter_mut().for_each(|v| *v = 0.0);
                let mut a_new = 0.0;
                for (idx, (&j, &wj)) in mem.iter().zip(w).enumerate() {
                    let j = j as usize;
                    let (ln, lp) = (wj * s.haz_new[idx], wj * s.haz_prev[j]);
                    a_new += ln;
                    let row = z.row(j);
                    for (((bn, bp), &zr), cr) in b_new.iter_mut().zip(b_prev.iter_mut()).zip(row).zip(c_diff.chunks_exact_mut(p)) {
                        *bn += ln * zr;
                        *bp += lp * zr;
                        let t = (ln - lp) * zr;
                        for (cc, &zc) in cr.iter_mut().zip(row) {
                            *cc += t * zc;
                        }
                    }
                }
                for i in 0..p {
                    grad[i] = (b_prev[i] + slope_prev * grad_prev[i] - b_new[i]) / a_new;
                }
                for r in 0..p {
                    for c in 0..p {
                        jac[(r, c)] -= c_diff[r * p + c] + b_new[r] * grad[c] - b_prev[r] * grad_prev[c];
                    }
                }
                std::mem::swap(&mut grad, &mut grad_prev);
            }

            for (idx, (&j, &wj)) in mem.iter().zip(w).enumerate() {
                let j = j as usize;
                if want_score {
                    let dl = wj * (s.cum_new[idx] - s.cum_prev[j]);
                    for (uj, zj) in u.iter_mut().zip(z.row(j)) {
                        *uj -= zj * dl;
                    }
                }
                s.cum_prev[j] = s.cum_new[idx];
                s.haz_prev[j] = s.haz_new[idx];
                s.seen[j] = k;
            }
        }
        Ok(Evaluation {
            h,
            u,
            jac: want_jac.then_some(jac),
        })
    }

    /// `β̂` solving `U(β) = 0` by damped Newton with a central-difference
    /// Jacobian. Non-convergence is reported in the result, not as an error.
    pub fn solve_beta(&self, z: &Covariates, options: &FitOptions) -> Result<FitResult> {
        let p = z.ncols();
        let mut beta = match &options.beta_init {
            Some(b) => b.clone(),
            None => vec![0.0; p],
        };
        self.check_dims(z, &beta)?;
        let Evaluation { mut h, mut u, mut jac } = self.evaluate(z, &beta, None, Want::Jacobian)?;
        let mut norm = inf_norm(&u);
        let mut iterations = 0;
        let mut ridge_steps = 0;
        let mut rcond = f64::NAN;
        let mut converged = norm <= options.tol;

        while !converged && iterations < options.max_iter {
            let Some(jac_now) = jac.take().filter(|j| j.iter().all(|v| v.is_finite())) else {
                break;
            };
            let jac_now = &jac_now;
            rcond = pivot_rcond(jac_now);
            let rhs = DVector::from_iterator(p, u.iter().map(|v| -v));
            let step = match solve_linear(jac_now, &rhs) {
                Some(s) => s,
                None => {
                    ridge_steps += 1;
                    let ridged = jac_now + DMatrix::identity(p, p) * RIDGE;
                    match solve_linear(&ridged, &rhs) {
                        Some(s) => s,
                        None => break,
                    }
                }
            };

            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + lambda * s).collect();
                if let Ok(ev) = self.evaluate(z, &trial, Some(&h), Want::Jacobian) {
                    let nt = inf_norm(&ev.u);
                    if nt < norm {
                        beta = trial;
                        h = ev.h;
                        u = ev.u;
                        jac = ev.jac;
                        norm = nt;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            iterations += 1;
            if !accepted {
                break;
            }
            converged = norm <= options.tol;
        }

        Ok(FitResult {
            beta,
            h: MonotoneStep::from_parts_unchecked(self.times.clone(), h),
            score_norm: norm,
            iterations,
            converged,
            ridge_steps,
            jacobian_rcond: rcond,
        })
    }

    #[cfg(test)]
    fn numeric_jacobian(&self, z: &Covariates, beta: &[f64], warm: &[f64]) -> Option<DMatrix<f64>> {
        let p = beta.len();
        let mut jac = DMatrix::zeros(p, p);
        let mut probe = beta.to_vec();
        for j in 0..p {
            let step = 1e-5 * (1.0 + beta[j].abs());
            probe[j] = beta[j] + step;
            let up = self.evaluate(z, &probe, Some(warm), Want::Score).ok()?.u;
            probe[j] = beta[j] - step;
            let um = self.evaluate(z, &probe, Some(warm), Want::Score).ok()?.u;
            probe[j] = beta[j];
            for i in 0..p {
                jac[(i, j)] = (up[i] - um[i]) / (2.0 * step);
            }
        }
        jac.iter().all(|v| v.is_finite()).then_some(jac)
    }

    /// Internal fused evaluation, exposed for the SIMEX layer.
    pub(crate) fn profile_values(&self, z: &Covariates, beta: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(z, beta)?;
        Ok(self.evaluate(z, beta, None, Want::Profile)?.h)
    }

    /// Score at the profile transform, `U(β, Ĥ(·; β))`.
    pub fn profile_score(&self, z: &Covariates, beta: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(z, beta)?;
        Ok(self.evaluate(z, beta, None, Want::Score)?.u)
    }

    /// Covariate dimension `p`.
    pub fn dimension(&self) -> usize {
        self.p
    }
}

fn prefix_offsets(counts: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(counts.len() + 1);
    off.push(0);
    for c in counts {
        off.push(off.last().unwrap() + c);
    }
    off
}

/// Apply the leavers and entrants of event time `k` to running sums.
#[inline]
fn sweep_step(
    sweep: &Sweep,
    k: usize,
    z: &Covariates,
    expo: &[f64],
    s0: &mut Compensated,
    s1: &mut [Compensated],
    s2: &mut [Compensated],
) {
    let leave = &sweep.leave[sweep.leave_off[k]..sweep.leave_off[k + 1]];
    let enter = &sweep.enter[sweep.enter_off[k]..sweep.enter_off[k + 1]];
    let p = z.ncols();
    let mut apply = |j: u32, sign: f64| {
        let e = sign * expo[j as usize];
        s0.add(e);
        let row = z.row(j as usize);
        for (a, zj) in s1.iter_mut().zip(row) {
            a.add(e * zj);
        }
        if !s2.is_empty() {
            for r in 0..p {
                for c in 0..p {
                    s2[r * p + c].add(e * row[r] * row[c]);
                }
            }
        }
    };
    for &j in leave {
        apply(j, -1.0);
    }
    for &j in enter {
        apply(j, 1.0);
    }
}

/// Adds `t·z` to `m1` and `t·z zᵀ` to `m2` when they are in use.
#[inline]
fn add_moments(m1: &mut [f64], m2: &mut [f64], row: &[f64], t: f64) {
    for (a, zj) in m1.iter_mut().zip(row) {
        *a += t * zj;
    }
    if !m2.is_empty() {
        let p = row.len();
        for r in 0..p {
            for c in 0..p {
                m2[r * p + c] += t * row[r] * row[c];
            }
        }
    }
}

/// The Breslow-type closed form for `Λ = exp`, fed one event time at a
/// time with the risk-set moments `S0`, `S1`, `S2`.
struct PhAccumulator {
    p: usize,
    want: Want,
    h: Vec<f64>,
    u: Vec<f64>,
    jac: DMatrix<f64>,
    acc: f64,
}

impl PhAccumulator {
    fn new(eq: &EstimatingEquations, z: &Covariates, want: Want) -> Self {
        let p = z.ncols();
        PhAccumulator {
            p,
            want,
            h: Vec::with_capacity(eq.times.len()),
            u: if want >= Want::Score { eq.event_covariate_sum(z) } else { Vec::new() },
            jac: DMatrix::zeros(p, p),
            acc: 0.0,
        }
    }

    fn push(&mut self, eq: &EstimatingEquations, k: usize, s0: f64, s1: &[f64], s2: &[f64], shift: f64) -> Result<()> {
        if !(s0 > 0.0) || !s0.is_finite() {
            return Err(Error::SingularRiskSet { time: eq.times[k] });
        }
        let d = eq.deaths[k];
        self.acc += d / s0;
        self.h.push(self.acc.ln() - shift);
        if self.want >= Want::Score {
            for (uj, sj) in self.u.iter_mut().zip(s1) {
                *uj -= d * sj / s0;
            }
        }
        if self.want >= Want::Jacobian {
            let p = self.p;
            for r in 0..p {
                for c in 0..p {
                    self.jac[(r, c)] -= d * (s2[r * p + c] / s0 - s1[r] * s1[c] / (s0 * s0));
                }
            }
        }
        Ok(())
    }

    fn finish(self) -> Evaluation {
        Evaluation {
            h: self.h,
            u: self.u,
            jac: (self.want >= Want::Jacobian).then_some(self.jac),
        }
    }
}

/// Neumaier summation. Subjects leave the risk set by subtracting the exact
/// term they added, so cancellation must not eat the remaining mass.
#[derive(Debug, Clone, Copy, Default)]
struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    #[inline]
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Debug)]
pub(crate) struct BracketError;

/// Root of an increasing function given `(g, g')` evaluations, by Newton
/// steps kept inside the current bracket with bisection as the fallback.
/// `lower` is a known point with `g < 0`. Returns the root and the last
/// point evaluated, which differ only when a final Newton step below `1e-9`
/// relative is taken without another evaluation.
pub(crate) fn solve_increasing(
    mut f: impl FnMut(f64) -> (f64, f64),
    guess: f64,
    lower: Option<f64>,
    scale: f64,
) -> std::result::Result<(f64, f64), BracketError> {
    let tol = 1e-14 * (1.0 + scale.abs());
    let mut lo = lower.unwrap_or(f64::NEG_INFINITY);
    let mut hi = f64::INFINITY;
    let mut x = if guess.is_finite() && guess > lo { guess } else if lo.is_finite() { lo + 1.0 } else { 0.0 };
    let mut doublings = 0;
    let mut expand = 1.0;
    let mut last_step = f64::INFINITY;
    for _ in 0..(MAX_ROOT_ITER + MAX_BRACKET_DOUBLINGS) {
        let (g, dg) = f(x);
        if !g.is_finite() {
            // overflow above the root: shrink towards the known side
            hi = hi.min(x);
            if lo.is_finite() {
                x = 0.5 * (lo + x);
            } else {
                x -= expand;
                expand *= 2.0;
                doublings += 1;
                if doublings > MAX_BRACKET_DOUBLINGS {
                    return Err(BracketError);
                }
            }
            continue;
        }
        if g.abs() <= tol {
            return Ok((x, x));
        }
        if g < 0.0 {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        if lo.is_finite() && hi.is_finite() && hi - lo <= BRACKET_WIDTH_TOL {
            return Ok((x, x));
        }
        let newton = if dg > 0.0 && dg.is_finite() { x - g / dg } else { f64::NAN };
        let bracketed = lo.is_finite() && hi.is_finite();
        let slow = bracketed && (newton - x).abs() > 0.5 * last_step;
        if newton.is_finite() && newton > lo && newton < hi && !slow {
            last_step = (newton - x).abs();
            if (newton - x).abs() <= 1e-9 * (1.0 + x.abs()) {
                return Ok((newton, x));
            }
            x = newton;
        } else if bracketed {
            x = 0.5 * (lo + hi);
            last_step = 0.5 * (hi - lo);
        } else {
            doublings += 1;
            if doublings > MAX_BRACKET_DOUBLINGS {
                return Err(BracketError);
            }
            x = if g < 0.0 { x + expand } else { x - expand };
            expand *= 2.0;
        }
    }
    Err(BracketError)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::INFINITY } else { m.max(x.abs()) })
}

fn solve_linear(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let x = a.clone().lu().solve(b)?;
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn pivot_rcond(a: &DMatrix<f64>) -> f64 {
    let lu = a.clone().lu();
    let u = lu.u();
    let diag: Vec<f64> = (0..u.nrows()).map(|i| u[(i, i)].abs()).collect();
    let max = diag.iter().copied().fold(0.0, f64::max);
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    if max > 0.0 {
        min / max
    } else {
        0.0
    }
}

/// `Ĥ(·; β)` for covariates `z` under the default weighting.
pub fn profile_h(z: &Covariates, cohort: &Cohort, link: TransformationLink, beta: &[f64]) -> Result<MonotoneStep> {
    EstimatingEquations::new(cohort, link, WeightScheme::default())?.profile_h(z, beta)
}

/// `U(β)` evaluated at a supplied transform.
pub fn score(
    z: &Covariates,
    cohort: &Cohort,
    link: TransformationLink,
    beta: &[f64],
    h: &MonotoneStep,
) -> Result<Vec<f64>> {
    EstimatingEquations::new(cohort, link, WeightScheme::default())?.score(z, beta, h)
}

pub fn solve_beta(z: &Covariates, cohort: &Cohort, link: TransformationLink, options: &FitOptions) -> Result<FitResult> {
    EstimatingEquations::new(cohort, link, options.weighting)?.solve_beta(z, options)
}

/// Naive fit: the surrogates `W` used as if they were the true covariates.
pub fn fit_naive(cohort: &Cohort, link: TransformationLink, options: &FitOptions) -> Result<FitResult> {
    solve_beta(&cohort.surrogates(), cohort, link, options)
}

/// Fit on the true covariates `X`; only available for simulated cohorts.
pub fn fit_true(cohort: &Cohort, link: TransformationLink, options: &FitOptions) -> Result<FitResult> {
    let x = cohort
        .truths()
        .ok_or_else(|| Error::InvalidArgument("cohort carries no true covariates".into()))?;
    solve_beta(&x, cohort, link, options)
}

//! Observed prevalent-cohort data and the censoring-survivor machinery.
//!
//! Each subject enters at truncation time `A`, is followed to `Y = min(T, A + C)`
//! and carries an event flag `δ = I(T <= A + C)`. The censoring time `C` runs
//! on the residual scale `Y - A`, so the Kaplan–Meier estimate of its survivor
//! is computed from the pairs `(Y - A, 1 - δ)`.

use serde::{Deserialize, Serialize};

use crate::covariates::Covariates;
use crate::error::{Error, Result, Rule, Violation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    /// Entry (truncation) time `A`.
    pub trunc_time: f64,
    /// Exit time `Y`, failure or censoring.
    pub obs_time: f64,
    /// `δ`: the failure was observed.
    pub event: bool,
    /// Error-prone covariates `W`.
    pub surrogate: Vec<f64>,
    /// True covariates `X`, known only in simulation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<f64>>,
}

impl SubjectRecord {
    pub fn new(trunc_time: f64, obs_time: f64, event: bool, surrogate: Vec<f64>) -> Self {
        SubjectRecord {
            trunc_time,
            obs_time,
            event,
            surrogate,
            truth: None,
        }
    }

    pub fn with_truth(mut self, truth: Vec<f64>) -> Self {
        self.truth = Some(truth);
        self
    }

    /// Residual time `Y - A`.
    #[inline]
    pub fn residual(&self) -> f64 {
        self.obs_time - self.trunc_time
    }

    /// `R_i(t) = I(A_i <= t <= Y_i)`.
    #[inline]
    pub fn at_risk(&self, t: f64) -> bool {
        self.trunc_time <= t && t <= self.obs_time
    }
}

/// A validated sample. Construct through [`validate_cohort`].
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    subjects: Vec<SubjectRecord>,
    p: usize,
}

impl Cohort {
    pub fn subjects(&self) -> &[SubjectRecord] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Covariate dimension `p`.
    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn event_count(&self) -> usize {
        self.subjects.iter().filter(|s| s.event).count()
    }

    pub fn censoring_rate(&self) -> f64 {
        1.0 - self.event_count() as f64 / self.len() as f64
    }

    pub fn has_truth(&self) -> bool {
        self.subjects.iter().all(|s| s.truth.is_some())
    }

    /// The surrogate matrix `W`.
    pub fn surrogates(&self) -> Covariates {
        let rows: Vec<&[f64]> = self.subjects.iter().map(|s| s.surrogate.as_slice()).collect();
        Covariates::from_rows(&rows).expect("validated cohort has uniform dimension")
    }

    /// The true covariate matrix `X`, when every subject carries one.
    pub fn truths(&self) -> Option<Covariates> {
        let rows: Option<Vec<&[f64]>> = self
            .subjects
            .iter()
            .map(|s| s.truth.as_deref())
            .collect();
        rows.map(|r| Covariates::from_rows(&r).expect("validated cohort has uniform dimension"))
    }

    /// Subjects picked by index (with repetition), as for a bootstrap resample.
    /// Fails only when the selection has no events or is empty.
    pub fn resample(&self, idx: &[usize]) -> Result<Cohort> {
        let subjects: Vec<SubjectRecord> = idx.iter().map(|&i| self.subjects[i].clone()).collect();
        if subjects.is_empty() {
            return Err(Error::EmptyCohort);
        }
        if !subjects.iter().any(|s| s.event) {
            return Err(Error::NoEvents);
        }
        Ok(Cohort {
            subjects,
            p: self.p,
        })
    }

    /// The same subjects with surrogates replaced row by row.
    pub fn with_surrogates(&self, w: &Covariates) -> Result<Cohort> {
        if w.nrows() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} surrogate rows for {} subjects",
                w.nrows(),
                self.len()
            )));
        }
        let subjects = self
            .subjects
            .iter()
            .zip(w.rows())
            .map(|(s, r)| SubjectRecord {
                surrogate: r.to_vec(),
                ..s.clone()
            })
            .collect();
        validate_cohort(subjects)
    }
}

/// Check every row and collect all violations before failing.
pub fn validate_cohort(subjects: Vec<SubjectRecord>) -> Result<Cohort> {
    if subjects.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let p = subjects[0].surrogate.len();
    let mut violations = Vec::new();
    for (row, s) in subjects.iter().enumerate() {
        let mut push = |rule| violations.push(Violation { row, rule });
        if !s.trunc_time.is_finite() || !s.obs_time.is_finite() {
            push(Rule::NonFiniteValue);
            continue;
        }
        if s.trunc_time < 0.0 || s.obs_time <= 0.0 {
            push(Rule::NegativeTime);
        }
        if s.trunc_time > s.obs_time {
            push(Rule::TruncationExceedsObserved);
        } else if s.event && s.obs_time == s.trunc_time {
            push(Rule::EventAtEntry);
        }
        let truth_len_ok = s.truth.as_ref().is_none_or(|x| x.len() == p);
        if s.surrogate.len() != p || !truth_len_ok {
            push(Rule::DimensionMismatch);
        }
        let truth_finite = s
            .truth
            .as_ref()
            .is_none_or(|x| x.iter().all(|v| v.is_finite()));
        if !s.surrogate.iter().all(|v| v.is_finite()) || !truth_finite {
            push(Rule::NonFiniteValue);
        }
    }
    if !violations.is_empty() {
        return Err(Error::Validation(violations));
    }
    if !subjects.iter().any(|s| s.event) {
        return Err(Error::NoEvents);
    }
    Ok(Cohort { subjects, p })
}

/// Right-continuous non-increasing step function starting at 1, together
/// with the running integral `w(t) = ∫_0^t S(u) du` at each jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSurvivor {
    jump_times: Vec<f64>,
    values: Vec<f64>,
    areas: Vec<f64>,
}

impl StepSurvivor {
    /// Survivor identically one.
    pub fn constant_one() -> Self {
        StepSurvivor {
            jump_times: Vec::new(),
            values: Vec::new(),
            areas: Vec::new(),
        }
    }

    fn from_jumps(jump_times: Vec<f64>, values: Vec<f64>) -> Self {
        let mut areas = Vec::with_capacity(jump_times.len());
        let mut acc = 0.0;
        let mut prev_t = 0.0;
        let mut prev_v = 1.0;
        for (&t, &v) in jump_times.iter().zip(&values) {
            acc += prev_v * (t - prev_t);
            areas.push(acc);
            prev_t = t;
            prev_v = v;
        }
        StepSurvivor {
            jump_times,
            values,
            areas,
        }
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    /// Value just after each jump.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value held beyond the last jump.
    pub fn tail_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(1.0)
    }

    /// Whether the estimate reaches zero at its last jump.
    pub fn tail_is_zero(&self) -> bool {
        self.tail_value() == 0.0
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.last_jump_at_or_before(t) {
            Some(k) => self.values[k],
            None => 1.0,
        }
    }

    fn last_jump_at_or_before(&self, t: f64) -> Option<usize> {
        let idx = self.jump_times.partition_point(|&x| x <= t);
        idx.checked_sub(1)
    }

    /// Exact rectangle sum `∫_0^t S(u) du`.
    pub fn w_integral(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "integration bound must be non-negative, got {t}"
            )));
        }
        Ok(self.w_unchecked(t))
    }

    #[inline]
    pub(crate) fn w_unchecked(&self, t: f64) -> f64 {
        match self.last_jump_at_or_before(t) {
            Some(k) => self.areas[k] + self.values[k] * (t - self.jump_times[k]),
            None => t,
        }
    }
}

/// Product-limit estimator `∏(1 - d_j / n_j)` over the distinct times
/// carrying at least one event. All records tied at a time form one step.
/// Records with zero time are ignored so that the estimate starts at one.
pub fn product_limit(times: &[f64], events: &[bool]) -> Result<StepSurvivor> {
    if times.len() != events.len() {
        return Err(Error::InvalidArgument(format!(
            "{} times but {} event flags",
            times.len(),
            events.len()
        )));
    }
    let mut order: Vec<usize> = (0..times.len()).filter(|&i| times[i] > 0.0).collect();
    if order.is_empty() {
        return Err(Error::Degenerate(
            "every residual time is zero; censoring survivor undefined".into(),
        ));
    }
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));

    let mut at_risk = order.len();
    let mut surv = 1.0;
    let mut jump_times = Vec::new();
    let mut values = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut d = 0usize;
        while j < order.len() && times[order[j]] == t {
            d += usize::from(events[order[j]]);
            j += 1;
        }
        if d > 0 {
            surv *= 1.0 - d as f64 / at_risk as f64;
            jump_times.push(t);
            values.push(surv);
        }
        at_risk -= j - i;
        i = j;
    }
    Ok(StepSurvivor::from_jumps(jump_times, values))
}

/// Kaplan–Meier estimate of the censoring survivor `S_C` on the residual
/// scale: times `Y_i - A_i`, events `1 - δ_i`. A failure tied with a
/// censoring stays in the risk set for that censoring step.
pub fn km_censoring_survivor(cohort: &Cohort) -> Result<StepSurvivor> {
    let times: Vec<f64> = cohort.subjects().iter().map(|s| s.residual()).collect();
    let events: Vec<bool> = cohort.subjects().iter().map(|s| !s.event).collect();
    product_limit(&times, &events)
}

/// Length-bias weight `δ_i ŵ(t - A_i) / ŵ(Y_i - A_i)`, both integrals on
/// the residual scale. Only meaningful for `A_i <= t <= Y_i`.
pub fn weight_r(survivor: &StepSurvivor, t: f64, obs_time: f64, event: bool, trunc_time: f64) -> Result<f64> {
    if !(t >= trunc_time) || !t.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "weight evaluated at t = {t} before entry time {trunc_time}"
        )));
    }
    if !event {
        return Ok(0.0);
    }
    let denom = survivor.w_integral(obs_time - trunc_time)?;
    if denom <= 0.0 {
        return Err(Error::DegenerateWeight {
            residual: obs_time - trunc_time,
        });
    }
    Ok(survivor.w_unchecked(t - trunc_time) / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;
    use proptest::prelude::*;

    fn subj(a: f64, y: f64, d: bool) -> SubjectRecord {
        SubjectRecord::new(a, y, d, vec![0.0])
    }

    /// The nearest fraction with a small denominator, checked to be within
    /// rounding of `x`.
    fn as_ratio(x: f64) -> Ratio<i64> {
        let r = (1..=5040i64)
            .map(|d| Ratio::new((x * d as f64).round() as i64, d))
            .find(|r| (*r.numer() as f64 / *r.denom() as f64 - x).abs() <= 1e-14)
            .expect("no small-denominator fraction");
        r
    }

    #[test]
    fn validation_accepts_and_reports() {
        let ok = validate_cohort(vec![subj(0.0, 1.0, true), subj(0.5, 2.0, false), subj(1.0, 3.0, true)]).unwrap();
        assert_eq!(ok.len(), 3);
        assert_eq!(ok.dim(), 1);

        let err = validate_cohort(vec![subj(0.0, 1.0, true), subj(2.0, 1.0, true)]).unwrap_err();
        match &err {
            Error::Validation(v) => {
                assert_eq!(v, &[Violation { row: 1, rule: Rule::TruncationExceedsObserved }]);
            }
            e => panic!("unexpected {e}"),
        }
        assert!(err.to_string().contains("truncation exceeds observed time, row 1"));

        let err = validate_cohort(vec![subj(0.0, 1.0, false), subj(0.0, 2.0, false)]).unwrap_err();
        assert!(matches!(err, Error::NoEvents));
        assert_eq!(err.to_string(), "invalid cohort: no events");
    }

    #[test]
    fn validation_distinguishes_rules() {
        let rows = vec![
            subj(-1.0, 1.0, true),
            subj(0.0, f64::NAN, true),
            SubjectRecord::new(0.0, 1.0, true, vec![0.0, 1.0]),
            SubjectRecord::new(0.0, 1.0, true, vec![f64::INFINITY]),
            subj(1.0, 1.0, true),
            subj(1.0, 1.0, false),
        ];
        match validate_cohort(rows).unwrap_err() {
            Error::Validation(v) => {
                let rules: Vec<(usize, Rule)> = v.iter().map(|x| (x.row, x.rule)).collect();
                assert_eq!(
                    rules,
                    vec![
                        (0, Rule::NegativeTime),
                        (1, Rule::NonFiniteValue),
                        (2, Rule::DimensionMismatch),
                        (3, Rule::NonFiniteValue),
                        (4, Rule::EventAtEntry),
                    ]
                );
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(validate_cohort(Vec::new()), Err(Error::EmptyCohort)));
    }

    #[test]
    fn km_all_censoring_events() {
        let s = product_limit(&[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert_eq!(s.jump_times(), &[1.0, 2.0, 3.0]);
        assert_eq!(as_ratio(s.values()[0]), Ratio::new(2, 3));
        assert_eq!(as_ratio(s.values()[1]), Ratio::new(1, 3));
        assert_eq!(s.values()[2], 0.0);
        assert!(s.tail_is_zero());
        assert_eq!(s.eval(1.5), s.values()[0]);
        assert_eq!(s.eval(0.99), 1.0);
    }

    #[test]
    fn km_no_censoring_events() {
        let s = product_limit(&[1.0, 2.0, 3.0], &[false, false, false]).unwrap();
        assert!(s.jump_times().is_empty());
        assert_eq!(s.eval(2.9), 1.0);
        assert_eq!(s.tail_value(), 1.0);
    }

    #[test]
    fn km_mixed() {
        let s = product_limit(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, false]).unwrap();
        assert_eq!(s.jump_times(), &[1.0, 3.0]);
        assert_eq!(as_ratio(s.values()[0]), Ratio::new(3, 4));
        assert_eq!(as_ratio(s.values()[1]), Ratio::new(3, 8));
        // last observation is a failure: held at 3/8, not forced to zero
        assert_eq!(as_ratio(s.eval(10.0)), Ratio::new(3, 8));
    }

    #[test]
    fn km_from_cohort_uses_residual_scale() {
        // residuals 1, 2, 3, 4 with censoring pattern (1, 0, 1, 0)
        let c = validate_cohort(vec![
            subj(0.5, 1.5, false),
            subj(1.0, 3.0, true),
            subj(0.0, 3.0, false),
            subj(0.25, 4.25, true),
        ])
        .unwrap();
        let s = km_censoring_survivor(&c).unwrap();
        assert_eq!(s.jump_times(), &[1.0, 3.0]);
        assert_eq!(as_ratio(s.values()[1]), Ratio::new(3, 8));
    }

    #[test]
    fn km_degenerate_zero_times() {
        assert!(matches!(
            product_limit(&[0.0, 0.0], &[true, false]),
            Err(Error::Degenerate(_))
        ));
        let c = validate_cohort(vec![subj(1.0, 1.0, false), subj(0.0, 2.0, true)]).unwrap();
        // the zero-length record does not produce a jump at 0
        let s = km_censoring_survivor(&c).unwrap();
        assert_eq!(s.eval(0.0), 1.0);
    }

    #[test]
    fn km_ties_censoring_before_failure_removal() {
        // at residual 2: one censoring event and one failure; both at risk
        let s = product_limit(&[1.0, 2.0, 2.0, 3.0], &[false, true, false, true]).unwrap();
        assert_eq!(s.jump_times(), &[2.0, 3.0]);
        assert_eq!(as_ratio(s.values()[0]), Ratio::new(2, 3));
        assert_eq!(s.values()[1], 0.0);
    }

    #[test]
    fn w_integral_rectangles() {
        let one = StepSurvivor::constant_one();
        assert_eq!(one.w_integral(2.5).unwrap(), 2.5);
        let s = product_limit(&[1.0, 2.0, 3.0], &[true, true, true]).unwrap();
        assert!((s.w_integral(2.0).unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.w_integral(0.0).unwrap(), 0.0);
        // 1 + 2/3 + 1/3, flat afterwards
        assert!((s.w_integral(7.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(s.w_integral(-1.0).is_err());
        assert!(s.w_integral(f64::NAN).is_err());
    }

    #[test]
    fn weight_r_cases() {
        let s = product_limit(&[1.0, 2.0, 3.0, 4.0], &[true, false, true, false]).unwrap();
        assert_eq!(weight_r(&s, 2.0, 3.0, false, 0.5).unwrap(), 0.0);
        assert!((weight_r(&s, 3.0, 3.0, true, 0.5).unwrap() - 1.0).abs() < 1e-15);
        // no censoring: w(u) = u, so the ratio is (t - A) / (Y - A)
        let one = StepSurvivor::constant_one();
        let r = weight_r(&one, 2.0, 5.0, true, 1.0).unwrap();
        assert!((r - 1.0 / 4.0).abs() < 1e-15);
        assert!(weight_r(&one, 0.5, 5.0, true, 1.0).is_err());
        // zero residual denominator
        assert!(matches!(
            weight_r(&one, 1.0, 1.0, true, 1.0),
            Err(Error::DegenerateWeight { .. })
        ));
    }

    /// Brute force: for each distinct time, count directly.
    fn oracle_km(times: &[f64], events: &[bool], t: f64) -> Ratio<i64> {
        let mut distinct: Vec<f64> = times.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut s = Ratio::from_integer(1);
        for &u in distinct.iter().filter(|&&u| u <= t) {
            let n = times.iter().filter(|&&x| x >= u).count() as i64;
            let d = times
                .iter()
                .zip(events)
                .filter(|(&x, &e)| x == u && e)
                .count() as i64;
            s *= Ratio::new(n - d, n);
        }
        s
    }

    #[test]
    fn km_matches_bruteforce_on_all_small_cohorts() {
        // every cohort of size 1..=6, times in {1..4}, every event pattern
        fn rec(n: usize, prefix: &mut Vec<(u8, bool)>, out: &mut usize) {
            if prefix.len() == n {
                let times: Vec<f64> = prefix.iter().map(|x| x.0 as f64).collect();
                let events: Vec<bool> = prefix.iter().map(|x| x.1).collect();
                let s = product_limit(&times, &events).unwrap();
                for t in [0.5, 1.0, 1.5, 2.0, 3.0, 3.5, 4.0, 5.0] {
                    assert_eq!(as_ratio(s.eval(t)), oracle_km(&times, &events, t), "{prefix:?} at {t}");
                }
                *out += 1;
                return;
            }
            // non-decreasing times enumerate multisets; order does not matter
            let lo = prefix.last().map_or(1, |x| x.0);
            for t in lo..=4 {
                for e in [false, true] {
                    prefix.push((t, e));
                    rec(n, prefix, out);
                    prefix.pop();
                }
            }
        }
        let mut count = 0;
        for n in 1..=6 {
            rec(n, &mut Vec::new(), &mut count);
        }
        assert!(count > 1000);
    }

    proptest! {
        #[test]
        fn survivor_and_integral_properties(
            recs in prop::collection::vec((0.0f64..2.0, 0.01f64..5.0, any::<bool>()), 1..40)
        ) {
            let times: Vec<f64> = recs.iter().map(|r| r.1).collect();
            let events: Vec<bool> = recs.iter().map(|r| r.2).collect();
            let s = product_limit(&times, &events).unwrap();
            prop_assert_eq!(s.eval(0.0), 1.0);
            let mut prev = 1.0;
            for &v in s.values() {
                prop_assert!((0.0..=1.0).contains(&v));
                prop_assert!(v <= prev);
                prev = v;
            }
            let grid: Vec<f64> = (0..60).map(|i| i as f64 * 0.1).collect();
            for w in grid.windows(2) {
                let (w1, w2) = (s.w_integral(w[0]).unwrap(), s.w_integral(w[1]).unwrap());
                prop_assert!(w2 >= w1);
                prop_assert!(w2 - w1 <= w[1] - w[0] + 1e-12);
                prop_assert!(w2 <= w[1] + 1e-12);
            }
        }

        #[test]
        fn no_censoring_weight_grows_over_follow_up(
            a in 0.0f64..1.0, len in 0.1f64..5.0, steps in 2usize..20
        ) {
            let one = StepSurvivor::constant_one();
            let y = a + len;
            let mut prev = 0.0;
            for i in 0..=steps {
                let t = a + len * i as f64 / steps as f64;
                let r = weight_r(&one, t, y, true, a).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
        }
    }
}

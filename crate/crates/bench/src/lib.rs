//! Shared fixtures for the benchmarks.

use lbsimex::datagen::replicate_cohort;
use lbsimex::{calibrate_censoring, Cohort, SimScenario, TransformationLink};

pub const SEED: u64 = 7;

/// A simulated cohort of size `n` under the standard scenario.
pub fn cohort(link: TransformationLink, n: usize) -> Cohort {
    let mut sc = SimScenario::standard(link, 0.25, 0.5);
    sc.n = n;
    let c = calibrate_censoring(&sc, 0.25, SEED).expect("standard scenario calibrates");
    replicate_cohort(&sc, c, SEED, 0).expect("standard scenario draws")
}

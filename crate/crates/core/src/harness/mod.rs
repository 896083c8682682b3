//! Simulation study, sensitivity analysis, CSV ingestion and report output.

pub mod config;
pub mod csvio;
pub mod report;
pub mod sensitivity;
pub mod simulate;

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use config::KeyValueConfig;
pub use csvio::{load_cohort_csv, read_cohort_csv, write_cohort_csv, ColumnMap};
pub use report::{emit_report, render_report, ReportFormat, Tabular};
pub use sensitivity::{sensitivity_analysis, sensitivity_with_base, two_sided_p_value, SensitivityRow};
pub use simulate::{run_simulation, SimulationOutcome, SummaryRow};

/// Estimator compared in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Simex,
    /// Fitted on the true covariates, available only in simulation.
    True,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Simex => "simex",
            Method::True => "true",
        }
    }

    /// Parse a comma-separated list such as `naive,simex,true`.
    pub fn parse_list(s: &str) -> Result<Vec<Method>> {
        let mut out: Vec<Method> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Method = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("no methods given".into()));
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "naive" => Ok(Method::Naive),
            "simex" => Ok(Method::Simex),
            "true" => Ok(Method::True),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Run `f` on a pool with `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::Config("worker count must be positive".into())),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

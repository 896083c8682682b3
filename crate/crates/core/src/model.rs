//! Error-distribution links of the transformation model `H(T) = -X'b + e`.
//!
//! A link is described by the cumulative hazard `Λ` of `e`, its derivative
//! `λ` and the derivative of the hazard `λ'`. Two laws are supported:
//! extreme-value errors give proportional hazards, logistic errors give
//! proportional odds.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Largest argument for which `exp` is finite. The PH link saturates at
/// `exp(PH_EXP_CAP) ≈ 1.0e308` instead of overflowing.
pub const PH_EXP_CAP: f64 = 709.0;

/// Beyond this magnitude the PO link switches to its asymptotic forms.
const PO_SWITCH: f64 = 35.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformationLink {
    /// Extreme-value error, `Λ(x) = e^x`.
    #[serde(alias = "PH")]
    Ph,
    /// Logistic error, `Λ(x) = log(1 + e^x)`.
    #[serde(alias = "PO")]
    Po,
}

impl TransformationLink {
    pub fn name(self) -> &'static str {
        match self {
            TransformationLink::Ph => "PH",
            TransformationLink::Po => "PO",
        }
    }

    /// Cumulative hazard without argument checking. Callers inside the
    /// estimator only pass finite values.
    #[inline]
    pub fn lambda_cum(self, x: f64) -> f64 {
        match self {
            TransformationLink::Ph => x.min(PH_EXP_CAP).exp(),
            TransformationLink::Po => softplus(x),
        }
    }

    #[inline]
    pub fn lambda(self, x: f64) -> f64 {
        match self {
            TransformationLink::Ph => x.min(PH_EXP_CAP).exp(),
            TransformationLink::Po => logistic(x),
        }
    }

    #[inline]
    pub fn lambda_prime(self, x: f64) -> f64 {
        match self {
            TransformationLink::Ph => x.min(PH_EXP_CAP).exp(),
            TransformationLink::Po => {
                let p = logistic(x);
                // p(1-p) loses everything for large x if written directly.
                let q = logistic(-x);
                p * q
            }
        }
    }

    /// `(Λ(x), λ(x))` sharing one exponential.
    #[inline]
    pub(crate) fn lambda_pair(self, x: f64) -> (f64, f64) {
        match self {
            TransformationLink::Ph => {
                let e = x.min(PH_EXP_CAP).exp();
                (e, e)
            }
            TransformationLink::Po => {
                if x > PO_SWITCH {
                    let e = (-x).exp();
                    (x + e, 1.0 / (1.0 + e))
                } else if x < -PO_SWITCH {
                    let e = x.exp();
                    (e, e)
                } else {
                    let e = x.exp();
                    (e.ln_1p(), e / (1.0 + e))
                }
            }
        }
    }

    /// As [`lambda_pair`](Self::lambda_pair) given `v ≈ e^x` computed by the
    /// caller, typically as a product of cached exponentials.
    #[inline]
    pub(crate) fn lambda_pair_from_exp(self, x: f64, v: f64) -> (f64, f64) {
        const LO: f64 = 6.305116760146989e-16; // e^-35
        const HI: f64 = 1.5860134523134308e15; // e^35
        if (LO..=HI).contains(&v) {
            match self {
                TransformationLink::Ph => (v, v),
                TransformationLink::Po => (v.ln_1p(), v / (1.0 + v)),
            }
        } else {
            self.lambda_pair(x)
        }
    }

    pub fn cum_hazard(self, x: f64) -> Result<f64> {
        check_finite(x)?;
        Ok(self.lambda_cum(x))
    }

    pub fn hazard(self, x: f64) -> Result<f64> {
        check_finite(x)?;
        Ok(self.lambda(x))
    }

    pub fn hazard_deriv(self, x: f64) -> Result<f64> {
        check_finite(x)?;
        Ok(self.lambda_prime(x))
    }

    /// Draw the error term `e` by inversion of its survivor
    /// `P(e > x) = exp(-Λ(x))` from a uniform `u` in (0, 1).
    pub fn sample_error(self, u: f64) -> f64 {
        match self {
            // exp(-e^x) = u  =>  x = log(-log u)
            TransformationLink::Ph => (-u.ln()).ln(),
            // 1/(1+e^x) = u  =>  x = log((1-u)/u)
            TransformationLink::Po => ((1.0 - u) / u).ln(),
        }
    }
}

impl fmt::Display for TransformationLink {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformationLink {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ph" => Ok(TransformationLink::Ph),
            "po" => Ok(TransformationLink::Po),
            other => Err(Error::InvalidArgument(format!(
                "unknown model '{other}', expected ph or po"
            ))),
        }
    }
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("non-finite link argument {x}")))
    }
}

/// `log(1 + e^x)` without overflow or cancellation.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > PO_SWITCH {
        x + (-x).exp()
    } else if x < -PO_SWITCH {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

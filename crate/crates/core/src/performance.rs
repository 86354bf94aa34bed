//! Exponential performance funnels `rho(t) = (rho0 - rho_inf) e^{-decay t} + rho_inf`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PerformanceError {
    #[error("funnel requires rho0 > rho_inf > 0 and decay > 0 (got rho0={rho0}, rho_inf={rho_inf}, decay={decay})")]
    InvalidFunnel { rho0: f64, rho_inf: f64, decay: f64 },
    #[error("funnel evaluated at negative time {0}")]
    NegativeTime(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFunnel", into = "RawFunnel")]
pub struct PerformanceFunction {
    rho0: f64,
    rho_inf: f64,
    decay: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFunnel {
    rho0: f64,
    rho_inf: f64,
    decay: f64,
}

impl TryFrom<RawFunnel> for PerformanceFunction {
    type Error = PerformanceError;

    fn try_from(raw: RawFunnel) -> Result<Self, Self::Error> {
        PerformanceFunction::new(raw.rho0, raw.rho_inf, raw.decay)
    }
}

impl From<PerformanceFunction> for RawFunnel {
    fn from(pf: PerformanceFunction) -> Self {
        RawFunnel {
            rho0: pf.rho0,
            rho_inf: pf.rho_inf,
            decay: pf.decay,
        }
    }
}

impl PerformanceFunction {
    pub fn new(rho0: f64, rho_inf: f64, decay: f64) -> Result<Self, PerformanceError> {
        let valid = rho_inf > 0.0 && rho0 > rho_inf && decay > 0.0 && rho0.is_finite() && decay.is_finite();
        if !valid {
            return Err(PerformanceError::InvalidFunnel {
                rho0,
                rho_inf,
                decay,
            });
        }
        Ok(PerformanceFunction {
            rho0,
            rho_inf,
            decay,
        })
    }

    pub fn rho0(&self) -> f64 {
        self.rho0
    }

    pub fn rho_inf(&self) -> f64 {
        self.rho_inf
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    fn check(t: f64) -> Result<(), PerformanceError> {
        if t >= 0.0 {
            Ok(())
        } else {
            Err(PerformanceError::NegativeTime(t))
        }
    }

    pub fn rho(&self, t: f64) -> Result<f64, PerformanceError> {
        Self::check(t)?;
        Ok((self.rho0 - self.rho_inf) * (-self.decay * t).exp() + self.rho_inf)
    }

    pub fn rho_dot(&self, t: f64) -> Result<f64, PerformanceError> {
        Self::check(t)?;
        Ok(-self.decay * (self.rho0 - self.rho_inf) * (-self.decay * t).exp())
    }

    /// `-rho_dot / rho`, the funnel's instantaneous contraction rate.
    pub fn alpha(&self, t: f64) -> Result<f64, PerformanceError> {
        Ok(-self.rho_dot(t)? / self.rho(t)?)
    }

    /// Exact supremum of [`alpha`](Self::alpha) over `t >= 0`, reached at `t = 0`.
    pub fn alpha_bar(&self) -> f64 {
        self.decay * (self.rho0 - self.rho_inf) / self.rho0
    }

    /// The looser bound `alpha <= decay`.
    pub fn alpha_bound_loose(&self) -> f64 {
        self.decay
    }

    pub fn normalize(&self, s: f64, t: f64) -> Result<f64, PerformanceError> {
        Ok(s / self.rho(t)?)
    }
}

/// Membership in the open region `(-1, 1)`.
pub fn in_region(s_hat: f64) -> bool {
    s_hat > -1.0 && s_hat < 1.0
}

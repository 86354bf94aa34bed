//! Logarithmic error transformation mapping the open funnel region `(-1, 1)`
//! onto the real line, together with its derivative.

use thiserror::Error;

use crate::performance::{PerformanceError, PerformanceFunction};
use crate::topology::Edge;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransformError {
    #[error("normalized error {s_hat} is outside the open funnel (|s_hat| = {magnitude} >= 1)")]
    OutsideFunnel { s_hat: f64, magnitude: f64 },
    #[error("edge #{index} {edge}: normalized error {s_hat} left the funnel at t = {t}")]
    EdgeOutsideFunnel {
        index: usize,
        edge: Edge,
        s_hat: f64,
        t: f64,
    },
    #[error("edge #{index} {edge}: non-finite edge value {value}")]
    NonFinite { index: usize, edge: Edge, value: f64 },
    #[error("edge vector has {values} entries but {funnels} funnels were supplied")]
    LengthMismatch { values: usize, funnels: usize },
    #[error(transparent)]
    Performance(#[from] PerformanceError),
}

/// A funnel bound to the edge it constrains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFunnel {
    pub edge: Edge,
    pub funnel: PerformanceFunction,
}

fn check_region(s_hat: f64) -> Result<(), TransformError> {
    if s_hat.abs() < 1.0 {
        Ok(())
    } else {
        Err(TransformError::OutsideFunnel {
            s_hat,
            magnitude: s_hat.abs(),
        })
    }
}

// ln((1+s)/(1-s)) == 2 artanh(s), which keeps precision near the boundary
fn epsilon_unchecked(s_hat: f64) -> f64 {
    // evaluated on |s_hat| so the map is odd bit for bit
    (2.0 * s_hat.abs().atanh()).copysign(s_hat)
}

fn jacobian_unchecked(s_hat: f64) -> f64 {
    2.0 / ((1.0 - s_hat) * (1.0 + s_hat))
}

pub fn epsilon(s_hat: f64) -> Result<f64, TransformError> {
    check_region(s_hat)?;
    Ok(epsilon_unchecked(s_hat))
}

/// Inverse of [`epsilon`]: `(e^x - 1)/(e^x + 1) = tanh(x/2)`.
pub fn epsilon_inv(e: f64) -> f64 {
    (0.5 * e.abs()).tanh().copysign(e)
}

/// `d epsilon / d s_hat = 2 / (1 - s_hat^2)`.
pub fn jacobian(s_hat: f64) -> Result<f64, TransformError> {
    check_region(s_hat)?;
    Ok(jacobian_unchecked(s_hat))
}

/// Per-edge normalized errors, transformed errors, and Jacobian diagonal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransformBundle {
    pub s_hat: Vec<f64>,
    pub eps: Vec<f64>,
    pub jac: Vec<f64>,
}

impl TransformBundle {
    pub fn len(&self) -> usize {
        self.s_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_hat.is_empty()
    }

    /// Componentwise `J_l * eps_l`, the per-edge term of the control law.
    pub fn weighted(&self) -> Vec<f64> {
        self.jac.iter().zip(&self.eps).map(|(j, e)| j * e).collect()
    }
}

/// A component that was clamped during guarded evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuardHit {
    pub index: usize,
    pub edge: Edge,
    pub s_hat: f64,
}

/// Normalizes, transforms, and differentiates every edge value. Fails on the
/// first component outside the open funnel.
pub fn transform_edges(
    s: &[f64],
    funnels: &[EdgeFunnel],
    t: f64,
) -> Result<TransformBundle, TransformError> {
    transform_impl(s, funnels, t, None, &mut Vec::new())
}

/// Like [`transform_edges`] but components with `|s_hat| >= 1 - guard` are
/// clamped to `±(1 - guard)` and reported in `hits`. Only non-finite inputs
/// are errors.
pub fn transform_edges_guarded(
    s: &[f64],
    funnels: &[EdgeFunnel],
    t: f64,
    guard: f64,
    hits: &mut Vec<GuardHit>,
) -> Result<TransformBundle, TransformError> {
    transform_impl(s, funnels, t, Some(guard), hits)
}

fn transform_impl(
    s: &[f64],
    funnels: &[EdgeFunnel],
    t: f64,
    guard: Option<f64>,
    hits: &mut Vec<GuardHit>,
) -> Result<TransformBundle, TransformError> {
    if s.len() != funnels.len() {
        return Err(TransformError::LengthMismatch {
            values: s.len(),
            funnels: funnels.len(),
        });
    }
    let mut bundle = TransformBundle {
        s_hat: Vec::with_capacity(s.len()),
        eps: Vec::with_capacity(s.len()),
        jac: Vec::with_capacity(s.len()),
    };
    for (index, (&value, ef)) in s.iter().zip(funnels).enumerate() {
        if !value.is_finite() {
            return Err(TransformError::NonFinite {
                index,
                edge: ef.edge,
                value,
            });
        }
        let mut s_hat = ef.funnel.normalize(value, t)?;
        match guard {
            Some(g) => {
                let limit = 1.0 - g;
                if s_hat.abs() >= limit {
                    hits.push(GuardHit {
                        index,
                        edge: ef.edge,
                        s_hat,
                    });
                    s_hat = limit.copysign(s_hat);
                }
            }
            None => {
                if s_hat.abs() >= 1.0 {
                    return Err(TransformError::EdgeOutsideFunnel {
                        index,
                        edge: ef.edge,
                        s_hat,
                        t,
                    });
                }
            }
        }
        bundle.s_hat.push(s_hat);
        bundle.eps.push(epsilon_unchecked(s_hat));
        bundle.jac.push(jacobian_unchecked(s_hat));
    }
    Ok(bundle)
}

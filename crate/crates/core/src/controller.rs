//! The distributed prescribed-performance control law and the gain
//! feasibility conditions that certify it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{Edge, IncidenceMatrix};
use crate::transform::{
    transform_edges, transform_edges_guarded, EdgeFunnel, GuardHit, TransformBundle, TransformError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("gain {field} must be positive and finite, got {value}")]
    NonPositiveGain { field: &'static str, value: f64 },
    #[error("gain h5 = {h5} must exceed h4 = {h4}")]
    H5NotAboveH4 { h4: f64, h5: f64 },
    #[error("alpha bar for the {channel} channel must be positive, got {value}")]
    NonPositiveAlphaBar { channel: Channel, value: f64 },
    #[error("probe vectors must have equal length ({0} vs {1})")]
    ProbeLength(usize, usize),
    #[error("probe pair is identically zero")]
    ZeroProbe,
    #[error("{channel} channel, edge {edge}: normalized error {s_hat} outside the funnel at t = {t}")]
    FunnelViolation {
        channel: Channel,
        edge: Edge,
        s_hat: f64,
        t: f64,
    },
    #[error("{channel} channel: {source}")]
    Transform {
        channel: Channel,
        #[source]
        source: TransformError,
    },
    #[error("state vectors have length {x}/{v} but the graph has {n} nodes")]
    StateLength { x: usize, v: usize, n: usize },
}

/// Which relative state an error or margin refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Position,
    Velocity,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Channel::Position => "position",
            Channel::Velocity => "velocity",
        })
    }
}

/// Control gain `phi` plus the analysis gains of the stability certificate.
///
/// `h1..h4` define the cross-term matrix of the potential function, `h5`/`h6`
/// weight the transformed errors, and `a2..a4` are the auxiliary constants of
/// the fourth feasibility condition. Only `phi` enters the control law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSet {
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub h4: f64,
    pub h5: f64,
    pub h6: f64,
    pub phi: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
}

impl GainSet {
    /// The gains of the reference five-agent experiment.
    pub const REFERENCE: GainSet = GainSet {
        h1: 10.0,
        h2: 1.0,
        h3: 6.0,
        h4: 1.5,
        h5: 1.6,
        h6: 1.5,
        phi: 1.0,
        a2: 0.1,
        a3: 0.5,
        a4: 0.1,
    };

    fn fields(&self) -> [(&'static str, f64); 10] {
        [
            ("h1", self.h1),
            ("h2", self.h2),
            ("h3", self.h3),
            ("h4", self.h4),
            ("h5", self.h5),
            ("h6", self.h6),
            ("phi", self.phi),
            ("a2", self.a2),
            ("a3", self.a3),
            ("a4", self.a4),
        ]
    }

    pub fn check(&self) -> Result<(), ControlError> {
        for (field, value) in self.fields() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ControlError::NonPositiveGain { field, value });
            }
        }
        if self.h5 <= self.h4 {
            return Err(ControlError::H5NotAboveH4 {
                h4: self.h4,
                h5: self.h5,
            });
        }
        Ok(())
    }
}

/// Margins of the four gain conditions; the certificate holds when all are
/// strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FeasibilityReport {
    /// `4 h1 h4 - (h3 - h2)^2`
    pub c1: f64,
    /// `h3 - h2 - 2 h5 alpha_y`
    pub c2: f64,
    /// `h4 phi - h6 alpha_z`
    pub c3: f64,
    /// `2 h6 phi - a2 phi (h3 - h2) - 2 h6 a4`
    pub c4: f64,
    pub feasible: bool,
    pub alpha_bar_y: f64,
    pub alpha_bar_z: f64,
}

impl FeasibilityReport {
    pub fn margins(&self) -> [f64; 4] {
        [self.c1, self.c2, self.c3, self.c4]
    }

    pub fn min_margin(&self) -> f64 {
        self.margins().into_iter().fold(f64::INFINITY, f64::min)
    }
}

pub fn validate_gains(
    g: &GainSet,
    alpha_bar_y: f64,
    alpha_bar_z: f64,
) -> Result<FeasibilityReport, ControlError> {
    g.check()?;
    for (channel, value) in [(Channel::Position, alpha_bar_y), (Channel::Velocity, alpha_bar_z)] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(ControlError::NonPositiveAlphaBar { channel, value });
        }
    }
    let gap = g.h3 - g.h2;
    let c1 = 4.0 * g.h1 * g.h4 - gap * gap;
    let c2 = gap - 2.0 * g.h5 * alpha_bar_y;
    let c3 = g.h4 * g.phi - g.h6 * alpha_bar_z;
    let c4 = 2.0 * g.h6 * g.phi - g.a2 * g.phi * gap - 2.0 * g.h6 * g.a4;
    let feasible = [c1, c2, c3, c4].iter().all(|&c| c > 0.0);
    Ok(FeasibilityReport {
        c1,
        c2,
        c3,
        c4,
        feasible,
        alpha_bar_y,
        alpha_bar_z,
    })
}

/// `h1 |e1|^2 + (h3 - h2) e1·e2 + h4 |e2|^2`, the quadratic form of the
/// cross-term matrix (its skew part contributes nothing).
pub fn quadratic_form(g: &GainSet, e1: &[f64], e2: &[f64]) -> Result<f64, ControlError> {
    if e1.len() != e2.len() {
        return Err(ControlError::ProbeLength(e1.len(), e2.len()));
    }
    if e1.iter().chain(e2).all(|&c| c == 0.0) {
        return Err(ControlError::ZeroProbe);
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    Ok(g.h1 * dot(e1, e1) + (g.h3 - g.h2) * dot(e1, e2) + g.h4 * dot(e2, e2))
}

pub fn quadratic_form_positive(g: &GainSet, e1: &[f64], e2: &[f64]) -> Result<bool, ControlError> {
    Ok(quadratic_form(g, e1, e2)? > 0.0)
}

/// Per-channel transforms produced while evaluating the control law.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ControlOutput {
    pub u: Vec<f64>,
    pub position: TransformBundle,
    pub velocity: TransformBundle,
}

fn check_lengths(b: &IncidenceMatrix, x: &[f64], v: &[f64]) -> Result<(), ControlError> {
    let n = b.n_nodes();
    if x.len() != n || v.len() != n {
        return Err(ControlError::StateLength {
            x: x.len(),
            v: v.len(),
            n,
        });
    }
    Ok(())
}

fn strict(channel: Channel, t: f64) -> impl Fn(TransformError) -> ControlError {
    move |source| match source {
        TransformError::EdgeOutsideFunnel { edge, s_hat, .. } => ControlError::FunnelViolation {
            channel,
            edge,
            s_hat,
            t,
        },
        source => ControlError::Transform { channel, source },
    }
}

fn assemble(
    b: &IncidenceMatrix,
    phi: f64,
    position: TransformBundle,
    velocity: TransformBundle,
) -> ControlOutput {
    let combined: Vec<f64> = position
        .weighted()
        .into_iter()
        .zip(velocity.weighted())
        .map(|(p, q)| -(p + phi * q))
        .collect();
    ControlOutput {
        u: b.scatter(&combined),
        position,
        velocity,
    }
}

/// Evaluates `u = -B J_y eps_y - phi B J_z eps_z` for the relative states
/// `y = Bᵀx`, `z = Bᵀv`. Funnel lists are aligned with the incidence columns.
pub fn control(
    b: &IncidenceMatrix,
    x: &[f64],
    v: &[f64],
    funnels_y: &[EdgeFunnel],
    funnels_z: &[EdgeFunnel],
    t: f64,
    g: &GainSet,
) -> Result<Vec<f64>, ControlError> {
    control_detailed(b, x, v, funnels_y, funnels_z, t, g.phi).map(|out| out.u)
}

pub fn control_detailed(
    b: &IncidenceMatrix,
    x: &[f64],
    v: &[f64],
    funnels_y: &[EdgeFunnel],
    funnels_z: &[EdgeFunnel],
    t: f64,
    phi: f64,
) -> Result<ControlOutput, ControlError> {
    check_lengths(b, x, v)?;
    let position = transform_edges(&b.edge_differences(x), funnels_y, t)
        .map_err(strict(Channel::Position, t))?;
    let velocity = transform_edges(&b.edge_differences(v), funnels_z, t)
        .map_err(strict(Channel::Velocity, t))?;
    Ok(assemble(b, phi, position, velocity))
}

/// Guarded variant used at intermediate integrator stages: components near or
/// beyond the funnel boundary are clamped and reported instead of failing.
#[allow(clippy::too_many_arguments)]
pub fn control_guarded(
    b: &IncidenceMatrix,
    x: &[f64],
    v: &[f64],
    funnels_y: &[EdgeFunnel],
    funnels_z: &[EdgeFunnel],
    t: f64,
    phi: f64,
    guard: f64,
    hits: &mut Vec<(Channel, GuardHit)>,
) -> Result<Vec<f64>, ControlError> {
    check_lengths(b, x, v)?;
    let mut raw = Vec::new();
    let position = transform_edges_guarded(&b.edge_differences(x), funnels_y, t, guard, &mut raw)
        .map_err(|source| ControlError::Transform {
            channel: Channel::Position,
            source,
        })?;
    hits.extend(raw.drain(..).map(|h| (Channel::Position, h)));
    let velocity = transform_edges_guarded(&b.edge_differences(v), funnels_z, t, guard, &mut raw)
        .map_err(|source| ControlError::Transform {
            channel: Channel::Velocity,
            source,
        })?;
    hits.extend(raw.drain(..).map(|h| (Channel::Velocity, h)));
    Ok(assemble(b, phi, position, velocity).u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::performance::PerformanceFunction;
    use crate::topology::{build_incidence, Graph};
    use approx::assert_relative_eq;
    use nalgebra::{Matrix2, SymmetricEigen};
    use proptest::prelude::*;

    fn funnels(graph: &Graph, pf: PerformanceFunction) -> Vec<EdgeFunnel> {
        graph
            .edges()
            .iter()
            .map(|&edge| EdgeFunnel { edge, funnel: pf })
            .collect()
    }

    fn py() -> PerformanceFunction {
        PerformanceFunction::new(5.0, 0.1, 1.5).unwrap()
    }

    fn pz() -> PerformanceFunction {
        PerformanceFunction::new(5.0, 0.1, 0.8).unwrap()
    }

    #[test]
    fn reference_gains_with_loose_bounds() {
        let r = validate_gains(&GainSet::REFERENCE, 1.5, 0.8).unwrap();
        assert!((r.c1 - 35.0).abs() <= 1e-12);
        assert!((r.c2 - 0.2).abs() <= 1e-12);
        assert!((r.c3 - 0.3).abs() <= 1e-12);
        assert!((r.c4 - 2.2).abs() <= 1e-12);
        assert!(r.feasible);
    }

    #[test]
    fn reference_gains_with_exact_suprema() {
        let r = validate_gains(&GainSet::REFERENCE, 1.47, 0.784).unwrap();
        assert_relative_eq!(r.c2, 0.296, max_relative = 1e-12);
        assert_relative_eq!(r.c3, 0.324, max_relative = 1e-12);
        assert!(r.feasible);
    }

    #[test]
    fn large_h5_is_infeasible() {
        let g = GainSet {
            h5: 2.0,
            ..GainSet::REFERENCE
        };
        let r = validate_gains(&g, 1.5, 0.8).unwrap();
        assert!((r.c2 + 1.0).abs() <= 1e-12);
        assert!(!r.feasible);
        assert!(r.min_margin() < 0.0);
    }

    #[test]
    fn symmetric_q_case() {
        let g = GainSet {
            h1: 1.0,
            h4: 1.0,
            h2: 3.0,
            h3: 3.0,
            ..GainSet::REFERENCE
        };
        let r = validate_gains(&g, 1.5, 0.8).unwrap();
        assert_eq!(r.c1, 4.0);
    }

    #[test]
    fn invalid_gains_name_the_field() {
        let g = GainSet {
            a3: 0.0,
            ..GainSet::REFERENCE
        };
        let err = validate_gains(&g, 1.5, 0.8).unwrap_err();
        assert_eq!(
            err,
            ControlError::NonPositiveGain {
                field: "a3",
                value: 0.0
            }
        );
        assert!(err.to_string().contains("a3"));
        let g = GainSet {
            h5: 1.0,
            ..GainSet::REFERENCE
        };
        assert!(matches!(
            validate_gains(&g, 1.5, 0.8),
            Err(ControlError::H5NotAboveH4 { .. })
        ));
        assert!(validate_gains(&GainSet::REFERENCE, 0.0, 0.8).is_err());
    }

    #[test]
    fn quadratic_form_probes() {
        let g = GainSet::REFERENCE;
        assert_eq!(quadratic_form(&g, &[1.0, 0.0], &[0.0, 0.0]).unwrap(), 10.0);
        assert_eq!(quadratic_form(&g, &[1.0, 0.0], &[1.0, 0.0]).unwrap(), 16.5);
        assert!(matches!(
            quadratic_form(&g, &[0.0], &[0.0]),
            Err(ControlError::ZeroProbe)
        ));
        assert!(quadratic_form(&g, &[1.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn indefinite_gains_admit_negative_probe() {
        // 4 h1 h4 = 4 < (h3 - h2)^2 = 9
        let g = GainSet {
            h1: 1.0,
            h2: 1.0,
            h3: 4.0,
            h4: 1.0,
            ..GainSet::REFERENCE
        };
        let sym = Matrix2::new(g.h1, (g.h3 - g.h2) / 2.0, (g.h3 - g.h2) / 2.0, g.h4);
        let eig = SymmetricEigen::new(sym);
        let (idx, min) = eig.eigenvalues.argmin();
        assert!(min < 0.0);
        let dir = eig.eigenvectors.column(idx);
        assert!(!quadratic_form_positive(&g, &[dir[0]], &[dir[1]]).unwrap());

        let mut found = false;
        for i in 0..=40 {
            let theta = i as f64 * std::f64::consts::PI / 40.0;
            if !quadratic_form_positive(&g, &[theta.cos()], &[theta.sin()]).unwrap() {
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn consensus_gives_zero_input() {
        let graph = Graph::new(3, &[(1, 2), (2, 3)]).unwrap();
        let b = build_incidence(&graph);
        let u = control(
            &b,
            &[1.3; 3],
            &[-0.2; 3],
            &funnels(&graph, py()),
            &funnels(&graph, pz()),
            0.5,
            &GainSet::REFERENCE,
        )
        .unwrap();
        assert_eq!(u, [0.0; 3]);
    }

    #[test]
    fn two_agent_hand_evaluation() {
        let graph = Graph::new(2, &[(1, 2)]).unwrap();
        let b = build_incidence(&graph);
        let out = control_detailed(
            &b,
            &[1.0, 0.0],
            &[0.0, 0.0],
            &funnels(&graph, py()),
            &funnels(&graph, pz()),
            0.0,
            1.0,
        )
        .unwrap();
        assert_relative_eq!(out.position.s_hat[0], 0.2, max_relative = 1e-15);
        assert_relative_eq!(out.position.eps[0], 0.405_465_108_108_164_4, max_relative = 1e-14);
        assert_relative_eq!(out.position.jac[0], 2.0 / 0.96, max_relative = 1e-14);
        // 2/(1 - 0.04) ln 1.5, 30-digit reference
        assert_relative_eq!(out.u[0], -0.844_718_975_225_342_5, max_relative = 1e-14);
        assert_relative_eq!(out.u[1], 0.844_718_975_225_342_5, max_relative = 1e-14);
    }

    #[test]
    fn empty_graph_gives_zero_input() {
        let graph = Graph::empty(4).unwrap();
        let b = build_incidence(&graph);
        let u = control(&b, &[1.0, 2.0, 3.0, 4.0], &[0.0; 4], &[], &[], 0.0, &GainSet::REFERENCE).unwrap();
        assert_eq!(u, [0.0; 4]);
    }

    #[test]
    fn violation_reports_channel_and_edge() {
        let graph = Graph::new(3, &[(1, 2), (2, 3)]).unwrap();
        let b = build_incidence(&graph);
        let err = control(
            &b,
            &[0.0, 0.0, 0.0],
            &[0.0, 0.0, 6.0],
            &funnels(&graph, py()),
            &funnels(&graph, pz()),
            0.0,
            &GainSet::REFERENCE,
        )
        .unwrap_err();
        match err {
            ControlError::FunnelViolation { channel, edge, .. } => {
                assert_eq!(channel, Channel::Velocity);
                assert_eq!(edge, Edge::new(2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    fn state(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-1.0f64..1.0, n),
            proptest::collection::vec(-1.0f64..1.0, n),
        )
    }

    proptest! {
        #[test]
        fn input_sums_to_zero((x, v) in state(5), t in 0.0f64..0.3) {
            let graph = Graph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5), (1, 5), (2, 4)]).unwrap();
            let b = build_incidence(&graph);
            let u = control(&b, &x, &v, &funnels(&graph, py()), &funnels(&graph, pz()), t, &GainSet::REFERENCE).unwrap();
            let sup = u.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            prop_assert!(u.iter().sum::<f64>().abs() <= 1e-12 * sup.max(1.0) * 5.0);
        }

        #[test]
        fn translation_invariant((x, v) in state(4), shift in -100_000i32..100_000) {
            let graph = Graph::new(4, &[(1, 2), (2, 3), (3, 4)]).unwrap();
            let b = build_incidence(&graph);
            let fy = funnels(&graph, py());
            let fz = funnels(&graph, pz());
            // dyadic grid: every sum and difference below is exact
            let q = |c: f64| (c * 1024.0).round() / 1024.0;
            let x: Vec<f64> = x.iter().map(|&c| q(c)).collect();
            let shift = f64::from(shift) / 1024.0;
            let shifted: Vec<f64> = x.iter().map(|c| c + shift).collect();
            let u1 = control(&b, &x, &v, &fy, &fz, 0.1, &GainSet::REFERENCE).unwrap();
            let u2 = control(&b, &shifted, &v, &fy, &fz, 0.1, &GainSet::REFERENCE).unwrap();
            prop_assert_eq!(u1, u2);
        }

        #[test]
        fn decentralized((x, v) in state(5), bump in -0.5f64..0.5) {
            // node 5 is not adjacent to node 1
            let graph = Graph::new(5, &[(1, 2), (2, 3), (3, 4), (4, 5)]).unwrap();
            let b = build_incidence(&graph);
            let fy = funnels(&graph, py());
            let fz = funnels(&graph, pz());
            let u1 = control(&b, &x, &v, &fy, &fz, 0.0, &GainSet::REFERENCE).unwrap();
            let mut x2 = x.clone();
            let mut v2 = v.clone();
            x2[4] += bump;
            v2[4] -= bump;
            let u2 = control(&b, &x2, &v2, &fy, &fz, 0.0, &GainSet::REFERENCE).unwrap();
            prop_assert_eq!(u1[0], u2[0]);
            prop_assert_eq!(u1[1], u2[1]);
        }

        #[test]
        fn margins_affine_in_alpha_bars(ay in 0.01f64..3.0, az in 0.01f64..3.0, d in 0.01f64..1.0) {
            let g = GainSet::REFERENCE;
            let base = validate_gains(&g, ay, az).unwrap();
            let moved = validate_gains(&g, ay + d, az + d).unwrap();
            prop_assert!(((moved.c2 - base.c2) / d + 2.0 * g.h5).abs() <= 1e-9);
            prop_assert!(((moved.c3 - base.c3) / d + g.h6).abs() <= 1e-9);
            prop_assert_eq!(moved.c1, base.c1);
            prop_assert_eq!(moved.c4, base.c4);
        }
    }
}

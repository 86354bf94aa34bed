//! Closed-loop integration of double-integrator agents under the funnel
//! protocol, across a switching topology.
//!
//! Integration uses classical fixed-step RK4 on a grid that is required to
//! land on every switching instant, so the active graph is constant across
//! the four stages of each step. At `t = 0` and at every switch the incoming
//! graph's edges are checked against their funnels before integration
//! continues; a failed check halts the run.

use std::fmt;

use thiserror::Error;

use crate::analysis;
use crate::controller::{
    control_detailed, control_guarded, validate_gains, Channel, ControlError, FeasibilityReport, GainSet,
};
use crate::performance::PerformanceFunction;
use crate::topology::{build_incidence, is_jointly_connected, Edge, Graph, IncidenceMatrix, SwitchingSchedule};
use crate::transform::EdgeFunnel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(
        "infeasible activation at t = {t}: edge {edge}, {channel} channel, |{value}| >= bound {bound}"
    )]
    InfeasibleActivation {
        t: f64,
        edge: Edge,
        channel: Channel,
        value: f64,
        bound: f64,
    },
    #[error("funnel violation at t = {t}: edge {edge}, {channel} channel, |{value}| >= bound {bound}")]
    FunnelViolation {
        t: f64,
        edge: Edge,
        channel: Channel,
        value: f64,
        bound: f64,
    },
    #[error("integration blew up at t = {t}, RK4 stage {stage}: {detail}")]
    IntegrationBlowup { t: f64, stage: usize, detail: String },
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl SystemState {
    pub fn new(t: f64, x: Vec<f64>, v: Vec<f64>) -> Self {
        SystemState { t, x, v }
    }

    pub fn n_agents(&self) -> usize {
        self.x.len()
    }

    fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.v).all(|c| c.is_finite())
    }
}

/// Per-edge funnel replacement for one or both channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunnelOverride {
    pub edge: Edge,
    pub position: Option<PerformanceFunction>,
    pub velocity: Option<PerformanceFunction>,
}

/// Default funnels for each channel plus optional per-edge overrides. Funnels
/// are keyed by node pair so an edge keeps its funnel across switches.
#[derive(Debug, Clone, PartialEq)]
pub struct FunnelSpec {
    pub position: PerformanceFunction,
    pub velocity: PerformanceFunction,
    pub overrides: Vec<FunnelOverride>,
}

impl FunnelSpec {
    pub fn uniform(position: PerformanceFunction, velocity: PerformanceFunction) -> Self {
        FunnelSpec {
            position,
            velocity,
            overrides: Vec::new(),
        }
    }

    pub fn funnel(&self, channel: Channel, edge: Edge) -> PerformanceFunction {
        let over = self.overrides.iter().find(|o| o.edge == edge);
        match channel {
            Channel::Position => over.and_then(|o| o.position).unwrap_or(self.position),
            Channel::Velocity => over.and_then(|o| o.velocity).unwrap_or(self.velocity),
        }
    }

    pub fn edge_funnels(&self, channel: Channel, edges: &[Edge]) -> Vec<EdgeFunnel> {
        edges
            .iter()
            .map(|&edge| EdgeFunnel {
                edge,
                funnel: self.funnel(channel, edge),
            })
            .collect()
    }

    fn all(&self, channel: Channel) -> impl Iterator<Item = PerformanceFunction> + '_ {
        let base = match channel {
            Channel::Position => self.position,
            Channel::Velocity => self.velocity,
        };
        std::iter::once(base).chain(self.overrides.iter().filter_map(move |o| match channel {
            Channel::Position => o.position,
            Channel::Velocity => o.velocity,
        }))
    }

    /// Exact suprema of the contraction rates, maximized over every funnel.
    pub fn alpha_bars(&self) -> (f64, f64) {
        let sup = |c| self.all(c).map(|pf| pf.alpha_bar()).fold(0.0, f64::max);
        (sup(Channel::Position), sup(Channel::Velocity))
    }

    /// The looser bounds `alpha <= decay`.
    pub fn alpha_bars_loose(&self) -> (f64, f64) {
        let sup = |c| self.all(c).map(|pf| pf.alpha_bound_loose()).fold(0.0, f64::max);
        (sup(Channel::Position), sup(Channel::Velocity))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationGrid {
    pub t_end: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorSettings {
    /// Record every `sample_stride`-th grid point (the final point always).
    pub sample_stride: usize,
    /// Stage clamping distance from the funnel boundary.
    pub guard: f64,
}

impl Default for MonitorSettings {
    fn default() -> Self {
        MonitorSettings {
            sample_stride: 10,
            guard: 1e-9,
        }
    }
}

pub const DEFAULT_DT: f64 = 1e-3;

/// A validated simulation description.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    initial: SystemState,
    schedule: SwitchingSchedule,
    funnels: FunnelSpec,
    gains: GainSet,
    grid: IntegrationGrid,
    monitor: MonitorSettings,
}

fn grid_steps(duration: f64, dt: f64) -> Option<usize> {
    let ratio = duration / dt;
    let steps = ratio.round();
    let ok = steps >= 1.0 && (steps * dt - duration).abs() <= 1e-12 * duration.max(dt);
    ok.then_some(steps as usize)
}

impl Scenario {
    pub fn new(
        initial: SystemState,
        schedule: SwitchingSchedule,
        funnels: FunnelSpec,
        gains: GainSet,
        grid: IntegrationGrid,
        monitor: MonitorSettings,
    ) -> Result<Self, SimError> {
        let invalid = |msg: String| Err(SimError::InvalidScenario(msg));
        let n = initial.x.len();
        if n == 0 {
            return invalid("at least one agent is required".into());
        }
        if initial.v.len() != n {
            return invalid(format!(
                "initial velocity has {} entries, expected {n}",
                initial.v.len()
            ));
        }
        if !initial.is_finite() {
            return invalid("initial state has non-finite entries".into());
        }
        if initial.t != 0.0 {
            return invalid(format!("initial time must be 0, got {}", initial.t));
        }
        if schedule.n_nodes() != n {
            return invalid(format!(
                "schedule graphs have {} nodes but there are {n} agents",
                schedule.n_nodes()
            ));
        }
        gains.check()?;
        if !(grid.dt > 0.0 && grid.dt.is_finite()) {
            return invalid(format!("dt must be positive, got {}", grid.dt));
        }
        if !(grid.t_end > 0.0 && grid.t_end.is_finite()) {
            return invalid(format!("t_end must be positive, got {}", grid.t_end));
        }
        for (i, seg) in schedule.segments().iter().enumerate() {
            if grid_steps(seg.duration, grid.dt).is_none() {
                return invalid(format!(
                    "dt = {} does not divide segment {} duration {}",
                    grid.dt, i, seg.duration
                ));
            }
        }
        if grid_steps(grid.t_end, grid.dt).is_none() {
            return invalid(format!("dt = {} does not divide t_end = {}", grid.dt, grid.t_end));
        }
        if !schedule.is_cyclic() && grid.t_end > schedule.cycle_length() * (1.0 + 1e-12) {
            return invalid(format!(
                "t_end = {} exceeds the acyclic schedule horizon {}",
                grid.t_end,
                schedule.cycle_length()
            ));
        }
        if monitor.sample_stride == 0 {
            return invalid("sample_stride must be at least 1".into());
        }
        if !(monitor.guard > 0.0 && monitor.guard < 1.0) {
            return invalid(format!("guard must lie in (0, 1), got {}", monitor.guard));
        }
        let catalog = schedule.catalog_edges();
        for o in &funnels.overrides {
            if !catalog.contains(&o.edge) {
                return invalid(format!("funnel override for edge {} which no graph uses", o.edge));
            }
        }
        Ok(Scenario {
            initial,
            schedule,
            funnels,
            gains,
            grid,
            monitor,
        })
    }

    /// Same scenario on a different step size, revalidated.
    pub fn with_dt(&self, dt: f64) -> Result<Self, SimError> {
        Scenario::new(
            self.initial.clone(),
            self.schedule.clone(),
            self.funnels.clone(),
            self.gains,
            IntegrationGrid { dt, ..self.grid },
            self.monitor,
        )
    }

    /// Same scenario with a different sampling stride.
    pub fn with_stride(&self, sample_stride: usize) -> Result<Self, SimError> {
        Scenario::new(
            self.initial.clone(),
            self.schedule.clone(),
            self.funnels.clone(),
            self.gains,
            self.grid,
            MonitorSettings {
                sample_stride,
                ..self.monitor
            },
        )
    }

    pub fn n_agents(&self) -> usize {
        self.initial.x.len()
    }

    pub fn initial(&self) -> &SystemState {
        &self.initial
    }

    pub fn schedule(&self) -> &SwitchingSchedule {
        &self.schedule
    }

    pub fn funnels(&self) -> &FunnelSpec {
        &self.funnels
    }

    pub fn gains(&self) -> &GainSet {
        &self.gains
    }

    pub fn grid(&self) -> IntegrationGrid {
        self.grid
    }

    pub fn monitor(&self) -> MonitorSettings {
        self.monitor
    }

    pub fn n_steps(&self) -> usize {
        grid_steps(self.grid.t_end, self.grid.dt).expect("validated at construction")
    }

    pub fn feasibility(&self) -> FeasibilityReport {
        let (ay, az) = self.funnels.alpha_bars();
        validate_gains(&self.gains, ay, az).expect("gains validated at construction")
    }
}

/// Incidence matrix and per-column funnels for one catalog graph.
#[derive(Debug, Clone)]
pub(crate) struct GraphContext {
    pub(crate) incidence: IncidenceMatrix,
    pub(crate) funnels_y: Vec<EdgeFunnel>,
    pub(crate) funnels_z: Vec<EdgeFunnel>,
}

impl GraphContext {
    pub(crate) fn new(graph: &Graph, funnels: &FunnelSpec) -> Self {
        GraphContext {
            incidence: build_incidence(graph),
            funnels_y: funnels.edge_funnels(Channel::Position, graph.edges()),
            funnels_z: funnels.edge_funnels(Channel::Velocity, graph.edges()),
        }
    }
}

/// Distance of each active edge from its funnel boundary at a given time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeMargin {
    pub edge: Edge,
    /// `min(1 - |y_hat|, 1 - |z_hat|)`
    pub margin: f64,
}

fn check_edges(ctx: &GraphContext, state: &SystemState) -> Result<Vec<EdgeMargin>, (Edge, Channel, f64, f64)> {
    let y = ctx.incidence.edge_differences(&state.x);
    let z = ctx.incidence.edge_differences(&state.v);
    let mut margins = Vec::with_capacity(y.len());
    for l in 0..y.len() {
        let mut margin = f64::INFINITY;
        for (channel, value, ef) in [
            (Channel::Position, y[l], &ctx.funnels_y[l]),
            (Channel::Velocity, z[l], &ctx.funnels_z[l]),
        ] {
            let bound = ef.funnel.rho(state.t).unwrap_or(f64::NAN);
            let ratio = value.abs() / bound;
            if ratio.is_nan() || ratio >= 1.0 {
                return Err((ef.edge, channel, value, bound));
            }
            margin = margin.min(1.0 - ratio);
        }
        margins.push(EdgeMargin {
            edge: ctx.incidence.edge_order()[l],
            margin,
        });
    }
    Ok(margins)
}

/// Verifies that every edge of `graph` starts inside both funnels at `state.t`.
pub fn check_feasibility(
    scenario: &Scenario,
    state: &SystemState,
    graph: &Graph,
) -> Result<Vec<EdgeMargin>, SimError> {
    let ctx = GraphContext::new(graph, &scenario.funnels);
    check_edges(&ctx, state).map_err(|(edge, channel, value, bound)| SimError::InfeasibleActivation {
        t: state.t,
        edge,
        channel,
        value,
        bound,
    })
}

/// Closed-loop vector field `(x', v') = (v, u)`.
pub fn derivative(
    state: &SystemState,
    graph: &Graph,
    scenario: &Scenario,
) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let ctx = GraphContext::new(graph, &scenario.funnels);
    let out = control_detailed(
        &ctx.incidence,
        &state.x,
        &state.v,
        &ctx.funnels_y,
        &ctx.funnels_z,
        state.t,
        scenario.gains.phi,
    )?;
    Ok((state.v.clone(), out.u))
}

/// A stage evaluation that needed clamping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuardEvent {
    pub t: f64,
    pub stage: usize,
    pub channel: Channel,
    pub edge: Edge,
    pub s_hat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub state: SystemState,
    pub guard_events: Vec<GuardEvent>,
}

/// One classical RK4 step on a fixed graph.
pub fn step_rk4(state: &SystemState, dt: f64, graph: &Graph, scenario: &Scenario) -> Result<Step, SimError> {
    let ctx = GraphContext::new(graph, &scenario.funnels);
    rk4(&ctx, state, dt, scenario)
}

fn axpy(base: &[f64], scale: f64, dir: &[f64]) -> Vec<f64> {
    base.iter().zip(dir).map(|(b, d)| b + scale * d).collect()
}

pub(crate) fn rk4(ctx: &GraphContext, state: &SystemState, dt: f64, scenario: &Scenario) -> Result<Step, SimError> {
    let guard = scenario.monitor.guard;
    let phi = scenario.gains.phi;
    let mut guard_events = Vec::new();
    let mut eval = |stage: usize, t: f64, x: &[f64], v: &[f64]| -> Result<Vec<f64>, SimError> {
        let mut hits = Vec::new();
        let u = control_guarded(&ctx.incidence, x, v, &ctx.funnels_y, &ctx.funnels_z, t, phi, guard, &mut hits)
            .map_err(|e| SimError::IntegrationBlowup {
                t,
                stage,
                detail: e.to_string(),
            })?;
        if let Some(bad) = u.iter().position(|c| !c.is_finite()) {
            return Err(SimError::IntegrationBlowup {
                t,
                stage,
                detail: format!("non-finite input for agent {}", bad + 1),
            });
        }
        guard_events.extend(hits.into_iter().map(|(channel, h)| GuardEvent {
            t,
            stage,
            channel,
            edge: h.edge,
            s_hat: h.s_hat,
        }));
        Ok(u)
    };

    let t = state.t;
    let half = 0.5 * dt;
    let (x, v) = (&state.x, &state.v);

    let kv1 = v.clone();
    let ku1 = eval(1, t, x, v)?;
    let x2 = axpy(x, half, &kv1);
    let v2 = axpy(v, half, &ku1);

    let ku2 = eval(2, t + half, &x2, &v2)?;
    let kv2 = v2;
    let x3 = axpy(x, half, &kv2);
    let v3 = axpy(v, half, &ku2);

    let ku3 = eval(3, t + half, &x3, &v3)?;
    let kv3 = v3;
    let x4 = axpy(x, dt, &kv3);
    let v4 = axpy(v, dt, &ku3);

    let ku4 = eval(4, t + dt, &x4, &v4)?;
    let kv4 = v4;

    let combine = |base: &[f64], k1: &[f64], k2: &[f64], k3: &[f64], k4: &[f64]| -> Vec<f64> {
        (0..base.len())
            .map(|i| base[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect()
    };
    let next = SystemState {
        t: t + dt,
        x: combine(x, &kv1, &kv2, &kv3, &kv4),
        v: combine(v, &ku1, &ku2, &ku3, &ku4),
    };
    if !next.is_finite() {
        return Err(SimError::IntegrationBlowup {
            t: next.t,
            stage: 4,
            detail: "non-finite state after update".into(),
        });
    }
    Ok(Step {
        state: next,
        guard_events,
    })
}

/// One edge's relative state at a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeSample {
    pub edge: Edge,
    pub y: f64,
    pub z: f64,
    pub rho_y: f64,
    pub rho_z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// Index into [`Trajectory::graph_names`].
    pub graph: usize,
    /// Active edges only, in incidence column order.
    pub edges: Vec<EdgeSample>,
    /// Default (non-overridden) funnel values.
    pub rho_y: f64,
    pub rho_z: f64,
    pub u: Vec<f64>,
    pub lyapunov: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    /// A graph became active (at `t = 0` or at a switch).
    Activation { t: f64, graph: usize },
    Guard(GuardEvent),
}

/// Feasibility verdicts recorded before integration starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub gains: FeasibilityReport,
    pub jointly_connected: bool,
}

impl Certificate {
    pub fn holds(&self) -> bool {
        self.gains.feasible && self.jointly_connected
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n_agents: usize,
    pub graph_names: Vec<String>,
    /// Union of all scheduled edges; fixes the per-edge CSV columns.
    pub catalog_edges: Vec<Edge>,
    pub samples: Vec<Sample>,
    pub events: Vec<Event>,
    pub certificate: Certificate,
}

impl Trajectory {
    pub fn guard_events(&self) -> impl Iterator<Item = &GuardEvent> {
        self.events.iter().filter_map(|e| match e {
            Event::Guard(g) => Some(g),
            Event::Activation { .. } => None,
        })
    }

    pub fn switch_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter_map(|e| match e {
                Event::Activation { t, .. } => Some(*t),
                Event::Guard(_) => None,
            })
            .collect()
    }
}

/// A run that stopped early, with everything recorded up to the halt.
#[derive(Debug, Clone, PartialEq)]
pub struct Halt {
    pub error: SimError,
    pub trajectory: Trajectory,
}

impl fmt::Display for Halt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "simulation halted after {} samples: {}",
            self.trajectory.samples.len(),
            self.error
        )
    }
}

impl std::error::Error for Halt {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Step-indexed walk over the schedule's segments.
struct SegmentCursor {
    steps: Vec<usize>,
    cyclic: bool,
    segment: usize,
    remaining: usize,
}

impl SegmentCursor {
    fn new(schedule: &SwitchingSchedule, dt: f64) -> Self {
        let steps: Vec<usize> = schedule
            .segments()
            .iter()
            .map(|s| grid_steps(s.duration, dt).expect("validated"))
            .collect();
        let remaining = steps[0];
        SegmentCursor {
            steps,
            cyclic: schedule.is_cyclic(),
            segment: 0,
            remaining,
        }
    }

    /// Moves past an exhausted segment. Returns whether a new segment began.
    fn roll(&mut self) -> bool {
        if self.remaining > 0 {
            return false;
        }
        let next = self.segment + 1;
        if next < self.steps.len() {
            self.segment = next;
        } else if self.cyclic {
            self.segment = 0;
        } else {
            // past the horizon of an acyclic schedule: keep the last graph
            return false;
        }
        self.remaining = self.steps[self.segment];
        true
    }
}

fn sample(
    ctx: &GraphContext,
    graph: usize,
    state: &SystemState,
    scenario: &Scenario,
) -> Result<Sample, SimError> {
    let out = control_detailed(
        &ctx.incidence,
        &state.x,
        &state.v,
        &ctx.funnels_y,
        &ctx.funnels_z,
        state.t,
        scenario.gains.phi,
    )?;
    let y = ctx.incidence.edge_differences(&state.x);
    let z = ctx.incidence.edge_differences(&state.v);
    let t = state.t;
    let edges = (0..y.len())
        .map(|l| EdgeSample {
            edge: ctx.incidence.edge_order()[l],
            y: y[l],
            z: z[l],
            rho_y: ctx.funnels_y[l].funnel.rho(t).expect("t >= 0"),
            rho_z: ctx.funnels_z[l].funnel.rho(t).expect("t >= 0"),
        })
        .collect();
    let lyapunov = analysis::lyapunov_value(
        &scenario.gains,
        &state.x,
        &state.v,
        &out.position.eps,
        &out.velocity.eps,
    );
    Ok(Sample {
        t,
        x: state.x.clone(),
        v: state.v.clone(),
        graph,
        edges,
        rho_y: scenario.funnels.position.rho(t).expect("t >= 0"),
        rho_z: scenario.funnels.velocity.rho(t).expect("t >= 0"),
        u: out.u,
        lyapunov,
    })
}

/// Integrates the scenario from `t = 0` to `t_end`.
///
/// Gain infeasibility or a schedule that is not jointly connected does not
/// stop the run; both verdicts are recorded in the trajectory's certificate.
pub fn simulate(scenario: &Scenario) -> Result<Trajectory, Box<Halt>> {
    let schedule = &scenario.schedule;
    let contexts: Vec<GraphContext> = schedule
        .graphs()
        .iter()
        .map(|(_, g)| GraphContext::new(g, &scenario.funnels))
        .collect();
    let mut traj = Trajectory {
        n_agents: scenario.n_agents(),
        graph_names: schedule.graphs().iter().map(|(n, _)| n.clone()).collect(),
        catalog_edges: schedule.catalog_edges(),
        samples: Vec::new(),
        events: Vec::new(),
        certificate: Certificate {
            gains: scenario.feasibility(),
            jointly_connected: is_jointly_connected(schedule),
        },
    };
    let halt = |traj: Trajectory, error: SimError| Box::new(Halt { error, trajectory: traj });

    let dt = scenario.grid.dt;
    let n_steps = scenario.n_steps();
    let stride = scenario.monitor.sample_stride;
    let mut cursor = SegmentCursor::new(schedule, dt);
    let mut state = scenario.initial.clone();

    for k in 0..=n_steps {
        state.t = k as f64 * dt;
        let activated = k == 0 || cursor.roll();
        let graph = schedule.segments()[cursor.segment].graph;
        let ctx = &contexts[graph];

        if activated {
            traj.events.push(Event::Activation { t: state.t, graph });
            if let Err((edge, channel, value, bound)) = check_edges(ctx, &state) {
                let error = SimError::InfeasibleActivation {
                    t: state.t,
                    edge,
                    channel,
                    value,
                    bound,
                };
                return Err(halt(traj, error));
            }
        }
        if k % stride == 0 || k == n_steps {
            match sample(ctx, graph, &state, scenario) {
                Ok(s) => traj.samples.push(s),
                Err(e) => return Err(halt(traj, e)),
            }
        }
        if k == n_steps {
            break;
        }

        let step = match rk4(ctx, &state, dt, scenario) {
            Ok(step) => step,
            Err(e) => return Err(halt(traj, e)),
        };
        traj.events.extend(step.guard_events.into_iter().map(Event::Guard));
        state = step.state;
        state.t = (k + 1) as f64 * dt;
        cursor.remaining -= 1;
        if let Err((edge, channel, value, bound)) = check_edges(ctx, &state) {
            let error = SimError::FunnelViolation {
                t: state.t,
                edge,
                channel,
                value,
                bound,
            };
            return Err(halt(traj, error));
        }
    }
    Ok(traj)
}

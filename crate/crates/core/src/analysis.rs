//! Post-run certificates and diagnostics over a recorded [`Trajectory`].

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::controller::{control_detailed, Channel, GainSet};
use crate::simulator::{GraphContext, Scenario, SimError, SystemState, Trajectory};
use crate::topology::{Edge, Graph};

/// Worst-case funnel clearance for one channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCompliance {
    /// Minimum of `rho(t) - |s(t)|` over samples and active edges;
    /// `+inf` when no edge was ever active.
    pub min_margin: f64,
    pub t_at_min: f64,
    pub edge_at_min: Option<Edge>,
    pub violated: bool,
}

impl ChannelCompliance {
    fn new() -> Self {
        ChannelCompliance {
            min_margin: f64::INFINITY,
            t_at_min: f64::NAN,
            edge_at_min: None,
            violated: false,
        }
    }

    fn observe(&mut self, t: f64, edge: Edge, margin: f64) {
        // ties keep the earlier (t, edge) so the report ignores record order
        let better = margin < self.min_margin
            || (margin == self.min_margin
                && (t, Some(edge)) < (self.t_at_min, self.edge_at_min));
        if better {
            self.min_margin = margin;
            self.t_at_min = t;
            self.edge_at_min = Some(edge);
        }
        self.violated = self.min_margin <= 0.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplianceReport {
    pub position: ChannelCompliance,
    pub velocity: ChannelCompliance,
}

impl ComplianceReport {
    pub fn violated(&self) -> bool {
        self.position.violated || self.velocity.violated
    }

    pub fn channel(&self, channel: Channel) -> &ChannelCompliance {
        match channel {
            Channel::Position => &self.position,
            Channel::Velocity => &self.velocity,
        }
    }
}

/// Funnel margins at every recorded sample, using the scenario's funnel for
/// each active edge.
pub fn compliance(traj: &Trajectory, scenario: &Scenario) -> ComplianceReport {
    let funnels = scenario.funnels();
    let mut report = ComplianceReport {
        position: ChannelCompliance::new(),
        velocity: ChannelCompliance::new(),
    };
    for s in &traj.samples {
        for e in &s.edges {
            let rho_y = funnels.funnel(Channel::Position, e.edge).rho(s.t).unwrap_or(f64::NAN);
            let rho_z = funnels.funnel(Channel::Velocity, e.edge).rho(s.t).unwrap_or(f64::NAN);
            report.position.observe(s.t, e.edge, rho_y - e.y.abs());
            report.velocity.observe(s.t, e.edge, rho_z - e.z.abs());
        }
    }
    report
}

/// Potential `½ ξᵀQξ + (h5/2)|eps_y|² + (h6/2)|eps_z|²` with `ξ = [x; v]`.
pub fn lyapunov(state: &SystemState, graph: &Graph, scenario: &Scenario) -> Result<f64, SimError> {
    let ctx = GraphContext::new(graph, scenario.funnels());
    let out = control_detailed(
        &ctx.incidence,
        &state.x,
        &state.v,
        &ctx.funnels_y,
        &ctx.funnels_z,
        state.t,
        scenario.gains().phi,
    )?;
    Ok(lyapunov_value(
        scenario.gains(),
        &state.x,
        &state.v,
        &out.position.eps,
        &out.velocity.eps,
    ))
}

pub(crate) fn lyapunov_value(g: &GainSet, x: &[f64], v: &[f64], eps_y: &[f64], eps_z: &[f64]) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let quad = g.h1 * dot(x, x) + (g.h3 - g.h2) * dot(x, v) + g.h4 * dot(v, v);
    0.5 * quad + 0.5 * g.h5 * dot(eps_y, eps_y) + 0.5 * g.h6 * dot(eps_z, eps_z)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusMetrics {
    /// Largest `|x_i - x_j|` over all scheduled edges at the final sample.
    pub terminal_max_y: f64,
    pub terminal_max_z: f64,
    pub threshold: f64,
    /// Earliest sample time after which the largest scheduled-edge `|y|`
    /// stays strictly below `threshold`; `None` if it never settles.
    pub settle_time: Option<f64>,
    /// `max_t |mean(v(t)) - mean(v(0))|`
    pub mean_velocity_drift: f64,
    /// `max_t |mean(x(t)) - mean(x(0)) - mean(v(0)) t|`
    pub mean_position_drift: f64,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn max_edge_gap(values: &[f64], edges: &[Edge]) -> f64 {
    edges
        .iter()
        .map(|e| (values[e.head() - 1] - values[e.tail() - 1]).abs())
        .fold(0.0, f64::max)
}

/// Convergence measures over the union of scheduled edges, so inactive edges
/// count too. Returns `None` for an empty trajectory.
pub fn consensus_metrics(traj: &Trajectory, threshold: f64) -> Option<ConsensusMetrics> {
    let first = traj.samples.first()?;
    let last = traj.samples.last()?;
    let edges = &traj.catalog_edges;
    let (x0, v0) = (mean(&first.x), mean(&first.v));

    let mut settle_time = None;
    for s in traj.samples.iter().rev() {
        if max_edge_gap(&s.x, edges) < threshold {
            settle_time = Some(s.t);
        } else {
            break;
        }
    }
    let mut mean_velocity_drift = 0.0f64;
    let mut mean_position_drift = 0.0f64;
    for s in &traj.samples {
        mean_velocity_drift = mean_velocity_drift.max((mean(&s.v) - v0).abs());
        mean_position_drift = mean_position_drift.max((mean(&s.x) - x0 - v0 * (s.t - first.t)).abs());
    }
    Some(ConsensusMetrics {
        terminal_max_y: max_edge_gap(&last.x, edges),
        terminal_max_z: max_edge_gap(&last.v, edges),
        threshold,
        settle_time,
        mean_velocity_drift,
        mean_position_drift,
    })
}

fn edge_label(e: &Edge) -> String {
    format!("{}-{}", e.head(), e.tail())
}

/// CSV header: `t, x_1..x_N, v_1..v_N, graph_id, y_i-j, z_i-j (per catalog
/// edge), rho_y, rho_z, V`.
pub fn csv_header(traj: &Trajectory) -> Vec<String> {
    let n = traj.n_agents;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x_{i}")));
    header.extend((1..=n).map(|i| format!("v_{i}")));
    header.push("graph_id".into());
    for e in &traj.catalog_edges {
        header.push(format!("y_{}", edge_label(e)));
        header.push(format!("z_{}", edge_label(e)));
    }
    header.extend(["rho_y", "rho_z", "V"].map(String::from));
    header
}

// Display for f64 is the shortest string that parses back to the same value.
fn num(v: f64) -> String {
    format!("{v}")
}

/// Writes the trajectory as CSV and returns the number of data rows. Edges not
/// active at a sample are left blank.
pub fn write_csv<W: Write>(traj: &Trajectory, writer: W) -> io::Result<usize> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(csv_header(traj))?;
    for s in &traj.samples {
        let mut row: Vec<String> = Vec::with_capacity(3 + 2 * traj.n_agents + 2 * traj.catalog_edges.len());
        row.push(num(s.t));
        row.extend(s.x.iter().map(|&c| num(c)));
        row.extend(s.v.iter().map(|&c| num(c)));
        row.push(traj.graph_names[s.graph].clone());
        for e in &traj.catalog_edges {
            match s.edges.iter().find(|es| es.edge == *e) {
                Some(es) => {
                    row.push(num(es.y));
                    row.push(num(es.z));
                }
                None => {
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        row.push(num(s.rho_y));
        row.push(num(s.rho_z));
        row.push(num(s.lyapunov));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(traj.samples.len())
}

pub fn export_csv(traj: &Trajectory, destination: &Path) -> io::Result<usize> {
    let file = BufWriter::new(File::create(destination)?);
    write_csv(traj, file)
}

/// Funnel envelopes on the sample grid: `t, rho_y, rho_z` plus one column pair
/// per overridden edge.
pub fn write_funnel_bounds<W: Write>(traj: &Trajectory, scenario: &Scenario, writer: W) -> io::Result<usize> {
    let funnels = scenario.funnels();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec!["t".to_string(), "rho_y".into(), "rho_z".into()];
    for o in &funnels.overrides {
        header.push(format!("rho_y_{}", edge_label(&o.edge)));
        header.push(format!("rho_z_{}", edge_label(&o.edge)));
    }
    w.write_record(&header)?;
    for s in &traj.samples {
        let mut row = vec![num(s.t), num(s.rho_y), num(s.rho_z)];
        for o in &funnels.overrides {
            for channel in [Channel::Position, Channel::Velocity] {
                row.push(num(funnels.funnel(channel, o.edge).rho(s.t).unwrap_or(f64::NAN)));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(traj.samples.len())
}

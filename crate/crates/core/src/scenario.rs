//! Strict TOML scenario files.
//!
//! ```toml
//! [agents]
//! count = 2
//! x0 = [1.0, 0.0]
//! v0 = [0.0, 0.0]
//!
//! [funnels.position]
//! rho0 = 5.0
//! rho_inf = 0.1
//! decay = 1.5
//!
//! [funnels.velocity]
//! rho0 = 5.0
//! rho_inf = 0.1
//! decay = 0.8
//!
//! [gains]
//! h1 = 10.0
//! h2 = 1.0
//! h3 = 6.0
//! h4 = 1.5
//! h5 = 1.6
//! h6 = 1.5
//! phi = 1.0
//! a2 = 0.1
//! a3 = 0.5
//! a4 = 0.1
//!
//! [schedule]
//! cyclic = true
//! segments = [{ graph = "link", duration = 0.1 }]
//!
//! [schedule.graphs]
//! link = [[1, 2]]
//!
//! [integration]
//! t_end = 1.0
//! dt = 0.001
//! sample_stride = 10
//! ```
//!
//! Unknown keys are rejected everywhere. Optional keys: `schedule.dwell_min`
//! (defaults to the shortest segment), `schedule.window_max` (defaults to the
//! cycle length), `integration.dt` (1e-3), `integration.sample_stride` (10),
//! `integration.guard` (1e-9), `[[funnels.overrides]]` entries with `edge`
//! and optional `position`/`velocity` funnel tables, and `[output] csv`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::controller::GainSet;
use crate::performance::PerformanceFunction;
use crate::simulator::{
    FunnelOverride, FunnelSpec, IntegrationGrid, MonitorSettings, Scenario, SystemState, DEFAULT_DT,
};
use crate::topology::{Edge, Graph, Segment, SwitchingSchedule};

/// The bundled five-agent reference scenario.
pub const REFERENCE_SCENARIO: &str = include_str!("../scenarios/paper.toml");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("{0}")]
    Invalid(Invalid),
}

/// An invariant breach, located by table and (when found) line.
#[derive(Debug, Clone, PartialEq)]
pub struct Invalid {
    pub table: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "[{}] (line {}): {}", self.table, line, self.message),
            None => write!(f, "[{}]: {}", self.table, self.message),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    agents: Agents,
    funnels: Funnels,
    gains: GainSet,
    schedule: Schedule,
    integration: Integration,
    output: Option<Output>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Agents {
    count: usize,
    x0: Vec<f64>,
    v0: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
struct Funnel {
    rho0: f64,
    rho_inf: f64,
    decay: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Funnels {
    position: Funnel,
    velocity: Funnel,
    #[serde(default)]
    overrides: Vec<Override>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Override {
    edge: [usize; 2],
    position: Option<Funnel>,
    velocity: Option<Funnel>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Schedule {
    cyclic: bool,
    dwell_min: Option<f64>,
    window_max: Option<f64>,
    graphs: BTreeMap<String, Vec<[usize; 2]>>,
    segments: Vec<SegmentEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentEntry {
    graph: String,
    duration: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Integration {
    t_end: f64,
    dt: Option<f64>,
    sample_stride: Option<usize>,
    guard: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Output {
    csv: Option<PathBuf>,
}

/// A parsed file: the scenario plus file-level output settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioFile {
    pub scenario: Scenario,
    pub csv: Option<PathBuf>,
}

/// 1-based line of `[table]`, falling back to the parent table's header.
fn locate(src: &str, table: &str) -> Option<usize> {
    let mut name = table;
    loop {
        let header = format!("[{name}]");
        let array_header = format!("[[{name}]]");
        if let Some(i) = src
            .lines()
            .position(|l| matches!(l.trim(), h if h == header || h == array_header))
        {
            return Some(i + 1);
        }
        name = &name[..name.rfind('.')?];
    }
}

struct Ctx<'a> {
    src: &'a str,
}

impl Ctx<'_> {
    fn invalid(&self, table: &str, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Invalid(Invalid {
            table: table.to_string(),
            line: locate(self.src, table),
            message: message.into(),
        })
    }

    fn funnel(&self, table: &str, f: Funnel) -> Result<PerformanceFunction, ScenarioError> {
        PerformanceFunction::new(f.rho0, f.rho_inf, f.decay).map_err(|e| self.invalid(table, e.to_string()))
    }
}

/// Parses and validates scenario text. Start-time funnel feasibility is left
/// to the simulator, which halts with a diagnostic naming the edge.
pub fn parse_scenario_str(src: &str) -> Result<ScenarioFile, ScenarioError> {
    let doc: Document = toml::from_str(src).map_err(|e| ScenarioError::Syntax(e.to_string()))?;
    let cx = Ctx { src };

    let n = doc.agents.count;
    if n == 0 {
        return Err(cx.invalid("agents", "count must be at least 1"));
    }
    for (key, list) in [("x0", &doc.agents.x0), ("v0", &doc.agents.v0)] {
        if list.len() != n {
            return Err(cx.invalid("agents", format!("{key} has {} entries, expected {n}", list.len())));
        }
        if list.iter().any(|c| !c.is_finite()) {
            return Err(cx.invalid("agents", format!("{key} has non-finite entries")));
        }
    }

    let position = cx.funnel("funnels.position", doc.funnels.position)?;
    let velocity = cx.funnel("funnels.velocity", doc.funnels.velocity)?;
    let mut overrides = Vec::new();
    for o in &doc.funnels.overrides {
        let [a, b] = o.edge;
        let edge = Edge::new(a, b);
        if a == b || a == 0 || edge.tail() > n {
            return Err(cx.invalid("funnels.overrides", format!("invalid edge [{a}, {b}]")));
        }
        if overrides.iter().any(|p: &FunnelOverride| p.edge == edge) {
            return Err(cx.invalid("funnels.overrides", format!("edge {edge} overridden twice")));
        }
        let position = o.position.map(|f| cx.funnel("funnels.overrides", f)).transpose()?;
        let velocity = o.velocity.map(|f| cx.funnel("funnels.overrides", f)).transpose()?;
        overrides.push(FunnelOverride {
            edge,
            position,
            velocity,
        });
    }

    doc.gains.check().map_err(|e| cx.invalid("gains", e.to_string()))?;

    let sched = &doc.schedule;
    let mut catalog = Vec::new();
    let mut ids = BTreeMap::new();
    for (name, pairs) in &sched.graphs {
        let pairs: Vec<(usize, usize)> = pairs.iter().map(|&[a, b]| (a, b)).collect();
        let graph = Graph::new(n, &pairs).map_err(|e| cx.invalid("schedule.graphs", format!("graph {name}: {e}")))?;
        ids.insert(name.as_str(), catalog.len());
        catalog.push((name.clone(), graph));
    }
    if sched.segments.is_empty() {
        return Err(cx.invalid("schedule", "segments must not be empty"));
    }
    let mut segments = Vec::with_capacity(sched.segments.len());
    for (i, s) in sched.segments.iter().enumerate() {
        let graph = *ids
            .get(s.graph.as_str())
            .ok_or_else(|| cx.invalid("schedule", format!("segment {i} names unknown graph {:?}", s.graph)))?;
        segments.push(Segment {
            graph,
            duration: s.duration,
        });
    }
    let shortest = segments.iter().map(|s| s.duration).fold(f64::INFINITY, f64::min);
    let total: f64 = segments.iter().map(|s| s.duration).sum();
    let schedule = SwitchingSchedule::new(
        catalog,
        segments,
        sched.cyclic,
        sched.dwell_min.unwrap_or(shortest),
        sched.window_max.unwrap_or(total),
    )
    .map_err(|e| cx.invalid("schedule", e.to_string()))?;

    let integ = &doc.integration;
    let grid = IntegrationGrid {
        t_end: integ.t_end,
        dt: integ.dt.unwrap_or(DEFAULT_DT),
    };
    let defaults = MonitorSettings::default();
    let monitor = MonitorSettings {
        sample_stride: integ.sample_stride.unwrap_or(defaults.sample_stride),
        guard: integ.guard.unwrap_or(defaults.guard),
    };
    let scenario = Scenario::new(
        SystemState::new(0.0, doc.agents.x0.clone(), doc.agents.v0.clone()),
        schedule,
        FunnelSpec {
            position,
            velocity,
            overrides,
        },
        doc.gains,
        grid,
        monitor,
    )
    .map_err(|e| cx.invalid("integration", e.to_string()))?;

    Ok(ScenarioFile {
        scenario,
        csv: doc.output.and_then(|o| o.csv),
    })
}

pub fn parse_scenario_file(path: &Path) -> Result<ScenarioFile, ScenarioError> {
    let src = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario_str(&src)
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    parse_scenario_file(path).map(|f| f.scenario)
}

/// The bundled reference scenario, parsed.
pub fn reference_scenario() -> Scenario {
    parse_scenario_str(REFERENCE_SCENARIO)
        .expect("bundled scenario is valid")
        .scenario
}

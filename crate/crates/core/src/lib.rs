//! Prescribed-performance consensus for double-integrator multi-agent systems
//! over jointly connected switching topologies.
//!
//! Every edge's relative position and relative velocity is kept strictly
//! inside an exponentially shrinking funnel by feeding the log-transformed,
//! funnel-normalized errors back through the incidence matrix:
//!
//! ```text
//! u = -B J_y(ŷ) ε_y(ŷ) - φ B J_z(ẑ) ε_z(ẑ)
//! ```
//!
//! The crate covers the graph algebra ([`topology`]), funnels
//! ([`performance`]), the error transformation ([`transform`]), the control
//! law and its gain conditions ([`controller`]), closed-loop integration
//! ([`simulator`]), run certificates and CSV export ([`analysis`]), scenario
//! files ([`scenario`]), parallel batches ([`batch`]) and the command line
//! ([`cli`]).

pub mod analysis;
pub mod batch;
pub mod cli;
pub mod controller;
pub mod performance;
pub mod scenario;
pub mod simulator;
pub mod topology;
pub mod transform;

pub use analysis::{compliance, consensus_metrics, export_csv, lyapunov, ComplianceReport, ConsensusMetrics};
pub use controller::{control, validate_gains, Channel, FeasibilityReport, GainSet};
pub use performance::PerformanceFunction;
pub use scenario::{parse_scenario, reference_scenario};
pub use simulator::{simulate, Scenario, SystemState, Trajectory};
pub use topology::{build_incidence, Edge, Graph, SwitchingSchedule};

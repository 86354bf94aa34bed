//! Command-line front end.
//!
//! Exit status: `0` certified run (or feasible gains / connected topology),
//! `1` funnel violation, halt, or failed check, `2` invalid input.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::analysis::{self, ComplianceReport, ConsensusMetrics};
use crate::batch;
use crate::controller::{validate_gains, FeasibilityReport};
use crate::scenario::{parse_scenario_file, parse_scenario_str, ScenarioFile, REFERENCE_SCENARIO};
use crate::simulator::{Halt, Scenario, Trajectory};
use crate::topology::{is_connected, is_jointly_connected, union_graph};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_INVALID: u8 = 2;

/// Environment variable naming the default output directory of `reproduce-paper`.
pub const OUT_DIR_ENV: &str = "FUNNEL_CONSENSUS_OUT";

#[derive(Debug, Parser)]
#[command(name = "funnel-consensus", version, about = "Prescribed-performance consensus simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one or more scenario files and certify the runs.
    Simulate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Trajectory CSV destination (single scenario only).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Override the integration step.
        #[arg(long)]
        dt: Option<f64>,
        /// Bound alpha by the decay rates instead of the exact suprema.
        #[arg(long)]
        paper_alpha_bars: bool,
        /// Worker threads for independent scenarios.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Check the gain feasibility conditions.
    ValidateGains {
        file: PathBuf,
        /// Bound alpha by the decay rates instead of the exact suprema.
        #[arg(long)]
        paper_alpha_bars: bool,
    },
    /// Check that the switching topology is jointly connected.
    CheckTopology { file: PathBuf },
    /// Run the bundled five-agent scenario and write its CSVs.
    ReproducePaper {
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out: PathBuf,
    },
}

/// Everything the `simulate` summary reports, computed by the analysis module.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub feasibility: FeasibilityReport,
    pub jointly_connected: bool,
    pub compliance: ComplianceReport,
    pub metrics: Option<ConsensusMetrics>,
    pub guard_events: usize,
    pub halt: Option<String>,
}

impl RunReport {
    pub fn certified(&self) -> bool {
        self.halt.is_none()
            && !self.compliance.violated()
            && self.metrics.is_some_and(|m| m.settle_time.is_some())
    }
}

fn alpha_bars(scenario: &Scenario, loose: bool) -> (f64, f64) {
    if loose {
        scenario.funnels().alpha_bars_loose()
    } else {
        scenario.funnels().alpha_bars()
    }
}

pub fn feasibility(scenario: &Scenario, loose_alpha_bars: bool) -> FeasibilityReport {
    let (ay, az) = alpha_bars(scenario, loose_alpha_bars);
    validate_gains(scenario.gains(), ay, az).expect("gains validated at parse time")
}

/// Builds the report for a finished or halted run. Convergence is measured
/// against the asymptotic width of the position funnel.
pub fn evaluate(scenario: &Scenario, run: &Result<Trajectory, Box<Halt>>, loose_alpha_bars: bool) -> RunReport {
    let (traj, halt) = match run {
        Ok(t) => (t, None),
        Err(h) => (&h.trajectory, Some(h.error.to_string())),
    };
    RunReport {
        feasibility: feasibility(scenario, loose_alpha_bars),
        jointly_connected: traj.certificate.jointly_connected,
        compliance: analysis::compliance(traj, scenario),
        metrics: analysis::consensus_metrics(traj, scenario.funnels().position.rho_inf()),
        guard_events: traj.guard_events().count(),
        halt,
    }
}

/// Human-readable number: shortest round-trip digits, scientific when tiny or huge.
struct Num(f64);

impl std::fmt::Display for Num {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let a = self.0.abs();
        if a != 0.0 && a.is_finite() && !(1e-4..1e6).contains(&a) {
            write!(f, "{:e}", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

fn print_feasibility(out: &mut dyn Write, r: &FeasibilityReport) -> std::io::Result<()> {
    writeln!(
        out,
        "gains: c1 = {}, c2 = {}, c3 = {}, c4 = {} (alpha_bar_y = {}, alpha_bar_z = {}) -> {}",
        Num(r.c1),
        Num(r.c2),
        Num(r.c3),
        Num(r.c4),
        Num(r.alpha_bar_y),
        Num(r.alpha_bar_z),
        if r.feasible { "feasible" } else { "INFEASIBLE" }
    )
}

fn print_report(out: &mut dyn Write, report: &RunReport) -> std::io::Result<()> {
    print_feasibility(out, &report.feasibility)?;
    writeln!(
        out,
        "topology: {}",
        if report.jointly_connected {
            "jointly connected"
        } else {
            "NOT jointly connected"
        }
    )?;
    for (name, c) in [("position", &report.compliance.position), ("velocity", &report.compliance.velocity)] {
        match c.edge_at_min {
            Some(edge) => writeln!(
                out,
                "compliance {name}: min margin {} at t = {} on edge {}{}",
                Num(c.min_margin),
                Num(c.t_at_min),
                edge,
                if c.violated { " VIOLATED" } else { "" }
            )?,
            None => writeln!(out, "compliance {name}: no active edges sampled")?,
        }
    }
    writeln!(
        out,
        "verdict: {}",
        if report.compliance.violated() {
            "funnel violation"
        } else {
            "no violation"
        }
    )?;
    if let Some(m) = &report.metrics {
        writeln!(out, "terminal: max |y| = {}, max |z| = {}", Num(m.terminal_max_y), Num(m.terminal_max_z))?;
        match m.settle_time {
            Some(t) => writeln!(out, "settle: t = {} (threshold {})", Num(t), Num(m.threshold))?,
            None => writeln!(out, "settle: not settled (threshold {})", Num(m.threshold))?,
        }
        writeln!(
            out,
            "drift: mean velocity {}, mean position {}",
            Num(m.mean_velocity_drift),
            Num(m.mean_position_drift)
        )?;
    }
    writeln!(out, "guard events: {}", report.guard_events)?;
    if let Some(h) = &report.halt {
        writeln!(out, "halted: {h}")?;
    }
    writeln!(out, "status: {}", if report.certified() { "certified" } else { "FAILED" })
}

fn load(path: &Path, err: &mut dyn Write) -> Option<ScenarioFile> {
    match parse_scenario_file(path) {
        Ok(f) => Some(f),
        Err(e) => {
            let _ = writeln!(err, "error: {}: {e}", path.display());
            None
        }
    }
}

fn write_csvs(
    traj: &Trajectory,
    scenario: &Scenario,
    csv: &Path,
    bounds: Option<&Path>,
    out: &mut dyn Write,
) -> std::io::Result<()> {
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let rows = analysis::export_csv(traj, csv)?;
    writeln!(out, "csv: {} ({rows} rows)", csv.display())?;
    if let Some(path) = bounds {
        let file = std::io::BufWriter::new(fs::File::create(path)?);
        let rows = analysis::write_funnel_bounds(traj, scenario, file)?;
        writeln!(out, "funnel bounds: {} ({rows} rows)", path.display())?;
    }
    Ok(())
}

fn cmd_simulate(
    files: &[PathBuf],
    csv: Option<PathBuf>,
    dt: Option<f64>,
    loose_alpha_bars: bool,
    jobs: usize,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> u8 {
    if csv.is_some() && files.len() > 1 {
        let _ = writeln!(err, "error: --csv requires a single scenario file");
        return EXIT_INVALID;
    }
    let mut parsed = Vec::with_capacity(files.len());
    for path in files {
        let Some(mut file) = load(path, err) else {
            return EXIT_INVALID;
        };
        if let Some(dt) = dt {
            match file.scenario.with_dt(dt) {
                Ok(s) => file.scenario = s,
                Err(e) => {
                    let _ = writeln!(err, "error: {}: --dt {dt}: {e}", path.display());
                    return EXIT_INVALID;
                }
            }
        }
        if let Some(c) = &csv {
            file.csv = Some(c.clone());
        }
        parsed.push(file);
    }
    let scenarios: Vec<Scenario> = parsed.iter().map(|f| f.scenario.clone()).collect();
    let runs = batch::simulate_batch_with_jobs(&scenarios, jobs);

    let mut status = EXIT_OK;
    for ((path, file), run) in files.iter().zip(&parsed).zip(&runs) {
        let _ = writeln!(out, "scenario: {}", path.display());
        let report = evaluate(&file.scenario, run, loose_alpha_bars);
        let traj = match run {
            Ok(t) => t,
            Err(h) => &h.trajectory,
        };
        if let Some(csv) = &file.csv {
            let dest = if csv.is_relative() && files.len() > 1 {
                path.parent().unwrap_or(Path::new(".")).join(csv)
            } else {
                csv.clone()
            };
            if let Err(e) = write_csvs(traj, &file.scenario, &dest, None, out) {
                let _ = writeln!(err, "error: writing {}: {e}", dest.display());
                status = status.max(EXIT_FAILED);
            }
        }
        let _ = print_report(out, &report);
        if let Some(h) = &report.halt {
            let _ = writeln!(err, "error: {}: {h}", path.display());
        }
        if !report.certified() {
            status = status.max(EXIT_FAILED);
        }
    }
    status
}

fn cmd_validate_gains(file: &Path, loose_alpha_bars: bool, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let Some(f) = load(file, err) else {
        return EXIT_INVALID;
    };
    let report = feasibility(&f.scenario, loose_alpha_bars);
    let _ = print_feasibility(out, &report);
    if report.feasible {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

fn cmd_check_topology(file: &Path, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let Some(f) = load(file, err) else {
        return EXIT_INVALID;
    };
    let schedule = f.scenario.schedule();
    for (name, g) in schedule.graphs() {
        let _ = writeln!(
            out,
            "graph {name}: {} edges, {}",
            g.n_edges(),
            if is_connected(g) { "connected" } else { "disconnected" }
        );
    }
    let used = schedule.segments().iter().map(|s| schedule.graph(s.graph));
    if let Ok(u) = union_graph(used) {
        let _ = writeln!(
            out,
            "union: {} edges, {}",
            u.n_edges(),
            if is_connected(&u) { "connected" } else { "disconnected" }
        );
    }
    let joint = is_jointly_connected(schedule);
    let _ = writeln!(
        out,
        "jointly connected (window {} s): {}",
        schedule.window_max(),
        if joint { "yes" } else { "NO" }
    );
    if joint {
        EXIT_OK
    } else {
        EXIT_FAILED
    }
}

fn cmd_reproduce_paper(dir: &Path, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    let scenario = parse_scenario_str(REFERENCE_SCENARIO)
        .expect("bundled scenario is valid")
        .scenario;
    if let Err(e) = fs::create_dir_all(dir) {
        let _ = writeln!(err, "error: creating {}: {e}", dir.display());
        return EXIT_FAILED;
    }
    let run = crate::simulator::simulate(&scenario);
    let traj = match &run {
        Ok(t) => t,
        Err(h) => &h.trajectory,
    };
    let _ = print_feasibility(
        out,
        &feasibility(&scenario, true),
    );
    let report = evaluate(&scenario, &run, false);
    let csv = dir.join("trajectory.csv");
    let bounds = dir.join("funnel_bounds.csv");
    let mut status = EXIT_OK;
    if let Err(e) = write_csvs(traj, &scenario, &csv, Some(&bounds), out) {
        let _ = writeln!(err, "error: writing CSV: {e}");
        status = EXIT_FAILED;
    }
    let _ = print_report(out, &report);
    if let Some(h) = &report.halt {
        let _ = writeln!(err, "error: {h}");
    }
    if !report.certified() {
        status = EXIT_FAILED;
    }
    status
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Simulate {
            files,
            csv,
            dt,
            paper_alpha_bars,
            jobs,
        } => cmd_simulate(&files, csv, dt, paper_alpha_bars, jobs, out, err),
        Command::ValidateGains { file, paper_alpha_bars } => cmd_validate_gains(&file, paper_alpha_bars, out, err),
        Command::CheckTopology { file } => cmd_check_topology(&file, out, err),
        Command::ReproducePaper { out: dir } => cmd_reproduce_paper(&dir, out, err),
    }
}

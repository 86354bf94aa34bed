//! Undirected interaction graphs, their incidence and Laplacian matrices, and
//! piecewise-constant switching schedules.
//!
//! Nodes are 1-based throughout the public API so that edge lists read the same
//! way they are written in scenario files. Edges are stored with the lower
//! index first and oriented so the lower index is the head of the edge: for
//! edge `(i, j)` with `i < j` the incidence column is `+1` at `i` and `-1` at
//! `j`, giving the relative state `x_i - x_j`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("graph must have at least one node")]
    NoNodes,
    #[error("edge {edge} is a self-loop")]
    SelfLoop { edge: Edge },
    #[error("edge {edge} references a node outside 1..={n_nodes}")]
    NodeOutOfRange { edge: Edge, n_nodes: usize },
    #[error("edge {edge} appears more than once")]
    DuplicateEdge { edge: Edge },
    #[error("graphs disagree on node count ({expected} vs {found})")]
    NodeCountMismatch { expected: usize, found: usize },
    #[error("schedule has no segments")]
    EmptySchedule,
    #[error("segment {index} references unknown graph id {graph}")]
    UnknownGraph { index: usize, graph: usize },
    #[error("segment {index} lasts {duration} s, shorter than the dwell time {dwell_min} s")]
    DwellViolation {
        index: usize,
        duration: f64,
        dwell_min: f64,
    },
    #[error("dwell time must be positive and finite, got {0}")]
    InvalidDwell(f64),
    #[error("joint-connectivity window must be positive and finite, got {0}")]
    InvalidWindow(f64),
    #[error("cycle length {cycle} s exceeds the joint-connectivity window {window_max} s")]
    CycleExceedsWindow { cycle: f64, window_max: f64 },
    #[error("time {t} s lies outside the schedule horizon [0, {horizon})")]
    OutOfRange { t: f64, horizon: f64 },
}

/// An undirected edge between two 1-based nodes, stored as `(min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    head: usize,
    tail: usize,
}

impl Edge {
    /// Builds the edge with the lower index as head. Self-loops are rejected
    /// later by [`Graph::new`], so `Edge::new(3, 3)` is representable.
    pub fn new(a: usize, b: usize) -> Self {
        Edge {
            head: a.min(b),
            tail: a.max(b),
        }
    }

    /// Lower node index (`+1` entry of the incidence column).
    pub fn head(&self) -> usize {
        self.head
    }

    /// Higher node index (`-1` entry of the incidence column).
    pub fn tail(&self) -> usize {
        self.tail
    }

    pub fn touches(&self, node: usize) -> bool {
        self.head == node || self.tail == node
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.head, self.tail)
    }
}

/// Undirected graph with unit edge weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<Edge>,
}

impl Graph {
    /// Validates and normalizes an edge list. Pairs are accepted in either
    /// orientation; the stored list is sorted lexicographically.
    pub fn new(n_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self, TopologyError> {
        if n_nodes == 0 {
            return Err(TopologyError::NoNodes);
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in pairs {
            let edge = Edge::new(a, b);
            if a == b {
                return Err(TopologyError::SelfLoop { edge });
            }
            if edge.head < 1 || edge.tail > n_nodes {
                return Err(TopologyError::NodeOutOfRange { edge, n_nodes });
            }
            if !seen.insert(edge) {
                return Err(TopologyError::DuplicateEdge { edge });
            }
        }
        Ok(Graph {
            n_nodes,
            edges: seen.into_iter().collect(),
        })
    }

    pub fn empty(n_nodes: usize) -> Result<Self, TopologyError> {
        Graph::new(n_nodes, &[])
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Edges in lexicographic order; this is also the incidence column order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn contains(&self, edge: &Edge) -> bool {
        self.edges.binary_search(edge).is_ok()
    }
}

/// Node-by-edge incidence matrix with entries in `{-1, 0, +1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceMatrix {
    entries: DMatrix<i32>,
    edge_order: Vec<Edge>,
}

impl IncidenceMatrix {
    pub fn entries(&self) -> &DMatrix<i32> {
        &self.entries
    }

    /// Column index to node pair.
    pub fn edge_order(&self) -> &[Edge] {
        &self.edge_order
    }

    pub fn n_nodes(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_edges(&self) -> usize {
        self.edge_order.len()
    }

    /// `Bᵀ s` for a node vector: the per-edge differences `s_head - s_tail`.
    pub fn edge_differences(&self, node_values: &[f64]) -> Vec<f64> {
        assert_eq!(node_values.len(), self.n_nodes(), "node vector length");
        self.edge_order
            .iter()
            .map(|e| node_values[e.head - 1] - node_values[e.tail - 1])
            .collect()
    }

    /// `B w` for an edge vector.
    pub fn scatter(&self, edge_values: &[f64]) -> Vec<f64> {
        assert_eq!(edge_values.len(), self.n_edges(), "edge vector length");
        let mut out = vec![0.0; self.n_nodes()];
        for (e, &w) in self.edge_order.iter().zip(edge_values) {
            out[e.head - 1] += w;
            out[e.tail - 1] -= w;
        }
        out
    }
}

/// Incidence matrix of a validated graph. Columns follow [`Graph::edges`].
pub fn build_incidence(graph: &Graph) -> IncidenceMatrix {
    let mut entries = DMatrix::<i32>::zeros(graph.n_nodes, graph.n_edges());
    for (l, e) in graph.edges.iter().enumerate() {
        entries[(e.head - 1, l)] = 1;
        entries[(e.tail - 1, l)] = -1;
    }
    IncidenceMatrix {
        entries,
        edge_order: graph.edges.clone(),
    }
}

/// `BᵀB`, computed in integer arithmetic.
pub fn edge_laplacian(b: &IncidenceMatrix) -> DMatrix<i32> {
    b.entries.transpose() * &b.entries
}

/// Degree matrix minus adjacency matrix.
pub fn graph_laplacian(graph: &Graph) -> DMatrix<i32> {
    let n = graph.n_nodes;
    let mut lap = DMatrix::<i32>::zeros(n, n);
    for e in &graph.edges {
        let (i, j) = (e.head - 1, e.tail - 1);
        lap[(i, i)] += 1;
        lap[(j, j)] += 1;
        lap[(i, j)] -= 1;
        lap[(j, i)] -= 1;
    }
    lap
}

pub fn is_connected(graph: &Graph) -> bool {
    let n = graph.n_nodes;
    let mut adjacency = vec![Vec::new(); n];
    for e in &graph.edges {
        adjacency[e.head - 1].push(e.tail - 1);
        adjacency[e.tail - 1].push(e.head - 1);
    }
    let mut visited = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    let mut reached = 1;
    while let Some(node) = queue.pop_front() {
        for &next in &adjacency[node] {
            if !visited[next] {
                visited[next] = true;
                reached += 1;
                queue.push_back(next);
            }
        }
    }
    reached == n
}

pub fn union_graph<'a, I>(graphs: I) -> Result<Graph, TopologyError>
where
    I: IntoIterator<Item = &'a Graph>,
{
    let mut iter = graphs.into_iter();
    let first = iter.next().ok_or(TopologyError::NoNodes)?;
    let mut edges: BTreeSet<Edge> = first.edges.iter().copied().collect();
    for g in iter {
        if g.n_nodes != first.n_nodes {
            return Err(TopologyError::NodeCountMismatch {
                expected: first.n_nodes,
                found: g.n_nodes,
            });
        }
        edges.extend(g.edges.iter().copied());
    }
    Ok(Graph {
        n_nodes: first.n_nodes,
        edges: edges.into_iter().collect(),
    })
}

/// One constant-topology interval of a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    /// Index into the schedule's graph catalog.
    pub graph: usize,
    pub duration: f64,
}

/// Result of [`SwitchingSchedule::active_graph`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveGraph {
    pub graph: usize,
    /// Position of the segment within one pass over the segment list.
    pub segment: usize,
    /// Segment bounds in absolute time (cyclic wraps already applied).
    pub start: f64,
    pub end: f64,
}

/// Piecewise-constant switching signal over a catalog of named graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingSchedule {
    graphs: Vec<(String, Graph)>,
    segments: Vec<Segment>,
    cyclic: bool,
    dwell_min: f64,
    window_max: f64,
}

impl SwitchingSchedule {
    /// Validates the catalog and segment list.
    ///
    /// For cyclic schedules the full cycle must fit inside `window_max`, since
    /// the cycle is the interval over which joint connectivity is checked.
    pub fn new(
        graphs: Vec<(String, Graph)>,
        segments: Vec<Segment>,
        cyclic: bool,
        dwell_min: f64,
        window_max: f64,
    ) -> Result<Self, TopologyError> {
        if segments.is_empty() {
            return Err(TopologyError::EmptySchedule);
        }
        if !(dwell_min > 0.0 && dwell_min.is_finite()) {
            return Err(TopologyError::InvalidDwell(dwell_min));
        }
        if !(window_max > 0.0 && window_max.is_finite()) {
            return Err(TopologyError::InvalidWindow(window_max));
        }
        if let Some((_, first)) = graphs.first() {
            for (_, g) in &graphs[1..] {
                if g.n_nodes != first.n_nodes {
                    return Err(TopologyError::NodeCountMismatch {
                        expected: first.n_nodes,
                        found: g.n_nodes,
                    });
                }
            }
        }
        for (index, seg) in segments.iter().enumerate() {
            if seg.graph >= graphs.len() {
                return Err(TopologyError::UnknownGraph {
                    index,
                    graph: seg.graph,
                });
            }
            if !seg.duration.is_finite() || seg.duration < dwell_min {
                return Err(TopologyError::DwellViolation {
                    index,
                    duration: seg.duration,
                    dwell_min,
                });
            }
        }
        let cycle: f64 = segments.iter().map(|s| s.duration).sum();
        if cyclic && cycle > window_max * (1.0 + 1e-12) {
            return Err(TopologyError::CycleExceedsWindow { cycle, window_max });
        }
        Ok(SwitchingSchedule {
            graphs,
            segments,
            cyclic,
            dwell_min,
            window_max,
        })
    }

    pub fn graphs(&self) -> &[(String, Graph)] {
        &self.graphs
    }

    pub fn graph(&self, id: usize) -> &Graph {
        &self.graphs[id].1
    }

    pub fn graph_name(&self, id: usize) -> &str {
        &self.graphs[id].0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn is_cyclic(&self) -> bool {
        self.cyclic
    }

    pub fn dwell_min(&self) -> f64 {
        self.dwell_min
    }

    pub fn window_max(&self) -> f64 {
        self.window_max
    }

    pub fn n_nodes(&self) -> usize {
        self.graphs.first().map_or(0, |(_, g)| g.n_nodes)
    }

    /// Sum of segment durations: one cycle, or the whole horizon when acyclic.
    pub fn cycle_length(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    /// Union of every catalog graph that appears in some segment.
    pub fn catalog_edges(&self) -> Vec<Edge> {
        let used: BTreeSet<usize> = self.segments.iter().map(|s| s.graph).collect();
        let edges: BTreeSet<Edge> = used
            .into_iter()
            .flat_map(|id| self.graphs[id].1.edges.iter().copied())
            .collect();
        edges.into_iter().collect()
    }

    /// Evaluates the switching signal at `t`. Intervals are half-open, so at a
    /// switching instant the incoming graph is reported.
    pub fn active_graph(&self, t: f64) -> Result<ActiveGraph, TopologyError> {
        let length = self.cycle_length();
        if t.is_nan() || t < 0.0 {
            return Err(TopologyError::OutOfRange { t, horizon: length });
        }
        let snap = 1e-12 * t.abs().max(1.0);
        let (offset, local) = if self.cyclic {
            let mut cycles = (t / length).floor();
            let mut local = t - cycles * length;
            if length - local <= snap {
                cycles += 1.0;
                local = 0.0;
            }
            (cycles * length, local.max(0.0))
        } else {
            if t >= length - snap {
                return Err(TopologyError::OutOfRange { t, horizon: length });
            }
            (0.0, t)
        };
        let mut start = 0.0;
        for (index, seg) in self.segments.iter().enumerate() {
            let end = start + seg.duration;
            let last = index + 1 == self.segments.len();
            if local < end - snap || last {
                return Ok(ActiveGraph {
                    graph: seg.graph,
                    segment: index,
                    start: offset + start,
                    end: offset + end,
                });
            }
            start = end;
        }
        unreachable!("segment list is non-empty")
    }
}

/// Checks that the topology is jointly connected.
///
/// Cyclic schedules are checked over one full cycle. Acyclic schedules are
/// split greedily into consecutive windows, each closed as soon as its union is
/// connected; every window must be no longer than `window_max`. Trailing
/// segments that never connect on their own are merged into the previous
/// window, which must then still fit.
pub fn is_jointly_connected(schedule: &SwitchingSchedule) -> bool {
    let graph_of = |seg: &Segment| &schedule.graphs[seg.graph].1;
    if schedule.cyclic {
        return union_graph(schedule.segments.iter().map(graph_of))
            .map(|g| is_connected(&g))
            .unwrap_or(false);
    }
    let limit = schedule.window_max * (1.0 + 1e-12);
    let mut windows: Vec<f64> = Vec::new();
    let mut pending: Vec<&Graph> = Vec::new();
    let mut pending_len = 0.0;
    for seg in &schedule.segments {
        pending.push(graph_of(seg));
        pending_len += seg.duration;
        let connected = union_graph(pending.iter().copied())
            .map(|g| is_connected(&g))
            .unwrap_or(false);
        if connected {
            windows.push(pending_len);
            pending.clear();
            pending_len = 0.0;
        }
    }
    if !pending.is_empty() {
        match windows.last_mut() {
            Some(last) => *last += pending_len,
            None => return false,
        }
    }
    windows.iter().all(|&w| w <= limit)
}

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use serde::Serialize;

use super::{admittance::primitive_admittance, Bus, Line, PhaseSet};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TopologyIssue {
    DuplicateBus { id: u32 },
    EmptyPhases { id: u32 },
    BadVoltageBounds { id: u32, vmin: f64, vmax: f64 },
    DanglingEndpoint { line: usize, bus: u32 },
    SelfLoop { line: usize, bus: u32 },
    SlackCount { found: usize },
    Disconnected { unreachable: Vec<u32> },
    NotRadial { buses: usize, lines: usize },
    Cycle { line: usize },
    NoCommonPhase { line: usize },
    SingularImpedance { line: usize },
}

impl fmt::Display for TopologyIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyIssue::DuplicateBus { id } => write!(f, "duplicate bus id {id}"),
            TopologyIssue::EmptyPhases { id } => write!(f, "bus {id} has no phases"),
            TopologyIssue::BadVoltageBounds { id, vmin, vmax } => {
                write!(f, "bus {id} has invalid voltage bounds [{vmin}, {vmax}]")
            }
            TopologyIssue::DanglingEndpoint { line, bus } => write!(f, "line {line} references unknown bus {bus}"),
            TopologyIssue::SelfLoop { line, bus } => write!(f, "line {line} connects bus {bus} to itself"),
            TopologyIssue::SlackCount { found } => write!(f, "expected exactly one slack bus, found {found}"),
            TopologyIssue::Disconnected { unreachable } => {
                write!(f, "{} bus(es) unreachable from the slack: {:?}", unreachable.len(), unreachable)
            }
            TopologyIssue::NotRadial { buses, lines } => {
                write!(f, "radial network needs {} lines for {buses} buses, found {lines}", buses.saturating_sub(1))
            }
            TopologyIssue::Cycle { line } => write!(f, "line {line} closes a cycle"),
            TopologyIssue::NoCommonPhase { line } => write!(f, "line {line} endpoints share no phase"),
            TopologyIssue::SingularImpedance { line } => write!(f, "line {line} impedance is singular"),
        }
    }
}

/// Diagnostics from [`validate_topology`].
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TopologyReport {
    pub issues: Vec<TopologyIssue>,
    pub bus_phases: Vec<(u32, PhaseSet)>,
}

impl TopologyReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for TopologyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return f.write_str("ok");
        }
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

/// Checks connectivity, radiality, slack count and per-line phase/impedance
/// sanity. Every violation is reported; the function never panics.
pub fn validate_topology(buses: &[Bus], lines: &[Line]) -> TopologyReport {
    let mut issues = Vec::new();
    let mut index = HashMap::new();
    for (i, b) in buses.iter().enumerate() {
        if index.insert(b.id, i).is_some() {
            issues.push(TopologyIssue::DuplicateBus { id: b.id });
        }
        if b.phases.is_empty() {
            issues.push(TopologyIssue::EmptyPhases { id: b.id });
        }
        if !(b.vmin > 0.0 && b.vmin < b.vmax) {
            issues.push(TopologyIssue::BadVoltageBounds { id: b.id, vmin: b.vmin, vmax: b.vmax });
        }
    }
    let slack: Vec<usize> = buses.iter().enumerate().filter(|(_, b)| b.is_slack).map(|(i, _)| i).collect();
    if slack.len() != 1 {
        issues.push(TopologyIssue::SlackCount { found: slack.len() });
    }
    if !buses.is_empty() && lines.len() != buses.len() - 1 {
        issues.push(TopologyIssue::NotRadial { buses: buses.len(), lines: lines.len() });
    }

    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); buses.len()];
    let mut dsu: Vec<usize> = (0..buses.len()).collect();
    fn find(d: &mut [usize], mut x: usize) -> usize {
        while d[x] != x {
            d[x] = d[d[x]];
            x = d[x];
        }
        x
    }
    for (k, l) in lines.iter().enumerate() {
        let (a, b) = match (index.get(&l.from), index.get(&l.to)) {
            (Some(&a), Some(&b)) => (a, b),
            (fa, fb) => {
                if fa.is_none() {
                    issues.push(TopologyIssue::DanglingEndpoint { line: k, bus: l.from });
                }
                if fb.is_none() {
                    issues.push(TopologyIssue::DanglingEndpoint { line: k, bus: l.to });
                }
                continue;
            }
        };
        if a == b {
            issues.push(TopologyIssue::SelfLoop { line: k, bus: l.from });
            continue;
        }
        let (ra, rb) = (find(&mut dsu, a), find(&mut dsu, b));
        if ra == rb {
            issues.push(TopologyIssue::Cycle { line: k });
        } else {
            dsu[ra] = rb;
        }
        adj[a].push(b);
        adj[b].push(a);
        let common = buses[a].phases.intersection(buses[b].phases);
        if common.is_empty() {
            issues.push(TopologyIssue::NoCommonPhase { line: k });
        } else if primitive_admittance(&l.z, common).is_none() {
            issues.push(TopologyIssue::SingularImpedance { line: k });
        }
    }

    if let Some(&root) = slack.first() {
        let mut seen = vec![false; buses.len()];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        let unreachable: Vec<u32> = buses.iter().zip(&seen).filter(|(_, s)| !**s).map(|(b, _)| b.id).collect();
        if !unreachable.is_empty() {
            issues.push(TopologyIssue::Disconnected { unreachable });
        }
    } else if !buses.is_empty() {
        // no slack to root the traversal; still report split components
        let roots: HashSet<usize> = (0..buses.len()).map(|i| find(&mut dsu, i)).collect();
        if roots.len() > 1 {
            let r0 = find(&mut dsu, 0);
            let unreachable = (0..buses.len()).filter(|&i| find(&mut dsu, i) != r0).map(|i| buses[i].id).collect();
            issues.push(TopologyIssue::Disconnected { unreachable });
        }
    }

    TopologyReport { issues, bus_phases: buses.iter().map(|b| (b.id, b.phases)).collect() }
}

/// Rooted tree view of a validated network (indices into the bus list).
#[derive(Clone, Debug)]
pub struct Topology {
    pub root: usize,
    pub parent: Vec<Option<usize>>,
    /// Index of the line connecting a bus to its parent.
    pub parent_line: Vec<Option<usize>>,
    pub children: Vec<Vec<usize>>,
    /// Breadth-first order from the root.
    pub order: Vec<usize>,
    pub depth: Vec<usize>,
}

impl Topology {
    pub(super) fn build(buses: &[Bus], lines: &[Line], index: &HashMap<u32, usize>) -> Topology {
        let n = buses.len();
        let root = buses.iter().position(|b| b.is_slack).unwrap_or(0);
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (k, l) in lines.iter().enumerate() {
            let (a, b) = (index[&l.from], index[&l.to]);
            adj[a].push((b, k));
            adj[b].push((a, k));
        }
        let mut parent = vec![None; n];
        let mut parent_line = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut depth = vec![0; n];
        let mut order = Vec::with_capacity(n);
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &(v, k) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    parent[v] = Some(u);
                    parent_line[v] = Some(k);
                    depth[v] = depth[u] + 1;
                    children[u].push(v);
                    queue.push_back(v);
                }
            }
        }
        Topology { root, parent, parent_line, children, order, depth }
    }

    /// Buses in the subtree rooted at `bus`, including itself.
    pub fn subtree(&self, bus: usize) -> Vec<usize> {
        let mut out = vec![bus];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.children[out[i]]);
            i += 1;
        }
        out
    }

    /// Path of bus indices from the root down to `bus`.
    pub fn path_from_root(&self, bus: usize) -> Vec<usize> {
        let mut path = vec![bus];
        let mut cur = bus;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }
}

//! Three-phase radial LV network model.
//!
//! Buses always use a uniform three-slot phase layout: a single-phase
//! prosumer bus is a three-phase bus with one active slot, and matrix blocks
//! of absent phases stay zero. All electrical quantities are per-unit on the
//! network bases once a [`Network`] has been constructed.

mod admittance;
mod document;
pub mod surrogate;
mod topology;

use std::collections::HashMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use admittance::{build_admittance, primitive_admittance};
pub use document::{load_network, parse_network, BasesDoc, BusDoc, LineDoc, NetworkDocument, TransformerDoc};
pub use topology::{validate_topology, Topology, TopologyIssue, TopologyReport};

/// 3×3 complex matrix, row-major over phases A, B, C.
pub type Mat3 = [[Complex64; 3]; 3];

pub const ZERO3: Mat3 = [[Complex64 { re: 0.0, im: 0.0 }; 3]; 3];

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network document parse error: {0}")]
    Parse(String),
    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),
    #[error("line {line} references unknown bus {bus}")]
    DanglingEndpoint { line: usize, bus: u32 },
    #[error("invalid bus {id}: {reason}")]
    InvalidBus { id: u32, reason: String },
    #[error("invalid line {line}: {reason}")]
    InvalidLine { line: usize, reason: String },
    #[error("invalid transformer: {0}")]
    InvalidTransformer(String),
    #[error("singular impedance on line {line} ({from} -> {to})")]
    SingularImpedance { line: usize, from: u32, to: u32 },
    #[error("topology check failed: {0}")]
    Topology(TopologyReport),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Self::ALL.get(i).copied()
    }

    /// Nominal phasor angle in radians (A = 0, B = -120°, C = +120°).
    pub fn angle(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * std::f64::consts::PI / 3.0,
            Phase::C => 2.0 * std::f64::consts::PI / 3.0,
        }
    }

    /// Unit-magnitude nominal phasor.
    pub fn phasor(self) -> Complex64 {
        Complex64::from_polar(1.0, self.angle())
    }

    pub fn parse(s: &str) -> Option<Phase> {
        match s.trim() {
            "A" | "a" => Some(Phase::A),
            "B" | "b" => Some(Phase::B),
            "C" | "c" => Some(Phase::C),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::A => "A",
            Phase::B => "B",
            Phase::C => "C",
        };
        f.write_str(s)
    }
}

/// Subset of {A, B, C}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);
    pub const EMPTY: PhaseSet = PhaseSet(0);

    pub fn single(p: Phase) -> Self {
        PhaseSet(1 << p.index())
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn insert(&mut self, p: Phase) {
        self.0 |= 1 << p.index();
    }

    pub fn intersection(self, other: PhaseSet) -> PhaseSet {
        PhaseSet(self.0 & other.0)
    }

    pub fn is_subset(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    /// Parses strings like `"ABC"`, `"B"`, `"AC"`.
    pub fn parse(s: &str) -> Option<PhaseSet> {
        let mut set = PhaseSet::EMPTY;
        for ch in s.trim().chars() {
            let p = Phase::parse(&ch.to_string())?;
            set.insert(p);
        }
        Some(set)
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl Serialize for PhaseSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PhaseSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        PhaseSet::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("invalid phase set {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    pub id: u32,
    pub phases: PhaseSet,
    pub vmin: f64,
    pub vmax: f64,
    pub is_slack: bool,
}

impl Bus {
    pub fn new(id: u32, phases: PhaseSet) -> Self {
        Bus { id, phases, vmin: 0.9, vmax: 1.1, is_slack: false }
    }

    pub fn slack(id: u32) -> Self {
        Bus { is_slack: true, ..Bus::new(id, PhaseSet::ABC) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub from: u32,
    pub to: u32,
    /// Series impedance in per-unit.
    pub z: Mat3,
    /// Per-phase current limit in per-unit.
    pub ampacity: Option<f64>,
}

impl Line {
    /// Line with a scalar per-phase impedance and zero mutual coupling.
    pub fn uniform(from: u32, to: u32, z: Complex64) -> Self {
        let mut m = ZERO3;
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = z;
        }
        Line { from, to, z: m, ampacity: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    pub rating_kva: f64,
    pub v_primary: f64,
    pub v_secondary: f64,
    pub connection: String,
    /// Short-circuit voltage in percent on the transformer's own rating.
    /// Zero makes the slack bus an ideal source.
    pub short_circuit_pct: f64,
    pub x_over_r: f64,
}

impl Default for Transformer {
    fn default() -> Self {
        Transformer {
            rating_kva: 250.0,
            v_primary: 6600.0,
            v_secondary: 400.0,
            connection: "Dyn".to_string(),
            short_circuit_pct: 4.0,
            x_over_r: 3.0,
        }
    }
}

impl Transformer {
    /// Series impedance per phase in per-unit on the network base.
    pub fn series_impedance(&self, base_kva: f64) -> Option<Complex64> {
        if self.short_circuit_pct <= 0.0 {
            return None;
        }
        let zmag = self.short_circuit_pct / 100.0 * base_kva / self.rating_kva;
        let r = zmag / (1.0 + self.x_over_r * self.x_over_r).sqrt();
        Some(Complex64::new(r, r * self.x_over_r))
    }
}

/// A validated radial feeder.
#[derive(Clone, Debug)]
pub struct Network {
    buses: Vec<Bus>,
    lines: Vec<Line>,
    transformer: Transformer,
    base_kva: f64,
    base_v: f64,
    index: HashMap<u32, usize>,
    topology: Topology,
}

impl Network {
    /// Validates and builds a network. Impedances must already be per-unit.
    pub fn new(
        buses: Vec<Bus>,
        lines: Vec<Line>,
        transformer: Transformer,
        base_kva: f64,
        base_v: f64,
    ) -> Result<Network, NetworkError> {
        if !(base_kva > 0.0 && base_v > 0.0) {
            return Err(NetworkError::Parse(format!("bases must be positive (kva={base_kva}, v={base_v})")));
        }
        if !(transformer.rating_kva > 0.0) {
            return Err(NetworkError::InvalidTransformer(format!(
                "rating_kva must be > 0, got {}",
                transformer.rating_kva
            )));
        }
        if transformer.short_circuit_pct < 0.0 || transformer.x_over_r < 0.0 {
            return Err(NetworkError::InvalidTransformer("negative short-circuit data".into()));
        }
        let mut index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if index.insert(b.id, i).is_some() {
                return Err(NetworkError::DuplicateBus(b.id));
            }
            if b.phases.is_empty() {
                return Err(NetworkError::InvalidBus { id: b.id, reason: "no phases".into() });
            }
            if !(b.vmin > 0.0 && b.vmin < b.vmax) {
                return Err(NetworkError::InvalidBus {
                    id: b.id,
                    reason: format!("voltage bounds must satisfy 0 < vmin < vmax (got {} / {})", b.vmin, b.vmax),
                });
            }
        }
        for (k, l) in lines.iter().enumerate() {
            for end in [l.from, l.to] {
                if !index.contains_key(&end) {
                    return Err(NetworkError::DanglingEndpoint { line: k, bus: end });
                }
            }
        }
        let report = validate_topology(&buses, &lines);
        if !report.is_ok() {
            return Err(NetworkError::Topology(report));
        }
        for (k, l) in lines.iter().enumerate() {
            let phases = buses[index[&l.from]].phases.intersection(buses[index[&l.to]].phases);
            primitive_admittance(&l.z, phases).ok_or(NetworkError::SingularImpedance {
                line: k,
                from: l.from,
                to: l.to,
            })?;
            if let Some(a) = l.ampacity {
                if !(a > 0.0) {
                    return Err(NetworkError::InvalidLine {
                        line: k,
                        reason: format!("ampacity must be > 0, got {a}"),
                    });
                }
            }
        }
        let topology = Topology::build(&buses, &lines, &index);
        Ok(Network { buses, lines, transformer, base_kva, base_v, index, topology })
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn transformer(&self) -> &Transformer {
        &self.transformer
    }

    pub fn base_kva(&self) -> f64 {
        self.base_kva
    }

    pub fn base_v(&self) -> f64 {
        self.base_v
    }

    /// Per-phase power base in kW (a third of the three-phase base).
    pub fn phase_base_kw(&self) -> f64 {
        self.base_kva / 3.0
    }

    pub fn len(&self) -> usize {
        self.buses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buses.is_empty()
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn slack_index(&self) -> usize {
        self.topology.root
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Phases conducted by a line (present at both endpoints).
    pub fn line_phases(&self, line: usize) -> PhaseSet {
        let l = &self.lines[line];
        let a = self.buses[self.index[&l.from]].phases;
        let b = self.buses[self.index[&l.to]].phases;
        a.intersection(b)
    }

    /// Returns a copy with different voltage limits on every bus.
    pub fn with_voltage_limits(&self, vmin: f64, vmax: f64) -> Result<Network, NetworkError> {
        let buses = self.buses.iter().map(|b| Bus { vmin, vmax, ..b.clone() }).collect();
        Network::new(buses, self.lines.clone(), self.transformer.clone(), self.base_kva, self.base_v)
    }

    /// Returns a copy with a different transformer model.
    pub fn with_transformer(&self, transformer: Transformer) -> Result<Network, NetworkError> {
        Network::new(self.buses.clone(), self.lines.clone(), transformer, self.base_kva, self.base_v)
    }
}

#[cfg(test)]
mod tests {
    use super::surrogate::{feeder88, random_radial_network, RandomNetworkOptions};
    use super::*;

    const TWO_BUS: &str = r#"
        [[bus]]
        id = 1
        phases = "ABC"
        slack = true

        [[bus]]
        id = 2
        phases = "B"

        [[line]]
        from = 1
        to = 2
        r_ohm = 0.0064
        x_ohm = 0.0032
    "#;

    #[test]
    fn two_bus_document_loads_in_per_unit() {
        let net = parse_network(TWO_BUS).unwrap();
        assert_eq!(net.len(), 2);
        assert_eq!(net.lines().len(), 1);
        // Z_base = 400² / 250e3 = 0.64 ohm
        let z = net.lines()[0].z[1][1];
        assert!((z.re - 0.01).abs() < 1e-12 && (z.im - 0.005).abs() < 1e-12);
        assert_eq!(net.line_phases(0), PhaseSet::single(Phase::B));
    }

    #[test]
    fn cycle_is_rejected() {
        let doc = r#"
            [[bus]]
            id = 0
            phases = "ABC"
            slack = true
            [[bus]]
            id = 1
            phases = "ABC"
            [[bus]]
            id = 2
            phases = "ABC"
            [[line]]
            from = 0
            to = 1
            r_ohm = 0.01
            [[line]]
            from = 1
            to = 2
            r_ohm = 0.01
            [[line]]
            from = 2
            to = 0
            r_ohm = 0.01
        "#;
        match parse_network(doc) {
            Err(NetworkError::Topology(r)) => {
                assert!(r.issues.iter().any(|i| matches!(i, TopologyIssue::NotRadial { .. })));
                assert!(r.issues.iter().any(|i| matches!(i, TopologyIssue::Cycle { .. })));
            }
            other => panic!("expected topology error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_dangling_ids() {
        let dup = TWO_BUS.replace("id = 2", "id = 1");
        assert!(matches!(parse_network(&dup), Err(NetworkError::DuplicateBus(1))));
        let dangling = TWO_BUS.replace("to = 2", "to = 7");
        assert!(matches!(parse_network(&dangling), Err(NetworkError::DanglingEndpoint { bus: 7, .. })));
        assert!(matches!(parse_network("[[bus]]\nid = "), Err(NetworkError::Parse(_))));
    }

    fn star(n: u32) -> (Vec<Bus>, Vec<Line>) {
        let mut buses = vec![Bus::slack(0)];
        let mut lines = vec![];
        for i in 1..n {
            buses.push(Bus::new(i, PhaseSet::ABC));
            lines.push(Line::uniform(0, i, Complex64::new(0.01, 0.01)));
        }
        (buses, lines)
    }

    #[test]
    fn topology_diagnostics() {
        let (buses, lines) = star(4);
        let r = validate_topology(&buses, &lines);
        assert!(r.is_ok(), "{r}");
        assert_eq!(r.bus_phases.len(), 4);

        // two components: 0-1 and 2-3, plus a parallel line so the count is right
        let (buses, _) = star(4);
        let lines = vec![
            Line::uniform(0, 1, Complex64::new(0.01, 0.0)),
            Line::uniform(2, 3, Complex64::new(0.01, 0.0)),
            Line::uniform(3, 2, Complex64::new(0.01, 0.0)),
        ];
        let r = validate_topology(&buses, &lines);
        assert!(r
            .issues
            .iter()
            .any(|i| matches!(i, TopologyIssue::Disconnected { unreachable } if unreachable == &vec![2, 3])));

        let (mut buses, lines) = star(4);
        buses[2].is_slack = true;
        let r = validate_topology(&buses, &lines);
        assert_eq!(r.issues, vec![TopologyIssue::SlackCount { found: 2 }]);

        // garbage input never panics
        let r = validate_topology(&[], &[Line::uniform(5, 5, Complex64::new(0.0, 0.0))]);
        assert!(!r.is_ok());
    }

    #[test]
    fn single_line_admittance() {
        let (buses, lines) = star(2);
        let net = Network::new(buses, lines, Transformer::default(), 250.0, 400.0).unwrap();
        let y = build_admittance(&net).unwrap();
        let yl = Complex64::new(1.0, 0.0) / Complex64::new(0.01, 0.01);
        for p in 0..3 {
            for q in 0..3 {
                let d = if p == q { yl } else { Complex64::new(0.0, 0.0) };
                assert!((y[(p, q)] - d).norm() < 1e-12);
                assert!((y[(3 + p, 3 + q)] - d).norm() < 1e-12);
                assert!((y[(p, 3 + q)] + d).norm() < 1e-12);
                assert!((y[(3 + p, q)] + d).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn single_bus_admittance_is_zero() {
        let net = Network::new(vec![Bus::slack(0)], vec![], Transformer::default(), 250.0, 400.0).unwrap();
        let y = build_admittance(&net).unwrap();
        assert_eq!(y.shape(), (3, 3));
        assert!(y.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn random_admittance_symmetric_with_zero_row_sums() {
        for seed in 0..20 {
            let net = random_radial_network(seed, 10, &RandomNetworkOptions::default());
            let y = build_admittance(&net).unwrap();
            let n = y.nrows();
            for r in 0..n {
                for c in 0..n {
                    assert!((y[(r, c)] - y[(c, r)]).norm() <= 1e-12);
                }
            }
            // summing same-phase columns over all buses cancels for each row
            for r in 0..n {
                for p in 0..3 {
                    let s: Complex64 = (0..net.len()).map(|b| y[(r, 3 * b + p)]).sum();
                    assert!(s.norm() <= 1e-10, "seed {seed} row {r} phase {p}: {s}");
                }
            }
            for (i, bus) in net.buses().iter().enumerate() {
                for p in Phase::ALL {
                    if !bus.phases.contains(p) {
                        assert!((0..n).all(|c| y[(3 * i + p.index(), c)].norm() == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn surrogate_feeder_shape_and_roundtrip() {
        let net = feeder88();
        assert_eq!(net.len(), 88);
        assert_eq!(net.lines().len(), 87);
        assert!(net.buses()[net.slack_index()].is_slack);
        let text = NetworkDocument::from_network(&net).to_toml();
        let back = parse_network(&text).unwrap();
        assert_eq!(back.len(), 88);
        for (a, b) in net.lines().iter().zip(back.lines()) {
            for r in 0..3 {
                for c in 0..3 {
                    assert!((a.z[r][c] - b.z[r][c]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn phase_set_parse_display() {
        let s = PhaseSet::parse("CA").unwrap();
        assert_eq!(s.to_string(), "AC");
        assert_eq!(s.len(), 2);
        assert!(PhaseSet::parse("AD").is_none());
    }

    #[test]
    fn transformer_impedance_split() {
        let t = Transformer::default();
        let z = t.series_impedance(250.0).unwrap();
        assert!((z.norm() - 0.04).abs() < 1e-12);
        assert!((z.im / z.re - 3.0).abs() < 1e-12);
        let ideal = Transformer { short_circuit_pct: 0.0, ..t };
        assert!(ideal.series_impedance(250.0).is_none());
    }
}

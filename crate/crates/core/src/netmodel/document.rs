//! TOML network description.
//!
//! ```toml
//! [bases]
//! kva = 250.0        # three-phase power base
//! v_ll = 400.0       # line-to-line voltage base
//!
//! [transformer]
//! rating_kva = 250.0
//! v_primary = 6600.0
//! v_secondary = 400.0
//! connection = "Dyn"
//! short_circuit_pct = 4.0
//! x_over_r = 3.0
//!
//! [[bus]]
//! id = 0
//! phases = "ABC"
//! slack = true
//! vmin = 0.9
//! vmax = 1.1
//!
//! [[line]]
//! from = 0
//! to = 1
//! r_ohm = 0.0064     # scalar per-phase impedance, zero mutuals
//! x_ohm = 0.0016
//! # or a full matrix: z_ohm = [[[r, x], [r, x], [r, x]], ...]
//! ampacity_a = 240.0
//! ```

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{Bus, Line, Network, NetworkError, PhaseSet, Transformer, ZERO3};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BasesDoc {
    #[serde(default = "default_kva")]
    pub kva: f64,
    #[serde(default = "default_v")]
    pub v_ll: f64,
}

fn default_kva() -> f64 {
    250.0
}
fn default_v() -> f64 {
    400.0
}
fn default_vmin() -> f64 {
    0.9
}
fn default_vmax() -> f64 {
    1.1
}

impl Default for BasesDoc {
    fn default() -> Self {
        BasesDoc { kva: default_kva(), v_ll: default_v() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransformerDoc {
    pub rating_kva: f64,
    #[serde(default = "default_v_primary")]
    pub v_primary: f64,
    #[serde(default = "default_v")]
    pub v_secondary: f64,
    #[serde(default = "default_connection")]
    pub connection: String,
    #[serde(default = "default_sc")]
    pub short_circuit_pct: f64,
    #[serde(default = "default_xr")]
    pub x_over_r: f64,
}

fn default_v_primary() -> f64 {
    6600.0
}
fn default_connection() -> String {
    "Dyn".into()
}
fn default_sc() -> f64 {
    4.0
}
fn default_xr() -> f64 {
    3.0
}

impl Default for TransformerDoc {
    fn default() -> Self {
        let t = Transformer::default();
        TransformerDoc {
            rating_kva: t.rating_kva,
            v_primary: t.v_primary,
            v_secondary: t.v_secondary,
            connection: t.connection,
            short_circuit_pct: t.short_circuit_pct,
            x_over_r: t.x_over_r,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BusDoc {
    pub id: u32,
    pub phases: String,
    #[serde(default)]
    pub slack: bool,
    #[serde(default = "default_vmin")]
    pub vmin: f64,
    #[serde(default = "default_vmax")]
    pub vmax: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LineDoc {
    pub from: u32,
    pub to: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_ohm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ohm: Option<f64>,
    /// Full 3×3 matrix of `[r, x]` pairs in ohms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_ohm: Option<Vec<Vec<[f64; 2]>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ampacity_a: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
pub struct NetworkDocument {
    #[serde(default)]
    pub bases: BasesDoc,
    #[serde(default)]
    pub transformer: TransformerDoc,
    #[serde(default)]
    pub bus: Vec<BusDoc>,
    #[serde(default)]
    pub line: Vec<LineDoc>,
}

impl NetworkDocument {
    /// Converts ohm/ampere quantities to per-unit and validates.
    pub fn into_network(self) -> Result<Network, NetworkError> {
        let base_kva = self.bases.kva;
        let base_v = self.bases.v_ll;
        if !(base_kva > 0.0 && base_v > 0.0) {
            return Err(NetworkError::Parse(format!("bases must be positive (kva={base_kva}, v_ll={base_v})")));
        }
        let z_base = base_v * base_v / (base_kva * 1000.0);
        let i_base = base_kva * 1000.0 / (3f64.sqrt() * base_v);

        let mut buses = Vec::with_capacity(self.bus.len());
        for b in &self.bus {
            let phases = PhaseSet::parse(&b.phases).ok_or_else(|| NetworkError::InvalidBus {
                id: b.id,
                reason: format!("bad phase set {:?}", b.phases),
            })?;
            buses.push(Bus { id: b.id, phases, vmin: b.vmin, vmax: b.vmax, is_slack: b.slack });
        }

        let mut lines = Vec::with_capacity(self.line.len());
        for (k, l) in self.line.iter().enumerate() {
            let mut z = ZERO3;
            match (&l.z_ohm, l.r_ohm, l.x_ohm) {
                (Some(m), None, None) => {
                    if m.len() != 3 || m.iter().any(|row| row.len() != 3) {
                        return Err(NetworkError::InvalidLine { line: k, reason: "z_ohm must be 3x3".into() });
                    }
                    for (r, row) in m.iter().enumerate() {
                        for (c, v) in row.iter().enumerate() {
                            z[r][c] = Complex64::new(v[0], v[1]) / z_base;
                        }
                    }
                }
                (None, r, x) if r.is_some() || x.is_some() => {
                    let zz = Complex64::new(r.unwrap_or(0.0), x.unwrap_or(0.0)) / z_base;
                    for (i, row) in z.iter_mut().enumerate() {
                        row[i] = zz;
                    }
                }
                _ => {
                    return Err(NetworkError::InvalidLine {
                        line: k,
                        reason: "give either r_ohm/x_ohm or z_ohm".into(),
                    })
                }
            }
            if z.iter().flatten().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(NetworkError::InvalidLine { line: k, reason: "non-finite impedance".into() });
            }
            if l.from == l.to {
                return Err(NetworkError::InvalidLine { line: k, reason: format!("from == to ({})", l.from) });
            }
            lines.push(Line { from: l.from, to: l.to, z, ampacity: l.ampacity_a.map(|a| a / i_base) });
        }

        let t = &self.transformer;
        let transformer = Transformer {
            rating_kva: t.rating_kva,
            v_primary: t.v_primary,
            v_secondary: t.v_secondary,
            connection: t.connection.clone(),
            short_circuit_pct: t.short_circuit_pct,
            x_over_r: t.x_over_r,
        };
        Network::new(buses, lines, transformer, base_kva, base_v)
    }

    /// Inverse of [`NetworkDocument::into_network`], writing full impedance
    /// matrices only when mutual terms are present.
    pub fn from_network(net: &Network) -> NetworkDocument {
        let z_base = net.base_v() * net.base_v() / (net.base_kva() * 1000.0);
        let i_base = net.base_kva() * 1000.0 / (3f64.sqrt() * net.base_v());
        let bus = net
            .buses()
            .iter()
            .map(|b| BusDoc { id: b.id, phases: b.phases.to_string(), slack: b.is_slack, vmin: b.vmin, vmax: b.vmax })
            .collect();
        let line = net
            .lines()
            .iter()
            .map(|l| {
                let diag_only = (0..3).all(|r| (0..3).all(|c| r == c || l.z[r][c] == Complex64::new(0.0, 0.0)));
                let uniform = diag_only && l.z[0][0] == l.z[1][1] && l.z[1][1] == l.z[2][2];
                let mut doc = LineDoc {
                    from: l.from,
                    to: l.to,
                    r_ohm: None,
                    x_ohm: None,
                    z_ohm: None,
                    ampacity_a: l.ampacity.map(|a| a * i_base),
                };
                if uniform {
                    doc.r_ohm = Some(l.z[0][0].re * z_base);
                    doc.x_ohm = Some(l.z[0][0].im * z_base);
                } else {
                    doc.z_ohm = Some(
                        l.z.iter().map(|row| row.iter().map(|v| [v.re * z_base, v.im * z_base]).collect()).collect(),
                    );
                }
                doc
            })
            .collect();
        let t = net.transformer();
        NetworkDocument {
            bases: BasesDoc { kva: net.base_kva(), v_ll: net.base_v() },
            transformer: TransformerDoc {
                rating_kva: t.rating_kva,
                v_primary: t.v_primary,
                v_secondary: t.v_secondary,
                connection: t.connection.clone(),
                short_circuit_pct: t.short_circuit_pct,
                x_over_r: t.x_over_r,
            },
            bus,
            line,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network document serializes")
    }
}

/// Parses a network description from TOML text.
pub fn parse_network(text: &str) -> Result<Network, NetworkError> {
    let doc: NetworkDocument = toml::from_str(text).map_err(|e| NetworkError::Parse(e.to_string()))?;
    doc.into_network()
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network, NetworkError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| NetworkError::Io { path: path.display().to_string(), source })?;
    parse_network(&text)
}

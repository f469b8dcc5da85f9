//! The 24-hour closed loop: hour-ahead forecasts, market clearing, attack
//! injection, detection and market-based mitigation.
//!
//! Three twins of the same day are simulated: a nominal one without the
//! attack, an unmitigated one with the attack and the original dispatch,
//! and the mitigated one that redispatches once the feeder check flags.

mod config;
mod offline;
mod run;

use std::collections::BTreeSet;

use chrono::{NaiveDateTime, NaiveTime, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    load_config, DataConfig, ForecastConfig, MarketConfig, MitigationConfig, NodeScore, Persistence, ScenarioConfig,
};
pub use offline::{detect_offline, with_attacks};
pub use run::{
    evaluation_set, federated_config, prepare, run_prepared, run_timeline, training_set, CurtailmentRow, Event,
    EventKind, IntervalRecord, MinuteRecord, PreparedScenario, PvSnapshotRow, SimulationResult, Summary,
    SCHEMA_VERSION,
};

use crate::netmodel::{Network, Phase};
use crate::powerflow::InjectionSet;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario configuration: {0}")]
    Config(String),
    #[error("invalid attack: {0}")]
    Attack(String),
    #[error("interval {index}: {source}")]
    Interval {
        index: usize,
        #[source]
        source: Box<crate::Error>,
    },
    #[error(transparent)]
    Module(Box<crate::Error>),
}

macro_rules! module_error {
    ($($t:ty),*) => {$(
        impl From<$t> for ScenarioError {
            fn from(e: $t) -> Self {
                ScenarioError::Module(Box::new(e.into()))
            }
        }
    )*};
}

module_error!(
    crate::netmodel::NetworkError,
    crate::powerflow::PowerFlowError,
    crate::forecast::ForecastError,
    crate::detect::DetectError,
    crate::market::MarketError,
    crate::cli_io::CliIoError
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Inverters of the targeted PV units are shut down.
    PvDos,
}

/// `"all"` or an explicit list of node ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttackTargets {
    Keyword(String),
    Nodes(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackEvent {
    pub kind: AttackKind,
    pub targets: AttackTargets,
    /// Clock time on the simulated day, `HH:MM`.
    #[serde(with = "clock")]
    pub start: NaiveTime,
    pub duration_min: u32,
}

mod clock {
    use chrono::NaiveTime;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &NaiveTime, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.format("%H:%M").to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<NaiveTime, D::Error> {
        let s = String::deserialize(d)?;
        NaiveTime::parse_from_str(&s, "%H:%M")
            .or_else(|_| NaiveTime::parse_from_str(&s, "%H:%M:%S"))
            .map_err(|e| serde::de::Error::custom(format!("bad clock time '{s}': {e}")))
    }
}

impl AttackEvent {
    pub fn start_minute(&self) -> u32 {
        self.start.hour() * 60 + self.start.minute()
    }

    /// Whether the attack is in force at minute-of-day `minute`.
    pub fn active_at(&self, minute: u32) -> bool {
        let s = self.start_minute();
        minute >= s && minute < s + self.duration_min
    }

    pub fn targets(&self, all: &[u32]) -> Result<BTreeSet<u32>, ScenarioError> {
        match &self.targets {
            AttackTargets::Keyword(k) if k == "all" => Ok(all.iter().copied().collect()),
            AttackTargets::Keyword(k) => Err(ScenarioError::Attack(format!("unknown target keyword '{k}'"))),
            AttackTargets::Nodes(n) => Ok(n.iter().copied().collect()),
        }
    }
}

/// One prosumer's demand and PV output at a measurement step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsumerInjection {
    pub node_id: u32,
    pub phase: Phase,
    pub pv_equipped: bool,
    pub demand_kw: f64,
    pub pv_kw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsumerInjections {
    pub nodes: Vec<ProsumerInjection>,
}

impl ProsumerInjections {
    pub fn total_pv_kw(&self) -> f64 {
        self.nodes.iter().map(|n| n.pv_kw).sum()
    }

    /// Network injections with a constant load power factor.
    pub fn to_injection_set(&self, net: &Network, power_factor: f64) -> InjectionSet {
        let tan_phi = (1.0 / (power_factor * power_factor) - 1.0).max(0.0).sqrt();
        let mut p = vec![[0.0; 3]; net.len()];
        let mut q = vec![[0.0; 3]; net.len()];
        for n in &self.nodes {
            if let Some(i) = net.bus_index(n.node_id) {
                p[i][n.phase.index()] += n.pv_kw - n.demand_kw;
                q[i][n.phase.index()] -= n.demand_kw * tan_phi;
            }
        }
        InjectionSet::from_kw(net, &p, &q)
    }
}

/// Zeroes the PV output of the targeted nodes while the attack is in force
/// at `t`; everything else is returned unchanged.
pub fn apply_attack(
    injections: &ProsumerInjections,
    event: &AttackEvent,
    t: NaiveDateTime,
) -> Result<ProsumerInjections, ScenarioError> {
    let all: Vec<u32> = injections.nodes.iter().filter(|n| n.pv_equipped).map(|n| n.node_id).collect();
    let targets = event.targets(&all)?;
    for id in &targets {
        match injections.nodes.iter().find(|n| n.node_id == *id) {
            Some(n) if n.pv_equipped => {}
            Some(_) => return Err(ScenarioError::Attack(format!("node {id} has no PV"))),
            None => return Err(ScenarioError::Attack(format!("node {id} is not a prosumer"))),
        }
    }
    let mut out = injections.clone();
    if event.active_at(t.hour() * 60 + t.minute()) {
        for n in &mut out.nodes {
            if targets.contains(&n.node_id) {
                n.pv_kw = 0.0;
            }
        }
    }
    Ok(out)
}

//! Synthetic prosumer demand and PV at 1-minute resolution.
//!
//! Each node draws from its own random stream, so a node's series does not
//! depend on how many other nodes are generated or how many days are kept.
//! Weather (daily clearness and a common cloud process) is shared by all
//! nodes.

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CliIoError, NodeSeries, TimeSeriesSet};
use crate::netmodel::Phase;
use crate::solar::clear_sky;

const MIN_PER_DAY: usize = 1440;
/// Probability that a day keeps the previous day's clear/cloudy regime.
const WEATHER_PERSISTENCE: f64 = 0.6;

/// Daily profile template of one household type (kW, clock hours).
#[derive(Clone, Copy, Debug)]
pub struct Archetype {
    pub base: f64,
    pub morning: (f64, f64),
    pub midday: f64,
    pub evening: (f64, f64),
    pub noise: f64,
    pub weekend: f64,
    pub kwp: f64,
}

pub const ARCHETYPES: [Archetype; 12] = [
    Archetype {
        base: 0.25,
        morning: (0.6, 7.5),
        midday: 0.15,
        evening: (1.2, 20.0),
        noise: 0.08,
        weekend: 1.10,
        kwp: 0.9,
    },
    Archetype {
        base: 0.35,
        morning: (0.4, 8.0),
        midday: 0.35,
        evening: (0.9, 19.5),
        noise: 0.10,
        weekend: 1.05,
        kwp: 1.1,
    },
    Archetype {
        base: 0.20,
        morning: (0.8, 7.0),
        midday: 0.05,
        evening: (1.4, 20.5),
        noise: 0.07,
        weekend: 1.20,
        kwp: 0.7,
    },
    Archetype {
        base: 0.45,
        morning: (0.3, 9.0),
        midday: 0.45,
        evening: (0.7, 19.0),
        noise: 0.12,
        weekend: 0.95,
        kwp: 1.3,
    },
    Archetype {
        base: 0.30,
        morning: (0.5, 6.5),
        midday: 0.20,
        evening: (1.1, 21.0),
        noise: 0.09,
        weekend: 1.15,
        kwp: 0.8,
    },
    Archetype {
        base: 0.15,
        morning: (0.7, 7.5),
        midday: 0.10,
        evening: (1.0, 20.0),
        noise: 0.06,
        weekend: 1.25,
        kwp: 0.6,
    },
    Archetype {
        base: 0.40,
        morning: (0.5, 8.5),
        midday: 0.30,
        evening: (1.3, 19.5),
        noise: 0.11,
        weekend: 1.00,
        kwp: 1.2,
    },
    Archetype {
        base: 0.28,
        morning: (0.6, 7.0),
        midday: 0.25,
        evening: (0.8, 21.5),
        noise: 0.08,
        weekend: 1.10,
        kwp: 1.0,
    },
    Archetype {
        base: 0.22,
        morning: (0.9, 6.5),
        midday: 0.12,
        evening: (1.5, 20.0),
        noise: 0.10,
        weekend: 1.30,
        kwp: 0.5,
    },
    Archetype {
        base: 0.50,
        morning: (0.4, 8.0),
        midday: 0.50,
        evening: (0.9, 18.5),
        noise: 0.13,
        weekend: 0.90,
        kwp: 1.4,
    },
    Archetype {
        base: 0.33,
        morning: (0.5, 7.5),
        midday: 0.28,
        evening: (1.2, 20.5),
        noise: 0.09,
        weekend: 1.05,
        kwp: 0.9,
    },
    Archetype {
        base: 0.26,
        morning: (0.7, 8.0),
        midday: 0.18,
        evening: (1.0, 19.0),
        noise: 0.08,
        weekend: 1.15,
        kwp: 0.8,
    },
];

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthParams {
    /// First day of the generated period (midnight).
    pub start: NaiveDate,
    /// Multiplier on all demand profiles.
    pub demand_scale: f64,
    /// Multiplier on installed PV capacity.
    pub pv_scale: f64,
    /// Extra PV multiplier per phase (A, B, C) of the prosumer.
    pub pv_phase_scale: [f64; 3],
    /// Clock hours outside which PV is forced to zero.
    pub daylight: (f64, f64),
    /// Keep only the last `retain_days` days in the output.
    pub retain_days: Option<usize>,
    /// Daily clearness forced on the last day (1.0 = clear sky).
    pub last_day_clearness: Option<f64>,
    /// Scale on intraday cloud fluctuations.
    pub cloud_variability: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            start: NaiveDate::from_ymd_opt(2022, 7, 2).expect("valid date"),
            demand_scale: 1.0,
            pv_scale: 1.0,
            pv_phase_scale: [1.0; 3],
            daylight: (5.0, 21.5),
            retain_days: None,
            last_day_clearness: None,
            cloud_variability: 1.0,
        }
    }
}

fn node_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Bell around a clock hour; the distance wraps at midnight.
fn gauss(h: f64, centre: f64, width: f64) -> f64 {
    let d = (h - centre + 12.0).rem_euclid(24.0) - 12.0;
    let z = d / width;
    (-0.5 * z * z).exp()
}

fn ar1_step(prev: f64, phi: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let e: f64 = StandardNormal.sample(rng);
    phi * prev + sigma * (1.0 - phi * phi).sqrt() * e
}

struct Weather {
    daily: Vec<f64>,
    /// Common cloud deviation per minute over the whole period.
    common: Vec<f64>,
}

fn weather(seed: u64, start: NaiveDate, days: usize, p: &SynthParams) -> Weather {
    let mut rng = node_rng(seed, 0);
    let mut daily = Vec::with_capacity(days);
    let mut clear = true;
    for d in 0..days {
        let date = start + Duration::days(d as i64);
        // clearer skies in summer; weather regimes tend to persist
        let season = (std::f64::consts::TAU * (date.ordinal() as f64 - 172.0) / 365.0).cos();
        let p_clear = 0.55 + 0.25 * season;
        if d == 0 || !rng.gen_bool(WEATHER_PERSISTENCE) {
            clear = rng.gen_bool(p_clear.clamp(0.05, 0.95));
        }
        let c = if clear { rng.gen_range(0.85..1.0) } else { rng.gen_range(0.3..0.85) };
        daily.push(c);
    }
    if let (Some(c), Some(last)) = (p.last_day_clearness, daily.last_mut()) {
        *last = c;
    }
    let mut common = Vec::with_capacity(days * MIN_PER_DAY);
    let mut x = 0.0;
    for &c in &daily {
        let sigma = 0.25 * (1.0 - c) * p.cloud_variability;
        for _ in 0..MIN_PER_DAY {
            x = ar1_step(x, 0.99, 1.0, &mut rng);
            common.push(sigma * x);
        }
    }
    Weather { daily, common }
}

fn node_series(
    seed: u64,
    node: u32,
    start: NaiveDateTime,
    days: usize,
    keep_from: usize,
    p: &SynthParams,
    w: &Weather,
) -> NodeSeries {
    let mut rng = node_rng(seed, node as u64 + 1);
    let phase = Phase::ALL[rng.gen_range(0..3)];
    let a = ARCHETYPES[node as usize % ARCHETYPES.len()];
    let level = rng.gen_range(0.8..1.2);
    let kwp = a.kwp * rng.gen_range(0.85..1.15) * p.pv_scale * p.pv_phase_scale[phase.index()];
    let shift = rng.gen_range(-0.5..0.5);
    let n_keep = (days - keep_from) * MIN_PER_DAY;
    let mut demand = Vec::with_capacity(n_keep);
    let mut pv = Vec::with_capacity(n_keep);
    let (mut slow, mut cloud) = (0.0, 0.0);
    let mut drift = 0.0;
    for k in 0..days * MIN_PER_DAY {
        let day = k / MIN_PER_DAY;
        let t = start + Duration::minutes(k as i64);
        // day-to-day level drift without steps at midnight
        drift = ar1_step(drift, 0.9986, 1.0, &mut rng);
        let day_level = 1.0 + 0.1 * drift.clamp(-2.5, 2.5);
        let h = t.hour() as f64 + t.minute() as f64 / 60.0;
        let weekend = if t.weekday().num_days_from_monday() >= 5 { a.weekend } else { 1.0 };
        let season = 1.0 + 0.15 * (std::f64::consts::TAU * (t.ordinal() as f64 - 15.0) / 365.0).cos();
        let shape = a.base
            + a.morning.0 * gauss(h, a.morning.1 + shift, 1.0)
            + a.midday * gauss(h, 13.0, 1.8)
            + a.evening.0 * gauss(h, a.evening.1 + shift, 1.5);
        slow = ar1_step(slow, 0.995, a.noise, &mut rng);
        let white: f64 = StandardNormal.sample(&mut rng);
        let d = (level * day_level * weekend * season * shape + slow + 0.3 * a.noise * white) * p.demand_scale;

        cloud = ar1_step(cloud, 0.98, 0.04 * p.cloud_variability * (1.0 - w.daily[day]), &mut rng);
        let daylight = h >= p.daylight.0 && h < p.daylight.1;
        let g = if daylight { kwp * clear_sky(t) * (w.daily[day] + w.common[k] + cloud).clamp(0.0, 1.0) } else { 0.0 };
        if day >= keep_from {
            demand.push(d.max(0.02 * p.demand_scale));
            pv.push(g);
        }
    }
    NodeSeries { node_id: node, phase, demand_kw: demand, pv_kw: pv }
}

/// Generates `days` days of 1-minute data for nodes `0..n_nodes`.
pub fn generate_synthetic(
    seed: u64,
    n_nodes: usize,
    days: usize,
    params: &SynthParams,
) -> Result<TimeSeriesSet, CliIoError> {
    generate_nodes(seed, &(0..n_nodes as u32).collect::<Vec<_>>(), days, params)
}

/// Like [`generate_synthetic`] for an explicit list of node ids.
pub fn generate_nodes(
    seed: u64,
    nodes: &[u32],
    days: usize,
    params: &SynthParams,
) -> Result<TimeSeriesSet, CliIoError> {
    if nodes.is_empty() || days == 0 {
        return Err(CliIoError::InvalidParams(format!(
            "need ≥ 1 node and ≥ 1 day (got {} nodes, {days} days)",
            nodes.len()
        )));
    }
    if !(params.demand_scale >= 0.0
        && params.pv_scale >= 0.0
        && params.cloud_variability >= 0.0
        && params.pv_phase_scale.iter().all(|s| *s >= 0.0))
    {
        return Err(CliIoError::InvalidParams("scales must be non-negative".into()));
    }
    if !(params.daylight.0 < params.daylight.1) {
        return Err(CliIoError::InvalidParams(format!("empty daylight window {:?}", params.daylight)));
    }
    let keep = params.retain_days.unwrap_or(days).clamp(1, days);
    let keep_from = days - keep;
    let start = params.start.and_hms_opt(0, 0, 0).expect("midnight");
    let w = weather(seed, params.start, days, params);
    let series: Vec<NodeSeries> =
        nodes.par_iter().map(|&n| node_series(seed, n, start, days, keep_from, params, &w)).collect();
    Ok(TimeSeriesSet { start: start + Duration::days(keep_from as i64), resolution_min: 1, nodes: series })
}

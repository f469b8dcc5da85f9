use std::collections::BTreeSet;

use chrono::NaiveDateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::Persistence;
use super::{apply_attack, ProsumerInjection, ProsumerInjections, ScenarioConfig, ScenarioError};
use crate::cli_io::{generate_nodes, ingest_timeseries, IngestOptions, SynthParams, TimeSeriesSet, TIMESTAMP_FORMAT};
use crate::detect::{detect_feeder_expected, detect_node, DetectionReport, NodeFlags, ResidualSeries, Thresholds};
use crate::forecast::{
    forecast_features, predict_quantiles, train_models, FederatedConfig, ForecastModels, Horizon, QuantileForecast,
    Target, MEDIAN,
};
use crate::market::{
    assemble_acopf, clear_market, mitigate_redispatch, Bid, BidDispatch, Coefficients, Dispatch, MarketInputs,
    MarketSettings, MitigationContext,
};
use crate::netmodel::surrogate::feeder88;
use crate::netmodel::{load_network, Network, Phase};
use crate::powerflow::{PowerFlowSolver, DEFAULT_MAX_ITER, DEFAULT_TOL};

pub const SCHEMA_VERSION: u32 = 1;

const Q10: usize = 0;
const Q90: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    AttackOnset,
    AttackEnd,
    FeederFlag,
    Mitigation,
    MitigationEnd,
    MarketError,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: String,
    pub minute: usize,
    pub interval: usize,
    pub kind: EventKind,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalRecord {
    pub index: usize,
    pub start: String,
    /// Dispatch cleared at the interval start.
    pub dispatch: Dispatch,
    /// Last dispatch cleared inside this interval, after a feeder flag or a
    /// PV recovery.
    pub redispatch: Option<Dispatch>,
    /// Mean measured PCC import per phase over the interval (kW).
    pub pcc_kw: [f64; 3],
    pub losses_kw: f64,
    pub min_voltage_pu: f64,
    pub max_abs_mismatch_kw: f64,
    pub feeder_flagged: bool,
    pub mitigation_active: bool,
    /// Index into `coefficient_sets` of the coefficients in force at the
    /// interval end.
    pub coefficients: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinuteRecord {
    pub time: String,
    /// Measured PCC import per phase (kW).
    pub pcc_kw: [f64; 3],
    pub losses_kw: f64,
    pub min_voltage_pu: f64,
    /// Import expected from forecasts and dispatch (kW).
    pub expected_kw: f64,
    pub mismatch_kw: f64,
    /// PCC import of the twin without the attack (kW).
    pub nominal_pcc_kw: [f64; 3],
    /// PCC import of the twin with the attack and no mitigation (kW).
    pub unmitigated_pcc_kw: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PvSnapshotRow {
    pub node_id: u32,
    pub phase: Phase,
    pub pv_kw: f64,
    pub pv_forecast_kw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurtailmentRow {
    pub node_id: u32,
    pub phase: Phase,
    pub flexibility_kw: f64,
    pub curtailment_kw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub attack_onset: Option<String>,
    pub flag_time: Option<String>,
    /// First minute with mitigated setpoints.
    pub mitigation_time: Option<String>,
    /// Minute compared across the twins: the first mitigated minute, or the
    /// attack onset when nothing was mitigated, or noon.
    pub snapshot_time: String,
    /// Mean measured PCC import per phase over the market interval before
    /// the attack (or the snapshot).
    pub pre_attack_pcc_kw: [f64; 3],
    pub pre_attack_total_kw: f64,
    pub nominal_total_kw: f64,
    pub unmitigated_total_kw: f64,
    pub mitigated_total_kw: f64,
    /// (unmitigated − mitigated) / unmitigated, percent.
    pub reduction_pct: f64,
    pub curtailment_total_kw: f64,
    pub energy_import_kwh: f64,
    pub pv_snapshot: Vec<PvSnapshotRow>,
    pub curtailment: Vec<CurtailmentRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub schema_version: u32,
    pub config: ScenarioConfig,
    pub day: String,
    pub interval_min: usize,
    pub summary: Summary,
    pub events: Vec<Event>,
    pub coefficient_sets: Vec<Coefficients>,
    pub intervals: Vec<IntervalRecord>,
    pub minutes: Vec<MinuteRecord>,
    pub detection: DetectionReport,
}

/// Everything the loop needs that does not depend on the twin.
pub struct PreparedScenario {
    pub config: ScenarioConfig,
    pub network: Network,
    /// History days followed by the simulated day, 1-minute resolution.
    pub data: TimeSeriesSet,
    pub models: ForecastModels,
    /// Day-ahead median PV per node for the simulated day (15-minute steps).
    pub day_ahead_pv: Vec<Vec<f64>>,
    /// Flexibility as a fraction of forecast demand, per node.
    pub flex_share: Vec<f64>,
    pub coefficients: Coefficients,
    pub pv_equipped: Vec<bool>,
}

impl PreparedScenario {
    fn history(&self) -> usize {
        self.data.len() - 1440
    }

    fn time(&self, minute: usize) -> NaiveDateTime {
        self.data.timestamp(self.history() + minute)
    }
}

fn fmt_time(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

fn node_ids(net: &Network) -> Vec<u32> {
    net.buses().iter().map(|b| b.id).collect()
}

fn eval_data(cfg: &ScenarioConfig, ids: &[u32]) -> Result<TimeSeriesSet, ScenarioError> {
    let keep = cfg.data.history_days + 1;
    let set = match &cfg.data.timeseries {
        Some(path) => {
            let set = ingest_timeseries(path, &IngestOptions::default())?;
            let n = set.len() / 1440 * 1440;
            if n < keep * 1440 {
                return Err(ScenarioError::Config(format!("{}: need {keep} full days", path.display())));
            }
            set.slice(n - keep * 1440, n)
        }
        None => {
            let p = SynthParams { retain_days: Some(keep), ..cfg.data.synth.clone() };
            generate_nodes(cfg.seed, ids, cfg.data.training_days + 1, &p)?
        }
    };
    for id in ids {
        if set.node(*id).is_none() {
            return Err(ScenarioError::Config(format!("no measurements for node {id}")));
        }
    }
    // network order
    let nodes = ids.iter().map(|id| set.node(*id).cloned().expect("checked")).collect();
    Ok(TimeSeriesSet { start: set.start, resolution_min: set.resolution_min, nodes })
}

fn training_data(cfg: &ScenarioConfig, ids: &[u32]) -> Result<TimeSeriesSet, ScenarioError> {
    match &cfg.data.training_timeseries {
        Some(path) => Ok(ingest_timeseries(path, &IngestOptions::default())?),
        None => {
            let clients: Vec<u32> = ids.iter().copied().take(cfg.data.training_clients).collect();
            let p = SynthParams { last_day_clearness: None, retain_days: None, ..cfg.data.synth.clone() };
            Ok(generate_nodes(cfg.seed, &clients, cfg.data.training_days, &p)?)
        }
    }
}

fn scenario_network(cfg: &ScenarioConfig) -> Result<Network, ScenarioError> {
    Ok(match &cfg.network {
        Some(p) => load_network(p)?,
        None => feeder88(),
    })
}

/// The measurements of the simulated day and the history before it, one
/// node per network bus.
pub fn evaluation_set(cfg: &ScenarioConfig) -> Result<TimeSeriesSet, ScenarioError> {
    eval_data(cfg, &node_ids(&scenario_network(cfg)?))
}

/// The data the forecasters are trained on.
pub fn training_set(cfg: &ScenarioConfig) -> Result<TimeSeriesSet, ScenarioError> {
    training_data(cfg, &node_ids(&scenario_network(cfg)?))
}

/// Federated training configuration derived from a scenario.
pub fn federated_config(cfg: &ScenarioConfig) -> FederatedConfig {
    FederatedConfig {
        rounds: cfg.forecast.rounds,
        epochs_per_round: cfg.forecast.epochs_per_round,
        seed: cfg.seed,
        ..FederatedConfig::default()
    }
}

/// Loads or trains the forecasters and builds the data of the simulated day.
pub fn prepare(config: &ScenarioConfig) -> Result<PreparedScenario, ScenarioError> {
    config.validate()?;
    let network = scenario_network(config)?;
    let ids = node_ids(&network);
    let data = eval_data(config, &ids)?;
    let models = match &config.forecast.models_dir {
        Some(dir) => ForecastModels::load_dir(dir)?,
        None => train_models(&training_data(config, &ids)?, &federated_config(config))?.0,
    };
    let history = data.len() - 1440;
    let quarter = data.downsample(15);
    let mut day_ahead_pv = Vec::with_capacity(ids.len());
    for n in &quarter.nodes {
        let x = forecast_features(&n.pv_kw[..history / 15], quarter.start, Horizon::DayAhead, Target::Pv)?;
        day_ahead_pv
            .push(predict_quantiles(&models.day_ahead_pv, &x, Horizon::DayAhead, Target::Pv, n.node_id)?.median());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x666c6578);
    let (lo, hi) = config.market.flex_range;
    let flex_share = ids.iter().map(|_| if hi > lo { rng.gen_range(lo..hi) } else { lo }).collect();
    let m = &config.market;
    let mut coefficients = Coefficients::uniform(&ids, m.alpha, m.beta, m.xi, m.mu_kw);
    for c in &mut coefficients.nodes {
        c.rs = m.resilience.iter().find(|s| s.node == c.node_id).map_or(m.default_resilience, |s| s.score);
    }
    coefficients.validate()?;
    let pv_equipped = data.nodes.iter().map(|n| n.pv_kw.iter().any(|v| *v > 0.0)).collect();
    Ok(PreparedScenario {
        config: config.clone(),
        network,
        data,
        models,
        day_ahead_pv,
        flex_share,
        coefficients,
        pv_equipped,
    })
}

/// Per-node forecasts for the minutes of one interval.
struct IntervalForecast {
    demand: Vec<QuantileForecast>,
    pv: Vec<QuantileForecast>,
}

/// State of the mitigation once triggered.
struct Mitigation {
    attacked: BTreeSet<u32>,
    coefficients: usize,
}

struct Twin {
    minutes: Vec<MinuteRecord>,
    intervals: Vec<IntervalRecord>,
    events: Vec<Event>,
    coefficient_sets: Vec<Coefficients>,
    /// Per node: measured PV, median and spread of the PV and demand
    /// forecasts, per minute of the day.
    pv_measured: Vec<Vec<f64>>,
    pv_fcst: Vec<Vec<(f64, f64)>>,
    demand_fcst: Vec<Vec<(f64, f64)>>,
    flag_minute: Option<usize>,
    mitigation_minute: Option<usize>,
    /// Dispatch in force at each minute.
    dispatch_at: Vec<usize>,
    dispatches: Vec<(Vec<Bid>, Dispatch)>,
}

fn interval_forecasts(
    p: &PreparedScenario,
    origin: usize,
    pv_hist: &[Vec<f64>],
) -> Result<IntervalForecast, ScenarioError> {
    let mut demand = Vec::with_capacity(p.data.nodes.len());
    let mut pv = Vec::with_capacity(p.data.nodes.len());
    let models = &p.models;
    for (k, n) in p.data.nodes.iter().enumerate() {
        let x = forecast_features(&n.demand_kw[..origin], p.data.start, Horizon::HourAhead, Target::Demand)?;
        demand.push(predict_quantiles(&models.hour_ahead_demand, &x, Horizon::HourAhead, Target::Demand, n.node_id)?);
        let x = forecast_features(&pv_hist[k][..origin], p.data.start, Horizon::HourAhead, Target::Pv)?;
        pv.push(predict_quantiles(&models.hour_ahead_pv, &x, Horizon::HourAhead, Target::Pv, n.node_id)?);
    }
    Ok(IntervalForecast { demand, pv })
}

fn interval_mean(f: &QuantileForecast, steps: usize) -> f64 {
    f.values[..steps].iter().map(|q| q[MEDIAN]).sum::<f64>() / steps as f64
}

/// Dispatch with every offered kW of PV taken and no curtailment, checked
/// with a power flow; used when clearing fails.
fn fallback_dispatch(
    net: &Network,
    bids: &[Bid],
    demand_kw: &[[f64; 3]],
    pf_solver: &PowerFlowSolver,
    power_factor: f64,
    reason: String,
) -> Result<Dispatch, ScenarioError> {
    let inj = ProsumerInjections {
        nodes: bids
            .iter()
            .map(|b| {
                let i = net.bus_index(b.node_id).expect("validated bid");
                ProsumerInjection {
                    node_id: b.node_id,
                    phase: b.phase,
                    pv_equipped: true,
                    demand_kw: demand_kw[i][b.phase.index()],
                    pv_kw: b.pv_capacity_kw,
                }
            })
            .collect(),
    };
    let sol = pf_solver.solve(&inj.to_injection_set(net, power_factor), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let mags = sol.voltage_magnitudes();
    let flat = mags.iter().flatten().filter(|v| **v > 0.0);
    Ok(Dispatch {
        bids: bids
            .iter()
            .map(|b| BidDispatch { node_id: b.node_id, phase: b.phase, g_kw: b.pv_capacity_kw, c_kw: 0.0 })
            .collect(),
        objective: 0.0,
        losses_kw: sol.total_losses_kw(),
        pcc_kw: sol.pcc_kw,
        min_voltage_pu: flat.clone().fold(f64::INFINITY, |a, b| a.min(*b)),
        max_voltage_pu: flat.fold(f64::NEG_INFINITY, |a, b| a.max(*b)),
        warnings: vec![format!("fallback dispatch: {reason}")],
        residual: 0.0,
        iterations: 0,
    })
}

/// Whether the attacked nodes' last measured PV is back to the configured
/// share of their day-ahead forecast.
fn recovered(p: &PreparedScenario, m: &Mitigation, pv_hist: &[Vec<f64>], minute: usize) -> bool {
    let q = (minute / 15).min(95);
    let (mut measured, mut expected) = (0.0, 0.0);
    for (i, n) in p.data.nodes.iter().enumerate() {
        if m.attacked.contains(&n.node_id) {
            measured += pv_hist[i].last().copied().unwrap_or(0.0);
            expected += p.day_ahead_pv[i][q];
        }
    }
    expected > 0.0 && measured >= p.config.mitigation.recovery_fraction * expected
}

/// Builds bids from the first `steps` forecast steps, clears the market at
/// `minute` and logs a clearing error before falling back.
#[allow(clippy::too_many_arguments)]
fn clear_interval(
    p: &PreparedScenario,
    twin: &mut Twin,
    fc: &IntervalForecast,
    mitigation: Option<&Mitigation>,
    pf_solver: &PowerFlowSolver,
    k: usize,
    minute: usize,
    steps: usize,
) -> Result<(MarketInputs, Dispatch), ScenarioError> {
    let cfg = &p.config;
    let net = &p.network;
    let mut demand_kw = vec![[0.0; 3]; net.len()];
    let mut bids = Vec::with_capacity(p.data.nodes.len());
    for (i, n) in p.data.nodes.iter().enumerate() {
        let bus = net.bus_index(n.node_id).expect("node order follows the network");
        let d = interval_mean(&fc.demand[i], steps).max(0.0);
        demand_kw[bus][n.phase.index()] += d;
        let known_down = mitigation.is_some_and(|m| m.attacked.contains(&n.node_id));
        let g = if known_down { 0.0 } else { interval_mean(&fc.pv[i], steps) };
        bids.push(Bid { node_id: n.node_id, phase: n.phase, flexibility_kw: p.flex_share[i] * d, pv_capacity_kw: g });
    }
    let coeff_idx = mitigation.map_or(0, |m| m.coefficients);
    let inputs = MarketInputs {
        network: net.clone(),
        bids,
        coefficients: twin.coefficient_sets[coeff_idx].clone(),
        demand_kw,
        settings: MarketSettings { power_factor: cfg.market.power_factor, import_price: cfg.market.import_price },
    };
    let dispatch = match assemble_acopf(&inputs).and_then(|prob| clear_market(&prob, cfg.solver)) {
        Ok(d) => d,
        Err(e) => {
            twin.events.push(Event {
                time: fmt_time(p.time(minute)),
                minute,
                interval: k,
                kind: EventKind::MarketError,
                detail: e.to_string(),
            });
            fallback_dispatch(net, &inputs.bids, &inputs.demand_kw, pf_solver, cfg.market.power_factor, e.to_string())
                .map_err(|e| ScenarioError::Interval { index: k, source: Box::new(module_error(e)) })?
        }
    };
    Ok((inputs, dispatch))
}

fn run_twin(p: &PreparedScenario, attack: bool, mitigate: bool) -> Result<Twin, ScenarioError> {
    let cfg = &p.config;
    let net = &p.network;
    let pf_solver = PowerFlowSolver::new(net)?;
    let n_nodes = p.data.nodes.len();
    let hist = p.history();
    let interval = cfg.interval_min;
    let th: &Thresholds = &cfg.detect;
    let ids: Vec<u32> = p.data.nodes.iter().map(|n| n.node_id).collect();
    let attacks = if attack { cfg.attacks.clone() } else { Vec::new() };
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(0x6e6f697365);
    let noise =
        Normal::new(0.0, cfg.measurement_noise_kw.max(0.0)).map_err(|e| ScenarioError::Config(e.to_string()))?;

    let mut pv_hist: Vec<Vec<f64>> = p.data.nodes.iter().map(|n| n.pv_kw[..hist].to_vec()).collect();
    for h in &mut pv_hist {
        h.reserve(1440);
    }
    let mut twin = Twin {
        minutes: Vec::with_capacity(1440),
        intervals: Vec::new(),
        events: Vec::new(),
        coefficient_sets: vec![p.coefficients.clone()],
        pv_measured: vec![Vec::with_capacity(1440); n_nodes],
        pv_fcst: vec![Vec::with_capacity(1440); n_nodes],
        demand_fcst: vec![Vec::with_capacity(1440); n_nodes],
        flag_minute: None,
        mitigation_minute: None,
        dispatch_at: Vec::with_capacity(1440),
        dispatches: Vec::new(),
    };
    let mut mitigation: Option<Mitigation> = None;
    let mut feeder_run = 0usize;
    let mut pv_runs = vec![0usize; n_nodes];
    let mut attack_state = vec![false; attacks.len()];

    for k in 0..1440 / interval {
        let t0 = k * interval;
        let origin = hist + t0;
        let ends = match (&mitigation, cfg.mitigation.persistence) {
            (Some(_), Persistence::Interval) => true,
            (Some(m), Persistence::UntilRecovered) => recovered(p, m, &pv_hist, t0),
            _ => false,
        };
        if ends {
            twin.events.push(Event {
                time: fmt_time(p.time(t0)),
                minute: t0,
                interval: k,
                kind: EventKind::MitigationEnd,
                detail: String::new(),
            });
            mitigation = None;
        }

        let fc = interval_forecasts(p, origin, &pv_hist)?;
        let (mut inputs, dispatch) =
            clear_interval(p, &mut twin, &fc, mitigation.as_ref(), &pf_solver, k, t0, interval)?;
        let mut fc = fc;
        let mut fc_base = t0;
        twin.dispatches.push((inputs.bids.clone(), dispatch.clone()));
        let mut current = twin.dispatches.len() - 1;
        let mut redispatch = None;
        let mut rec = IntervalRecord {
            index: k,
            start: fmt_time(p.time(t0)),
            dispatch,
            redispatch: None,
            pcc_kw: [0.0; 3],
            losses_kw: 0.0,
            min_voltage_pu: f64::INFINITY,
            max_abs_mismatch_kw: 0.0,
            feeder_flagged: false,
            mitigation_active: mitigation.is_some(),
            coefficients: mitigation.as_ref().map_or(0, |m| m.coefficients),
        };

        for j in t0..t0 + interval {
            let now = p.time(j);
            for (a, ev) in attacks.iter().enumerate() {
                let active = ev.active_at(j as u32);
                if active != attack_state[a] {
                    let kind = if active { EventKind::AttackOnset } else { EventKind::AttackEnd };
                    twin.events.push(Event {
                        time: fmt_time(now),
                        minute: j,
                        interval: k,
                        kind,
                        detail: format!("{:?}", ev.targets),
                    });
                    attack_state[a] = active;
                }
            }
            let mut inj = ProsumerInjections {
                nodes: p
                    .data
                    .nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| ProsumerInjection {
                        node_id: n.node_id,
                        phase: n.phase,
                        pv_equipped: p.pv_equipped[i],
                        demand_kw: n.demand_kw[hist + j],
                        pv_kw: n.pv_kw[hist + j],
                    })
                    .collect(),
            };
            for ev in &attacks {
                inj = apply_attack(&inj, ev, now)?;
            }
            // measured availability feeds later forecasts
            for (i, n) in inj.nodes.iter().enumerate() {
                pv_hist[i].push(n.pv_kw);
                twin.pv_measured[i].push(n.pv_kw);
            }
            let back = match &mitigation {
                Some(m) if cfg.mitigation.persistence == Persistence::UntilRecovered && j > t0 => {
                    recovered(p, m, &pv_hist, j)
                }
                _ => false,
            };
            if back {
                twin.events.push(Event {
                    time: fmt_time(now),
                    minute: j,
                    interval: k,
                    kind: EventKind::MitigationEnd,
                    detail: String::new(),
                });
                mitigation = None;
                // fresh forecasts now that the PV is measured again
                fc = interval_forecasts(p, hist + j, &pv_hist)?;
                fc_base = j;
                let (new_inputs, d) = clear_interval(p, &mut twin, &fc, None, &pf_solver, k, j, t0 + interval - j)?;
                twin.dispatches.push((new_inputs.bids.clone(), d.clone()));
                current = twin.dispatches.len() - 1;
                redispatch = Some(d);
                rec.coefficients = 0;
                inputs = new_inputs;
            }
            // setpoints: curtailment reduces load, unsold PV is curtailed
            let (bids, d) = &twin.dispatches[current];
            let mut expected = d.losses_kw;
            for (i, n) in inj.nodes.iter_mut().enumerate() {
                let (b, x) = (&bids[i], &d.bids[i]);
                let withheld = (b.pv_capacity_kw - x.g_kw).max(0.0);
                n.demand_kw = (n.demand_kw - x.c_kw).max(0.0);
                n.pv_kw = (n.pv_kw - withheld).max(0.0);
                let dq = &fc.demand[i].values[j - fc_base];
                let pq = &fc.pv[i].values[j - fc_base];
                let pv_expected =
                    if mitigation.as_ref().is_some_and(|m| m.attacked.contains(&b.node_id)) { 0.0 } else { pq[MEDIAN] };
                expected += (dq[MEDIAN] - x.c_kw) - (pv_expected - withheld).max(0.0);
                twin.demand_fcst[i].push((dq[MEDIAN], dq[Q90] - dq[Q10]));
                twin.pv_fcst[i].push((pq[MEDIAN], pq[Q90] - pq[Q10]));
            }
            twin.dispatch_at.push(current);
            let sol = pf_solver
                .solve(&inj.to_injection_set(net, cfg.market.power_factor), DEFAULT_TOL, DEFAULT_MAX_ITER)
                .map_err(|e| ScenarioError::Interval { index: k, source: Box::new(e.into()) })?;
            let mut pcc = sol.pcc_kw;
            if cfg.measurement_noise_kw > 0.0 {
                for v in &mut pcc {
                    *v += noise.sample(&mut noise_rng);
                }
            }
            let mags = sol.voltage_magnitudes();
            let vmin = mags.iter().flatten().filter(|v| **v > 0.0).fold(f64::INFINITY, |a, b| a.min(*b));
            let total: f64 = pcc.iter().sum();
            let mismatch = total - expected;
            twin.minutes.push(MinuteRecord {
                time: fmt_time(now),
                pcc_kw: pcc,
                losses_kw: sol.total_losses_kw(),
                min_voltage_pu: vmin,
                expected_kw: expected,
                mismatch_kw: mismatch,
                nominal_pcc_kw: [0.0; 3],
                unmitigated_pcc_kw: [0.0; 3],
            });
            for c in 0..3 {
                rec.pcc_kw[c] += pcc[c] / interval as f64;
            }
            rec.losses_kw += sol.total_losses_kw() / interval as f64;
            rec.min_voltage_pu = rec.min_voltage_pu.min(vmin);
            rec.max_abs_mismatch_kw = rec.max_abs_mismatch_kw.max(mismatch.abs());

            // online detection with the same rules as the offline report
            feeder_run = if mismatch.abs() > th.theta_kw { feeder_run + 1 } else { 0 };
            for i in 0..n_nodes {
                let (med, spread) = *twin.pv_fcst[i].last().expect("pushed above");
                let r = twin.pv_measured[i][j] - med;
                pv_runs[i] = if r.abs() > th.k * spread.max(th.scale_floor_kw) { pv_runs[i] + 1 } else { 0 };
            }
            if feeder_run >= th.m {
                rec.feeder_flagged = true;
            }
            if feeder_run == th.m && twin.flag_minute.is_none() {
                twin.flag_minute = Some(j);
                twin.events.push(Event {
                    time: fmt_time(now),
                    minute: j,
                    interval: k,
                    kind: EventKind::FeederFlag,
                    detail: format!("mismatch {mismatch:.3} kW"),
                });
                if mitigate && cfg.mitigation.enabled && mitigation.is_none() && j + 1 < t0 + interval {
                    let mut attacked: BTreeSet<u32> =
                        (0..n_nodes).filter(|i| pv_runs[*i] >= th.m).map(|i| ids[i]).collect();
                    if attacked.is_empty() {
                        attacked = (0..n_nodes).filter(|i| pv_runs[*i] > 0).map(|i| ids[i]).collect();
                    }
                    let (bids0, d0) = &twin.dispatches[current];
                    let ctx = MitigationContext::new(d0.pcc_kw, pcc, bids0);
                    match mitigate_redispatch(&inputs, &ctx, &attacked, cfg.solver) {
                        Ok(m) => {
                            twin.coefficient_sets.push(m.coefficients);
                            let cidx = twin.coefficient_sets.len() - 1;
                            let mut new_bids = inputs.bids.clone();
                            for b in &mut new_bids {
                                if attacked.contains(&b.node_id) {
                                    b.pv_capacity_kw = 0.0;
                                }
                            }
                            twin.dispatches.push((new_bids, m.dispatch.clone()));
                            current = twin.dispatches.len() - 1;
                            redispatch = Some(m.dispatch.clone());
                            rec.coefficients = cidx;
                            rec.mitigation_active = true;
                            twin.mitigation_minute = Some(j + 1);
                            twin.events.push(Event {
                                time: fmt_time(p.time(j + 1)),
                                minute: j + 1,
                                interval: k,
                                kind: EventKind::Mitigation,
                                detail: format!(
                                    "{} attacked nodes, curtailment {:.3} kW",
                                    attacked.len(),
                                    m.dispatch.curtailment_kw()
                                ),
                            });
                            mitigation = Some(Mitigation { attacked, coefficients: cidx });
                        }
                        Err(e) => twin.events.push(Event {
                            time: fmt_time(now),
                            minute: j,
                            interval: k,
                            kind: EventKind::MarketError,
                            detail: format!("redispatch: {e}"),
                        }),
                    }
                }
            }
        }
        rec.redispatch = redispatch;
        twin.intervals.push(rec);
    }
    Ok(twin)
}

fn module_error(e: ScenarioError) -> crate::Error {
    match e {
        ScenarioError::Module(b) => *b,
        other => crate::Error::Scenario(other),
    }
}

fn detection_report(p: &PreparedScenario, twin: &Twin) -> Result<DetectionReport, ScenarioError> {
    let th = &p.config.detect;
    let times: Vec<NaiveDateTime> = (0..1440).map(|j| p.time(j)).collect();
    let mut node_flags: Vec<NodeFlags> = Vec::new();
    for (i, n) in p.data.nodes.iter().enumerate() {
        let hist = p.history();
        let demand_measured = &n.demand_kw[hist..hist + 1440];
        for (target, measured, fc) in [
            (Target::Demand, demand_measured, &twin.demand_fcst[i]),
            (Target::Pv, &twin.pv_measured[i][..], &twin.pv_fcst[i]),
        ] {
            let res = ResidualSeries {
                node_id: n.node_id,
                target,
                times: times.clone(),
                residual: measured.iter().zip(fc).map(|(y, (med, _))| y - med).collect(),
                scale: fc.iter().map(|(_, s)| *s).collect(),
            };
            let f = detect_node(&res, th.k, th.m, th.scale_floor_kw)?;
            if !f.flags.is_empty() {
                node_flags.push(f);
            }
        }
    }
    let pcc: Vec<[f64; 3]> = twin.minutes.iter().map(|m| m.pcc_kw).collect();
    let expected: Vec<f64> = twin.minutes.iter().map(|m| m.expected_kw).collect();
    let feeder = detect_feeder_expected(&pcc, &expected, th.theta_kw, th.m, &times)?;
    Ok(DetectionReport {
        thresholds: th.clone(),
        node_flags,
        feeder_flag: feeder.flag,
        feeder_mismatch_kw: feeder.mismatch_kw,
    })
}

/// Runs the three twins of a prepared scenario.
pub fn run_prepared(p: &PreparedScenario) -> Result<SimulationResult, ScenarioError> {
    let has_attack = !p.config.attacks.is_empty();
    let mut main = run_twin(p, true, true)?;
    let nominal = if has_attack { run_twin(p, false, false)? } else { clone_pcc(&main) };
    let unmitigated = if has_attack { run_twin(p, true, false)? } else { clone_pcc(&main) };
    for (j, m) in main.minutes.iter_mut().enumerate() {
        m.nominal_pcc_kw = nominal.minutes[j].pcc_kw;
        m.unmitigated_pcc_kw = unmitigated.minutes[j].pcc_kw;
    }
    let detection = detection_report(p, &main)?;

    let onset = p.config.attacks.iter().map(|a| a.start_minute() as usize).min();
    let snapshot = main.mitigation_minute.or(onset).unwrap_or(720).min(1439);
    let before = onset.unwrap_or(snapshot).saturating_sub(1);
    let total = |v: [f64; 3]| v.iter().sum::<f64>();
    let window = &main.minutes[(before + 1).saturating_sub(p.config.interval_min)..=before];
    let pre: [f64; 3] = std::array::from_fn(|c| window.iter().map(|m| m.pcc_kw[c]).sum::<f64>() / window.len() as f64);
    let s = &main.minutes[snapshot];
    let (unmit, mit) = (total(s.unmitigated_pcc_kw), total(s.pcc_kw));
    let (bids, dispatch) = &main.dispatches[main.dispatch_at[snapshot]];
    let summary = Summary {
        attack_onset: onset.map(|m| fmt_time(p.time(m))),
        flag_time: main.flag_minute.map(|m| fmt_time(p.time(m))),
        mitigation_time: main.mitigation_minute.map(|m| fmt_time(p.time(m))),
        snapshot_time: fmt_time(p.time(snapshot)),
        pre_attack_pcc_kw: pre,
        pre_attack_total_kw: total(pre),
        nominal_total_kw: total(s.nominal_pcc_kw),
        unmitigated_total_kw: unmit,
        mitigated_total_kw: mit,
        reduction_pct: if unmit.abs() > 1e-12 { 100.0 * (unmit - mit) / unmit } else { 0.0 },
        curtailment_total_kw: dispatch.curtailment_kw(),
        energy_import_kwh: main.minutes.iter().map(|m| total(m.pcc_kw)).sum::<f64>() / 60.0,
        pv_snapshot: p
            .data
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| PvSnapshotRow {
                node_id: n.node_id,
                phase: n.phase,
                pv_kw: main.pv_measured[i][before],
                pv_forecast_kw: main.pv_fcst[i][before].0,
            })
            .collect(),
        curtailment: bids
            .iter()
            .zip(&dispatch.bids)
            .map(|(b, d)| CurtailmentRow {
                node_id: b.node_id,
                phase: b.phase,
                flexibility_kw: b.flexibility_kw,
                curtailment_kw: d.c_kw,
            })
            .collect(),
    };
    main.events.sort_by_key(|e| e.minute);
    Ok(SimulationResult {
        schema_version: SCHEMA_VERSION,
        config: p.config.clone(),
        day: p.time(0).date().to_string(),
        interval_min: p.config.interval_min,
        summary,
        events: main.events,
        coefficient_sets: main.coefficient_sets,
        intervals: main.intervals,
        minutes: main.minutes,
        detection,
    })
}

fn clone_pcc(t: &Twin) -> Twin {
    Twin {
        minutes: t.minutes.clone(),
        intervals: Vec::new(),
        events: Vec::new(),
        coefficient_sets: Vec::new(),
        pv_measured: Vec::new(),
        pv_fcst: Vec::new(),
        demand_fcst: Vec::new(),
        flag_minute: None,
        mitigation_minute: None,
        dispatch_at: Vec::new(),
        dispatches: Vec::new(),
    }
}

/// Prepares and runs a scenario.
pub fn run_timeline(config: &ScenarioConfig) -> Result<SimulationResult, ScenarioError> {
    run_prepared(&prepare(config)?)
}

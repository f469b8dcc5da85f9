use chrono::NaiveDateTime;

use super::{AttackEvent, ScenarioError};
use crate::cli_io::TimeSeriesSet;
use crate::detect::{detect_feeder, detect_node, node_residuals, DetectionReport, Thresholds};
use crate::forecast::{forecast_features, predict_quantiles, ForecastModels, Horizon, QuantileForecast, Target};

fn concat(parts: Vec<QuantileForecast>) -> QuantileForecast {
    let mut it = parts.into_iter();
    let mut first = it.next().expect("at least one refresh");
    for p in it {
        first.values.extend(p.values);
    }
    first
}

/// Detection over the last full day of stored 1-minute measurements, with
/// hour-ahead forecasts reissued every `refresh_min` minutes. The feeder
/// check compares the summed net load per phase with the summed median
/// forecasts, so it needs no network and carries no loss allowance.
pub fn detect_offline(
    models: &ForecastModels,
    data: &TimeSeriesSet,
    th: &Thresholds,
    refresh_min: usize,
) -> Result<DetectionReport, ScenarioError> {
    if refresh_min == 0 || refresh_min > 60 || 1440 % refresh_min != 0 {
        return Err(ScenarioError::Config(format!(
            "refresh interval must divide the day and be ≤ 60, got {refresh_min}"
        )));
    }
    if data.resolution_min != 1 {
        return Err(ScenarioError::Config(format!("need 1-minute data, got {} min", data.resolution_min)));
    }
    let n = data.len() / 1440 * 1440;
    if n < 2 * 1440 {
        return Err(ScenarioError::Config("need at least two full days of measurements".into()));
    }
    let day = n - 1440;
    let times: Vec<NaiveDateTime> = (day..n).map(|i| data.timestamp(i)).collect();
    let mut node_flags = Vec::new();
    let mut demand_fc = Vec::with_capacity(data.nodes.len());
    let mut pv_fc = Vec::with_capacity(data.nodes.len());
    let mut pcc = vec![[0.0; 3]; 1440];
    for node in &data.nodes {
        for (j, p) in pcc.iter_mut().enumerate() {
            p[node.phase.index()] += node.demand_kw[day + j] - node.pv_kw[day + j];
        }
        for t in [Target::Demand, Target::Pv] {
            let series = crate::forecast::series_of(node, t);
            let model = models.get(Horizon::HourAhead, t);
            let mut parts = Vec::with_capacity(1440 / refresh_min);
            for origin in (day..n).step_by(refresh_min) {
                let x = forecast_features(&series[..origin], data.start, Horizon::HourAhead, t)?;
                let mut f = predict_quantiles(model, &x, Horizon::HourAhead, t, node.node_id)?;
                f.values.truncate(refresh_min);
                parts.push(f);
            }
            let fc = concat(parts);
            let res = node_residuals(&fc, &series[day..n], &times)?;
            let flags = detect_node(&res, th.k, th.m, th.scale_floor_kw)?;
            if !flags.flags.is_empty() {
                node_flags.push(flags);
            }
            match t {
                Target::Demand => demand_fc.push(fc),
                Target::Pv => pv_fc.push(fc),
            }
        }
    }
    let feeder = detect_feeder(&pcc, &demand_fc, &pv_fc, &vec![0.0; 1440], th.theta_kw, th.m, &times)?;
    Ok(DetectionReport {
        thresholds: th.clone(),
        node_flags,
        feeder_flag: feeder.flag,
        feeder_mismatch_kw: feeder.mismatch_kw,
    })
}

/// Copy of `data` with the configured attacks applied to the last full day,
/// as the measurements would record them.
pub fn with_attacks(data: &TimeSeriesSet, attacks: &[AttackEvent]) -> Result<TimeSeriesSet, ScenarioError> {
    if data.resolution_min != 1 {
        return Err(ScenarioError::Config(format!("need 1-minute data, got {} min", data.resolution_min)));
    }
    let n = data.len() / 1440 * 1440;
    if n < 1440 {
        return Err(ScenarioError::Config("need at least one full day of measurements".into()));
    }
    let day = n - 1440;
    let equipped: Vec<u32> =
        data.nodes.iter().filter(|s| s.pv_kw.iter().any(|v| *v > 0.0)).map(|s| s.node_id).collect();
    let mut out = data.clone();
    for a in attacks {
        let targets = a.targets(&equipped)?;
        if let Some(id) = targets.iter().find(|id| !equipped.contains(id)) {
            return Err(ScenarioError::Attack(format!("node {id} has no PV")));
        }
        for s in out.nodes.iter_mut().filter(|s| targets.contains(&s.node_id)) {
            for minute in 0..1440u32 {
                if a.active_at(minute) {
                    s.pv_kw[day + minute as usize] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

//! Two-level threshold detection on forecast residuals.
//!
//! Node level: a residual is anomalous when it exceeds `k` times the
//! forecast's q90 − q10 spread for `m` consecutive steps. Feeder level: the
//! measured PCC import is compared with the aggregated median forecasts plus
//! expected losses, and an absolute mismatch above `θ` for `m` consecutive
//! steps raises the feeder flag.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{QuantileForecast, Target, MEDIAN};

pub const DEFAULT_K: f64 = 4.0;
pub const DEFAULT_M: usize = 3;
pub const DEFAULT_THETA_KW: f64 = 12.5;
pub const SCALE_FLOOR_KW: f64 = 0.05;

const Q10: usize = 0;
const Q90: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("misaligned series: {0}")]
    Misaligned(String),
    #[error("invalid threshold: {0}")]
    Threshold(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub k: f64,
    pub m: usize,
    pub theta_kw: f64,
    pub scale_floor_kw: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { k: DEFAULT_K, m: DEFAULT_M, theta_kw: DEFAULT_THETA_KW, scale_floor_kw: SCALE_FLOOR_KW }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSeries {
    pub node_id: u32,
    pub target: Target,
    pub times: Vec<NaiveDateTime>,
    /// measured − median forecast (kW).
    pub residual: Vec<f64>,
    /// q90 − q10 of the forecast (kW).
    pub scale: Vec<f64>,
}

/// One run of at least `m` consecutive exceedances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    /// Step at which the run reached `m` exceedances.
    pub onset_index: usize,
    pub onset: Option<String>,
    /// Length of the whole run.
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeFlags {
    pub node_id: u32,
    pub target: Target,
    pub flags: Vec<Flag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeederDetection {
    pub flag: Option<Flag>,
    pub mismatch_kw: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub thresholds: Thresholds,
    pub node_flags: Vec<NodeFlags>,
    pub feeder_flag: Option<Flag>,
    pub feeder_mismatch_kw: Vec<f64>,
}

fn fmt_time(t: NaiveDateTime) -> String {
    t.format(crate::cli_io::TIMESTAMP_FORMAT).to_string()
}

/// Residuals of `measured` against a forecast over the same steps.
pub fn node_residuals(
    forecast: &QuantileForecast,
    measured: &[f64],
    times: &[NaiveDateTime],
) -> Result<ResidualSeries, DetectError> {
    if forecast.values.len() != measured.len() || times.len() != measured.len() {
        return Err(DetectError::Misaligned(format!(
            "forecast {} steps, measured {}, times {}",
            forecast.values.len(),
            measured.len(),
            times.len()
        )));
    }
    let residual = forecast.values.iter().zip(measured).map(|(q, y)| y - q[MEDIAN]).collect();
    let scale = forecast.values.iter().map(|q| (q[Q90] - q[Q10]).max(0.0)).collect();
    Ok(ResidualSeries { node_id: forecast.node_id, target: forecast.target, times: times.to_vec(), residual, scale })
}

/// Runs of at least `m` consecutive `true` values.
pub fn persistent_runs(exceed: &[bool], m: usize) -> Vec<Flag> {
    let m = m.max(1);
    let mut out = Vec::new();
    let mut start = None;
    for (t, &e) in exceed.iter().chain(std::iter::once(&false)).enumerate() {
        match (e, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                if t - s >= m {
                    out.push(Flag { onset_index: s + m - 1, onset: None, steps: t - s });
                }
                start = None;
            }
            _ => {}
        }
    }
    out
}

fn with_times(mut flags: Vec<Flag>, times: &[NaiveDateTime]) -> Vec<Flag> {
    for f in &mut flags {
        f.onset = times.get(f.onset_index).map(|t| fmt_time(*t));
    }
    flags
}

/// Node-level flags: `|r_t| > k · max(scale_t, floor)` for `m` steps.
pub fn detect_node(res: &ResidualSeries, k: f64, m: usize, scale_floor: f64) -> Result<NodeFlags, DetectError> {
    if !(k > 0.0) || m == 0 {
        return Err(DetectError::Threshold(format!("need k > 0 and m ≥ 1, got k={k}, m={m}")));
    }
    let exceed: Vec<bool> =
        res.residual.iter().zip(&res.scale).map(|(r, s)| r.abs() > k * s.max(scale_floor)).collect();
    Ok(NodeFlags {
        node_id: res.node_id,
        target: res.target,
        flags: with_times(persistent_runs(&exceed, m), &res.times),
    })
}

/// Feeder check against an explicit expected import series (kW, losses
/// included).
pub fn detect_feeder_expected(
    pcc_measured: &[[f64; 3]],
    expected_kw: &[f64],
    theta: f64,
    m: usize,
    times: &[NaiveDateTime],
) -> Result<FeederDetection, DetectError> {
    if pcc_measured.len() != expected_kw.len() {
        return Err(DetectError::Misaligned(format!(
            "pcc {} steps, expected {}",
            pcc_measured.len(),
            expected_kw.len()
        )));
    }
    if theta.is_nan() || theta < 0.0 || m == 0 {
        return Err(DetectError::Threshold(format!("need θ ≥ 0 and m ≥ 1, got θ={theta}, m={m}")));
    }
    let mismatch_kw: Vec<f64> = pcc_measured.iter().zip(expected_kw).map(|(p, e)| p.iter().sum::<f64>() - e).collect();
    let exceed: Vec<bool> = mismatch_kw.iter().map(|x| x.abs() > theta).collect();
    let flag = with_times(persistent_runs(&exceed, m), times).into_iter().next();
    Ok(FeederDetection { flag, mismatch_kw })
}

/// Feeder check against Σ median demand − Σ median PV + loss allowance.
pub fn detect_feeder(
    pcc_measured: &[[f64; 3]],
    demand: &[QuantileForecast],
    pv: &[QuantileForecast],
    loss_allowance: &[f64],
    theta: f64,
    m: usize,
    times: &[NaiveDateTime],
) -> Result<FeederDetection, DetectError> {
    let n = pcc_measured.len();
    if loss_allowance.len() != n {
        return Err(DetectError::Misaligned(format!("pcc {n} steps, loss allowance {}", loss_allowance.len())));
    }
    let mut expected = loss_allowance.to_vec();
    for (fs, sign) in [(demand, 1.0), (pv, -1.0)] {
        for f in fs {
            if f.values.len() != n {
                return Err(DetectError::Misaligned(format!(
                    "forecast for node {} has {} steps, pcc {n}",
                    f.node_id,
                    f.values.len()
                )));
            }
            for (e, q) in expected.iter_mut().zip(&f.values) {
                *e += sign * q[MEDIAN];
            }
        }
    }
    detect_feeder_expected(pcc_measured, &expected, theta, m, times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::Horizon;
    use chrono::{Duration, NaiveDate};

    fn times(n: usize) -> Vec<NaiveDateTime> {
        let t0 = NaiveDate::from_ymd_opt(2022, 7, 3).unwrap().and_hms_opt(12, 0, 0).unwrap();
        (0..n).map(|i| t0 + Duration::minutes(i as i64)).collect()
    }

    fn flat_forecast(median: f64, spread: f64, n: usize) -> QuantileForecast {
        QuantileForecast {
            node_id: 4,
            target: Target::Pv,
            horizon: Horizon::HourAhead,
            values: vec![
                vec![median - spread, median - spread / 2.0, median, median + spread / 2.0, median + spread];
                n
            ],
        }
    }

    #[test]
    fn residual_arithmetic() {
        let f = flat_forecast(3.0, 0.5, 4);
        let r = node_residuals(&f, &[3.0, 3.0, 0.0, 3.0], &times(4)).unwrap();
        assert_eq!(r.residual, vec![0.0, 0.0, -3.0, 0.0]);
        assert_eq!(r.scale, vec![1.0; 4]);
        assert!(node_residuals(&f, &[1.0], &times(1)).is_err());
    }

    #[test]
    fn zero_residuals_never_flag() {
        let f = flat_forecast(1.0, 0.0, 10);
        let r = node_residuals(&f, &[1.0; 10], &times(10)).unwrap();
        assert!(detect_node(&r, 4.0, 3, SCALE_FLOOR_KW).unwrap().flags.is_empty());
    }

    #[test]
    fn onset_is_mth_exceedance() {
        let mut residual = vec![0.0; 12];
        for r in &mut residual[5..8] {
            *r = -2.0;
        }
        let res = ResidualSeries { node_id: 1, target: Target::Pv, times: times(12), residual, scale: vec![0.1; 12] };
        let f = detect_node(&res, 4.0, 3, SCALE_FLOOR_KW).unwrap();
        assert_eq!(f.flags.len(), 1);
        assert_eq!(f.flags[0].onset_index, 7);
        assert_eq!(f.flags[0].steps, 3);
        assert_eq!(f.flags[0].onset.as_deref(), Some("2022-07-03T12:07:00"));
        // one step short of m
        let short = detect_node(&res, 4.0, 4, SCALE_FLOOR_KW).unwrap();
        assert!(short.flags.is_empty());
    }

    #[test]
    fn single_spike_is_ignored() {
        let mut residual = vec![0.0; 6];
        residual[2] = 10.0;
        let res = ResidualSeries { node_id: 1, target: Target::Demand, times: times(6), residual, scale: vec![0.0; 6] };
        assert!(detect_node(&res, 4.0, 3, SCALE_FLOOR_KW).unwrap().flags.is_empty());
        assert_eq!(detect_node(&res, 4.0, 1, SCALE_FLOOR_KW).unwrap().flags.len(), 1);
    }

    #[test]
    fn degenerate_scale_uses_floor() {
        let res = ResidualSeries {
            node_id: 1,
            target: Target::Pv,
            times: times(3),
            residual: vec![0.19; 3],
            scale: vec![0.0; 3],
        };
        assert!(detect_node(&res, 4.0, 3, 0.05).unwrap().flags.is_empty());
        let res = ResidualSeries { residual: vec![0.21; 3], ..res };
        assert_eq!(detect_node(&res, 4.0, 3, 0.05).unwrap().flags.len(), 1);
    }

    #[test]
    fn bad_thresholds_rejected() {
        let res =
            ResidualSeries { node_id: 1, target: Target::Pv, times: times(1), residual: vec![0.0], scale: vec![0.0] };
        assert!(detect_node(&res, 0.0, 3, 0.05).is_err());
        assert!(detect_node(&res, 4.0, 0, 0.05).is_err());
        assert!(detect_feeder_expected(&[[0.0; 3]], &[0.0], -1.0, 3, &times(1)).is_err());
    }

    #[test]
    fn feeder_matches_forecast_plus_allowance() {
        let n = 8;
        let demand = vec![flat_forecast(2.0, 0.2, n), flat_forecast(1.0, 0.2, n)];
        let pv = vec![flat_forecast(0.5, 0.1, n)];
        let loss = vec![0.3; n];
        let pcc = vec![[1.0, 1.0, 0.8]; n];
        let d = detect_feeder(&pcc, &demand, &pv, &loss, 0.01, 1, &times(n)).unwrap();
        assert!(d.flag.is_none());
        assert!(d.mismatch_kw.iter().all(|x| x.abs() < 1e-12));
        let inf = detect_feeder(&vec![[100.0; 3]; n], &demand, &pv, &loss, f64::INFINITY, 1, &times(n)).unwrap();
        assert!(inf.flag.is_none());
    }

    #[test]
    fn feeder_flag_needs_persistence() {
        let expected = vec![5.0; 10];
        let mut pcc = vec![[5.0 / 3.0; 3]; 10];
        for p in &mut pcc[4..] {
            *p = [15.0; 3];
        }
        let d = detect_feeder_expected(&pcc, &expected, 12.5, 3, &times(10)).unwrap();
        assert_eq!(d.flag.unwrap().onset_index, 6);
    }
}

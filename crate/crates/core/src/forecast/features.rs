use chrono::{Datelike, Duration, NaiveDateTime, Timelike};

use super::{ForecastError, Horizon, Target};
use crate::solar::clear_sky;

/// Feature layout: three lags before the origin, the daily lag of the target
/// step, hour-of-day and day-of-week encodings, clear-sky output, clear-sky
/// scaled by the observed output-to-clear-sky ratio over a long window (last
/// week for day-ahead, last day for hour-ahead), clear-sky scaled by the
/// difference between the short-window ratio (last day or last 15 minutes)
/// and the long-window one, the last lag scaled by the fraction of the
/// horizon elapsed, and a bias. Lags, ratios and targets are divided
/// by a per-client scale so one shared model fits prosumers of any size.
pub const N_FEATURES: usize = 13;
/// Column of the clear-sky feature.
pub(crate) const CLEAR_SKY: usize = 8;

#[derive(Clone, Debug)]
pub struct LocalDataset {
    pub client_id: String,
    pub horizon: Horizon,
    pub target: Target,
    pub n_features: usize,
    /// Row-major feature matrix.
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl LocalDataset {
    pub fn new(client_id: impl Into<String>, n_features: usize, features: Vec<f64>, targets: Vec<f64>) -> Self {
        assert_eq!(features.len(), n_features * targets.len(), "features and targets misaligned");
        LocalDataset {
            client_id: client_id.into(),
            horizon: Horizon::DayAhead,
            target: Target::Demand,
            n_features,
            features,
            targets,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.targets.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Subset of rows `[lo, hi)`.
    pub fn slice(&self, lo: usize, hi: usize) -> LocalDataset {
        LocalDataset {
            client_id: self.client_id.clone(),
            horizon: self.horizon,
            target: self.target,
            n_features: self.n_features,
            features: self.features[lo * self.n_features..hi * self.n_features].to_vec(),
            targets: self.targets[lo..hi].to_vec(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct DatasetOptions {
    /// Steps between consecutive forecast origins.
    pub origin_stride: usize,
    /// Phase of the origin grid in steps (e.g. 0 = origins at midnight for
    /// day-ahead when the series starts at midnight).
    pub origin_offset: usize,
}

impl DatasetOptions {
    pub fn for_horizon(h: Horizon) -> Self {
        match h {
            Horizon::DayAhead => DatasetOptions { origin_stride: 96, origin_offset: 0 },
            // a stride coprime with the day so origins sweep every time of day
            Horizon::HourAhead => DatasetOptions { origin_stride: 367, origin_offset: 0 },
        }
    }
}

fn ratio_windows(h: Horizon) -> (usize, usize) {
    match h {
        Horizon::DayAhead => (96, 7 * 96),
        Horizon::HourAhead => (15, 1440),
    }
}

fn time_at(start: NaiveDateTime, horizon: Horizon, idx: usize) -> NaiveDateTime {
    start + Duration::minutes(horizon.step_minutes() * idx as i64)
}

/// Observed output per unit of clear-sky output over the short and long
/// windows before the origin. Windows are truncated at the series start.
fn clearness_ratios(series: &[f64], origin: usize, start: NaiveDateTime, horizon: Horizon) -> (f64, f64) {
    let (short, long) = ratio_windows(horizon);
    let long = long.min(origin);
    let short = short.min(long);
    let (mut obs, mut ref_cs) = (0.0, 0.0);
    let mut short_ratio = 0.0;
    for (i, k) in (origin - long..origin).rev().enumerate() {
        obs += series[k];
        ref_cs += clear_sky(time_at(start, horizon, k));
        if i + 1 == short {
            short_ratio = obs / ref_cs.max(0.1 * short as f64);
        }
    }
    let long_ratio = obs / ref_cs.max(0.1 * long as f64);
    (short_ratio.clamp(0.0, 20.0), long_ratio.clamp(0.0, 20.0))
}

/// Floor on the per-client scale (kW, or kW per unit clear-sky output).
const SCALE_FLOOR: f64 = 0.01;

/// Normalizing scale at an origin: mean output over the long window for
/// demand, the long-window output-to-clear-sky ratio for PV.
fn client_scale(series: &[f64], origin: usize, horizon: Horizon, target: Target, ratio: (f64, f64)) -> f64 {
    let s = match target {
        Target::Pv => ratio.1,
        Target::Demand => {
            let long = ratio_windows(horizon).1.min(origin);
            series[origin - long..origin].iter().sum::<f64>() / long as f64
        }
    };
    s.max(SCALE_FLOOR)
}

/// Feature rows of one forecast and the scale that maps model outputs back
/// to kW.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRows {
    pub rows: Vec<Vec<f64>>,
    pub scale: f64,
}

#[allow(clippy::too_many_arguments)]
fn row_into(
    out: &mut Vec<f64>,
    series: &[f64],
    origin: usize,
    h: usize,
    ratio: (f64, f64),
    scale: f64,
    start: NaiveDateTime,
    horizon: Horizon,
) {
    use std::f64::consts::TAU;
    let p = horizon.daily_lag();
    let t = origin + h;
    let ts = time_at(start, horizon, t);
    let hour = ts.hour() as f64 + ts.minute() as f64 / 60.0;
    let wd = ts.weekday().num_days_from_monday() as f64;
    let cs = clear_sky(ts);
    out.extend_from_slice(&[
        series[origin - 1] / scale,
        series[origin - 2] / scale,
        series[origin - 3] / scale,
        series[t - p] / scale,
        (TAU * hour / 24.0).sin(),
        (TAU * hour / 24.0).cos(),
        (TAU * wd / 7.0).sin(),
        (TAU * wd / 7.0).cos(),
        cs,
        cs * ratio.1 / scale,
        cs * (ratio.0 - ratio.1) / scale,
        series[origin - 1] / scale * h as f64 / horizon.steps() as f64,
        1.0,
    ]);
}

/// Feature rows for a forecast issued right after `history` ends.
/// `start` is the timestamp of `history[0]`.
pub fn forecast_features(
    history: &[f64],
    start: NaiveDateTime,
    horizon: Horizon,
    target: Target,
) -> Result<FeatureRows, ForecastError> {
    let origin = history.len();
    let p = horizon.daily_lag();
    if origin < p.max(3) {
        return Err(ForecastError::History(format!("need at least {p} steps before the origin, have {origin}")));
    }
    let ratio = clearness_ratios(history, origin, start, horizon);
    let scale = client_scale(history, origin, horizon, target, ratio);
    let mut rows = Vec::with_capacity(horizon.steps());
    for h in 0..horizon.steps() {
        let mut r = Vec::with_capacity(N_FEATURES);
        row_into(&mut r, history, origin, h, ratio, scale, start, horizon);
        rows.push(r);
    }
    Ok(FeatureRows { rows, scale })
}

/// Supervised samples from one client's series at the horizon resolution.
/// Every origin with a full day of history and a full horizon ahead is used.
pub fn build_dataset(
    client_id: impl Into<String>,
    series: &[f64],
    start: NaiveDateTime,
    horizon: Horizon,
    target: Target,
    opts: &DatasetOptions,
) -> Result<LocalDataset, ForecastError> {
    let client_id = client_id.into();
    let p = horizon.daily_lag();
    let steps = horizon.steps();
    let stride = opts.origin_stride.max(1);
    let mut origin = p.max(3);
    let rem = (origin + stride - opts.origin_offset % stride) % stride;
    if rem != 0 {
        origin += stride - rem;
    }
    let mut features = Vec::new();
    let mut targets = Vec::new();
    while origin + steps <= series.len() {
        let ratio = clearness_ratios(series, origin, start, horizon);
        let scale = client_scale(series, origin, horizon, target, ratio);
        for h in 0..steps {
            row_into(&mut features, series, origin, h, ratio, scale, start, horizon);
            targets.push(series[origin + h] / scale);
        }
        origin += stride;
    }
    if targets.is_empty() {
        return Err(ForecastError::EmptyDataset(client_id));
    }
    Ok(LocalDataset { client_id, horizon, target, n_features: N_FEATURES, features, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn start() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2022, 1, 3).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    #[test]
    fn features_use_only_data_before_origin() {
        let series: Vec<f64> = (0..96 * 3).map(|i| i as f64).collect();
        let origin = 96 * 2;
        let rows = forecast_features(&series[..origin], start(), Horizon::DayAhead, Target::Demand).unwrap();
        assert_eq!(rows.rows.len(), 96);
        // mean of the (truncated) week before the origin
        assert_eq!(rows.scale, (origin - 1) as f64 / 2.0);
        for (h, r) in rows.rows.iter().enumerate() {
            assert_eq!(r.len(), N_FEATURES);
            assert!((r[0] * rows.scale - (origin - 1) as f64).abs() < 1e-9);
            assert!((r[3] * rows.scale - (origin + h - 96) as f64).abs() < 1e-9);
        }
        // perturbing data at or after the origin cannot change features
        let mut other = series.clone();
        for v in &mut other[origin..] {
            *v = -1.0;
        }
        assert_eq!(rows, forecast_features(&other[..origin], start(), Horizon::DayAhead, Target::Demand).unwrap());
    }

    #[test]
    fn dataset_origins_are_aligned() {
        let series = vec![1.0; 96 * 5];
        let d = build_dataset(
            "c",
            &series,
            start(),
            Horizon::DayAhead,
            Target::Demand,
            &DatasetOptions::for_horizon(Horizon::DayAhead),
        )
        .unwrap();
        // origins at days 1, 2, 3, 4
        assert_eq!(d.sample_count(), 4 * 96);
        assert_eq!(d.features.len(), 4 * 96 * N_FEATURES);
        let short = build_dataset(
            "c",
            &series[..100],
            start(),
            Horizon::DayAhead,
            Target::Demand,
            &DatasetOptions::for_horizon(Horizon::DayAhead),
        );
        assert!(matches!(short, Err(ForecastError::EmptyDataset(_))));
    }
}

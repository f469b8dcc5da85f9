//! Per-prosumer quantile forecasting trained with federated averaging.
//!
//! Four products are trained: day-ahead and hour-ahead, each for demand and
//! PV. The shared model is a linear quantile regressor with one head per
//! quantile level over lag, calendar and clear-sky features.

mod features;
mod models;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{build_dataset, forecast_features, DatasetOptions, FeatureRows, LocalDataset, N_FEATURES};
pub(crate) use models::series_of;
pub use models::{client_datasets, evaluate_day, train_models, ForecastModels, ProductLog, ProductScore, PRODUCTS};
pub use train::{
    dataset_loss, expanding_window_splits, fed_avg, local_train, local_train_with, loss_gradient, train_federated,
    write_round_log, FederatedConfig, FederatedRun, RoundLog, TrainOptions,
};

pub const QUANTILES: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];
/// Index of the median head in [`QUANTILES`].
pub const MEDIAN: usize = 2;
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("quantile level must lie in (0, 1), got {0}")]
    BadQuantile(f64),
    #[error("empty dataset for client {0}")]
    EmptyDataset(String),
    #[error("no updates to average")]
    NoUpdates,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite training loss for client {client} at epoch {epoch}: loss={loss}, grad norm={grad_norm}")]
    NonFinite { client: String, epoch: usize, loss: f64, grad_norm: f64 },
    #[error("not enough history: {0}")]
    History(String),
    #[error("client {client}: {source}")]
    Client {
        client: String,
        #[source]
        source: Box<ForecastError>,
    },
    #[error("model file {path}: {reason}")]
    ModelFile { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Demand,
    Pv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// 96 steps of 15 minutes.
    DayAhead,
    /// 60 steps of 1 minute.
    HourAhead,
}

impl Horizon {
    pub fn steps(self) -> usize {
        match self {
            Horizon::DayAhead => 96,
            Horizon::HourAhead => 60,
        }
    }

    pub fn step_minutes(self) -> i64 {
        match self {
            Horizon::DayAhead => 15,
            Horizon::HourAhead => 1,
        }
    }

    /// Number of steps in one day at this resolution.
    pub fn daily_lag(self) -> usize {
        (24 * 60 / self.step_minutes()) as usize
    }
}

/// Pinball (quantile) loss of a single prediction.
pub fn pinball_loss(pred: f64, actual: f64, q: f64) -> Result<f64, ForecastError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(ForecastError::BadQuantile(q));
    }
    Ok(if actual >= pred { q * (actual - pred) } else { (1.0 - q) * (pred - actual) })
}

/// Weights of a linear quantile regressor, stored head-major
/// (`weights[h * n_features + j]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub version: u32,
    pub quantiles: Vec<f64>,
    pub n_features: usize,
    pub weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(n_features: usize) -> Self {
        ModelParams {
            version: PARAMS_VERSION,
            quantiles: QUANTILES.to_vec(),
            n_features,
            weights: vec![0.0; QUANTILES.len() * n_features],
        }
    }

    pub fn n_heads(&self) -> usize {
        self.quantiles.len()
    }

    pub fn head(&self, h: usize) -> &[f64] {
        &self.weights[h * self.n_features..(h + 1) * self.n_features]
    }

    /// Raw (unsorted) head outputs for one feature row.
    pub fn eval_row(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_heads()).map(|h| self.head(h).iter().zip(x).map(|(w, v)| w * v).sum()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ForecastError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("params serialize");
        std::fs::write(path, text + "\n")
            .map_err(|e| ForecastError::ModelFile { path: path.display().to_string(), reason: e.to_string() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ForecastError> {
        let path = path.as_ref();
        let err = |reason: String| ForecastError::ModelFile { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let p: ModelParams = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if p.version != PARAMS_VERSION {
            return Err(err(format!("unsupported version {}", p.version)));
        }
        if p.weights.len() != p.quantiles.len() * p.n_features {
            return Err(err("weight count does not match heads × features".into()));
        }
        Ok(p)
    }
}

/// Quantile forecast for one node and product; `values[t][k]` is the
/// `QUANTILES[k]` level at step `t`, in kW.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileForecast {
    pub node_id: u32,
    pub target: Target,
    pub horizon: Horizon,
    pub values: Vec<Vec<f64>>,
}

impl QuantileForecast {
    pub fn median(&self) -> Vec<f64> {
        self.values.iter().map(|v| v[MEDIAN]).collect()
    }

    pub fn level(&self, k: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[k]).collect()
    }
}

/// Evaluates the model on each feature row, sorts heads per step, rescales
/// to kW and clips PV at zero.
pub fn predict_quantiles(
    params: &ModelParams,
    input: &FeatureRows,
    horizon: Horizon,
    target: Target,
    node_id: u32,
) -> Result<QuantileForecast, ForecastError> {
    let features = &input.rows;
    if features.len() != horizon.steps() {
        return Err(ForecastError::Dimension { expected: horizon.steps(), got: features.len() });
    }
    let mut values = Vec::with_capacity(features.len());
    for x in features {
        if x.len() != params.n_features {
            return Err(ForecastError::Dimension { expected: params.n_features, got: x.len() });
        }
        let mut out: Vec<f64> = params.eval_row(x).into_iter().map(|v| v * input.scale).collect();
        out.sort_by(|a, b| a.total_cmp(b));
        if target == Target::Pv {
            // no output with the sun below the horizon
            let dark = x.len() == N_FEATURES && x[features::CLEAR_SKY] <= 0.0;
            for v in &mut out {
                *v = if dark { 0.0 } else { v.max(0.0) };
            }
        }
        values.push(out);
    }
    Ok(QuantileForecast { node_id, target, horizon, values })
}

/// Persistence forecast: day-ahead repeats the previous day, hour-ahead
/// holds the last observation. `history` ends just before the origin.
pub fn persistence_forecast(history: &[f64], horizon: Horizon) -> Result<Vec<f64>, ForecastError> {
    let steps = horizon.steps();
    match horizon {
        Horizon::DayAhead => {
            let p = horizon.daily_lag();
            if history.len() < p {
                return Err(ForecastError::History(format!("need {p} steps, have {}", history.len())));
            }
            Ok(history[history.len() - p..history.len() - p + steps].to_vec())
        }
        Horizon::HourAhead => {
            let last = *history.last().ok_or_else(|| ForecastError::History("empty history".into()))?;
            Ok(vec![last; steps])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n_features: usize, steps: usize, scale: f64) -> FeatureRows {
        FeatureRows { rows: vec![vec![1.0; n_features]; steps], scale }
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(10.0, 12.0, 0.5).unwrap(), 1.0);
        for q in QUANTILES {
            assert_eq!(pinball_loss(10.0, 10.0, q).unwrap(), 0.0);
        }
        assert!((pinball_loss(12.0, 10.0, 0.9).unwrap() - 0.2).abs() < 1e-15);
        assert!(pinball_loss(1.0, 2.0, 1.0).is_err());
        assert!(pinball_loss(1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn zero_model_predicts_zero() {
        let p = ModelParams::zeros(N_FEATURES);
        let x = FeatureRows { rows: vec![vec![1.0; N_FEATURES]; 96], scale: 1.0 };
        let f = predict_quantiles(&p, &x, Horizon::DayAhead, Target::Demand, 3).unwrap();
        assert_eq!(f.values.len(), 96);
        assert!(f.values.iter().flatten().all(|v| *v == 0.0));
        let x = FeatureRows { rows: vec![vec![1.0; N_FEATURES]; 60], scale: 1.0 };
        let f = predict_quantiles(&p, &x, Horizon::HourAhead, Target::Pv, 3).unwrap();
        assert_eq!(f.values.len(), 60);
    }

    #[test]
    fn crossing_heads_are_sorted_and_pv_clipped() {
        let mut p = ModelParams::zeros(1);
        p.weights = vec![3.0, -1.0, 2.0, 0.5, -4.0];
        let f = predict_quantiles(&p, &rows(1, 60, 1.0), Horizon::HourAhead, Target::Pv, 0).unwrap();
        assert_eq!(f.values[0], vec![0.0, 0.0, 0.5, 2.0, 3.0]);
        let f = predict_quantiles(&p, &rows(1, 60, 2.0), Horizon::HourAhead, Target::Demand, 0).unwrap();
        assert_eq!(f.values[0], vec![-8.0, -2.0, 1.0, 4.0, 6.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = ModelParams::zeros(4);
        assert!(predict_quantiles(&p, &rows(3, 60, 1.0), Horizon::HourAhead, Target::Pv, 0).is_err());
        assert!(predict_quantiles(&p, &rows(4, 59, 1.0), Horizon::HourAhead, Target::Pv, 0).is_err());
    }

    #[test]
    fn persistence_baselines() {
        let h: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let da = persistence_forecast(&h, Horizon::DayAhead).unwrap();
        assert_eq!(da[0], 104.0);
        assert_eq!(da.len(), 96);
        let ha = persistence_forecast(&h, Horizon::HourAhead).unwrap();
        assert!(ha.iter().all(|v| *v == 199.0));
    }

    #[test]
    fn params_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ModelParams::zeros(3);
        p.weights[4] = 0.125;
        let path = dir.path().join("m.json");
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
    }
}

use std::path::Path;

use serde::Serialize;

use super::{
    build_dataset, forecast_features, persistence_forecast, pinball_loss, predict_quantiles, train_federated,
    DatasetOptions, FederatedConfig, ForecastError, Horizon, LocalDataset, ModelParams, RoundLog, Target, MEDIAN,
};
use crate::cli_io::{NodeSeries, TimeSeriesSet};

pub const PRODUCTS: [(Horizon, Target); 4] = [
    (Horizon::DayAhead, Target::Demand),
    (Horizon::DayAhead, Target::Pv),
    (Horizon::HourAhead, Target::Demand),
    (Horizon::HourAhead, Target::Pv),
];

fn product_name(h: Horizon, t: Target) -> &'static str {
    match (h, t) {
        (Horizon::DayAhead, Target::Demand) => "day_ahead_demand",
        (Horizon::DayAhead, Target::Pv) => "day_ahead_pv",
        (Horizon::HourAhead, Target::Demand) => "hour_ahead_demand",
        (Horizon::HourAhead, Target::Pv) => "hour_ahead_pv",
    }
}

pub(crate) fn series_of(n: &NodeSeries, t: Target) -> &[f64] {
    match t {
        Target::Demand => &n.demand_kw,
        Target::Pv => &n.pv_kw,
    }
}

/// The four global models.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastModels {
    pub day_ahead_demand: ModelParams,
    pub day_ahead_pv: ModelParams,
    pub hour_ahead_demand: ModelParams,
    pub hour_ahead_pv: ModelParams,
}

impl ForecastModels {
    pub fn get(&self, h: Horizon, t: Target) -> &ModelParams {
        match (h, t) {
            (Horizon::DayAhead, Target::Demand) => &self.day_ahead_demand,
            (Horizon::DayAhead, Target::Pv) => &self.day_ahead_pv,
            (Horizon::HourAhead, Target::Demand) => &self.hour_ahead_demand,
            (Horizon::HourAhead, Target::Pv) => &self.hour_ahead_pv,
        }
    }

    fn get_mut(&mut self, h: Horizon, t: Target) -> &mut ModelParams {
        match (h, t) {
            (Horizon::DayAhead, Target::Demand) => &mut self.day_ahead_demand,
            (Horizon::DayAhead, Target::Pv) => &mut self.day_ahead_pv,
            (Horizon::HourAhead, Target::Demand) => &mut self.hour_ahead_demand,
            (Horizon::HourAhead, Target::Pv) => &mut self.hour_ahead_pv,
        }
    }

    /// Writes one `<product>.json` file per model.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), ForecastError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)
            .map_err(|e| ForecastError::ModelFile { path: dir.display().to_string(), reason: e.to_string() })?;
        for (h, t) in PRODUCTS {
            self.get(h, t).save(dir.join(format!("{}.json", product_name(h, t))))?;
        }
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, ForecastError> {
        let dir = dir.as_ref();
        let load = |h, t| ModelParams::load(dir.join(format!("{}.json", product_name(h, t))));
        Ok(ForecastModels {
            day_ahead_demand: load(Horizon::DayAhead, Target::Demand)?,
            day_ahead_pv: load(Horizon::DayAhead, Target::Pv)?,
            hour_ahead_demand: load(Horizon::HourAhead, Target::Demand)?,
            hour_ahead_pv: load(Horizon::HourAhead, Target::Pv)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ProductLog {
    pub horizon: Horizon,
    pub target: Target,
    pub client_ids: Vec<String>,
    pub log: Vec<RoundLog>,
}

impl ProductLog {
    pub fn name(&self) -> &'static str {
        product_name(self.horizon, self.target)
    }
}

/// Builds each client's dataset for one product from 1-minute data; the
/// day-ahead products use 15-minute means.
pub fn client_datasets(data: &TimeSeriesSet, h: Horizon, t: Target) -> Result<Vec<LocalDataset>, ForecastError> {
    if data.resolution_min != 1 {
        return Err(ForecastError::History(format!("need 1-minute data, got {} min", data.resolution_min)));
    }
    let set = match h {
        Horizon::DayAhead => data.downsample(15),
        Horizon::HourAhead => data.clone(),
    };
    set.nodes
        .iter()
        .map(|n| {
            build_dataset(n.node_id.to_string(), series_of(n, t), set.start, h, t, &DatasetOptions::for_horizon(h))
        })
        .collect()
}

/// Trains all four products with federated averaging, one client per node
/// of `data`.
pub fn train_models(
    data: &TimeSeriesSet,
    cfg: &FederatedConfig,
) -> Result<(ForecastModels, Vec<ProductLog>), ForecastError> {
    let mut models = ForecastModels {
        day_ahead_demand: ModelParams::zeros(0),
        day_ahead_pv: ModelParams::zeros(0),
        hour_ahead_demand: ModelParams::zeros(0),
        hour_ahead_pv: ModelParams::zeros(0),
    };
    let mut logs = Vec::new();
    for (h, t) in PRODUCTS {
        let clients = client_datasets(data, h, t)?;
        let run = train_federated(&clients, cfg)?;
        *models.get_mut(h, t) = run.params;
        logs.push(ProductLog {
            horizon: h,
            target: t,
            client_ids: clients.iter().map(|c| c.client_id.clone()).collect(),
            log: run.log,
        });
    }
    Ok((models, logs))
}

/// Median pinball loss of the global model and of persistence on one day.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProductScore {
    pub horizon: Horizon,
    pub target: Target,
    pub model_loss: f64,
    pub persistence_loss: f64,
}

/// Scores every product on the day starting at 1-minute index `day_start`
/// of `data`: one day-ahead forecast issued at midnight and hour-ahead
/// forecasts issued on the hour.
pub fn evaluate_day(
    models: &ForecastModels,
    data: &TimeSeriesSet,
    day_start: usize,
) -> Result<Vec<ProductScore>, ForecastError> {
    if day_start % 1440 != 0 || day_start + 1440 > data.len() || day_start < 1440 {
        return Err(ForecastError::History(format!("day at index {day_start} not covered by {} steps", data.len())));
    }
    let quarter = data.downsample(15);
    let mut out = Vec::new();
    for (h, t) in PRODUCTS {
        let (set, origins): (&TimeSeriesSet, Vec<usize>) = match h {
            Horizon::DayAhead => (&quarter, vec![day_start / 15]),
            Horizon::HourAhead => (data, (0..24).map(|k| day_start + 60 * k).collect()),
        };
        let (mut model, mut pers, mut n) = (0.0, 0.0, 0usize);
        for node in &set.nodes {
            let s = series_of(node, t);
            for &o in &origins {
                let x = forecast_features(&s[..o], set.start, h, t)?;
                let f = predict_quantiles(models.get(h, t), &x, h, t, node.node_id)?;
                let b = persistence_forecast(&s[..o], h)?;
                for k in 0..h.steps() {
                    model += pinball_loss(f.values[k][MEDIAN], s[o + k], 0.5)?;
                    pers += pinball_loss(b[k], s[o + k], 0.5)?;
                    n += 1;
                }
            }
        }
        out.push(ProductScore {
            horizon: h,
            target: t,
            model_loss: model / n as f64,
            persistence_loss: pers / n as f64,
        });
    }
    Ok(out)
}

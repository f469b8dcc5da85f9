//! Federated forecasting, DER attack detection and market-based mitigation
//! on three-phase unbalanced LV feeders.
//!
//! The pipeline: per-prosumer quantile forecasters trained with federated
//! averaging ([`forecast`]) feed a two-level threshold detector ([`detect`]);
//! a local electricity market ([`market`]) cleared by a central or
//! distributed QP solver ([`optim`]) redispatches load flexibility once an
//! attack is flagged. [`scenario`] runs the 24-hour closed loop on top of the
//! network model ([`netmodel`]) and power flow ([`powerflow`]).

pub mod cli_io;
pub mod detect;
pub mod forecast;
pub mod market;
pub mod netmodel;
pub mod optim;
pub mod powerflow;
pub mod scenario;
pub mod solar;

use thiserror::Error;

/// Crate-level error; maps onto CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Network(#[from] netmodel::NetworkError),
    #[error(transparent)]
    PowerFlow(#[from] powerflow::PowerFlowError),
    #[error(transparent)]
    Forecast(#[from] forecast::ForecastError),
    #[error(transparent)]
    Detect(#[from] detect::DetectError),
    #[error(transparent)]
    Market(#[from] market::MarketError),
    #[error(transparent)]
    Optim(#[from] optim::OptimError),
    #[error(transparent)]
    Io(#[from] cli_io::CliIoError),
    #[error(transparent)]
    Scenario(#[from] scenario::ScenarioError),
}

impl Error {
    /// 1 validation, 2 solver failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Network(netmodel::NetworkError::Io { .. }) => 3,
            Error::Network(_) => 1,
            Error::PowerFlow(
                powerflow::PowerFlowError::Network(_) | powerflow::PowerFlowError::InvalidInjection(_),
            ) => 1,
            Error::PowerFlow(_) => 2,
            Error::Forecast(forecast::ForecastError::ModelFile { .. }) => 3,
            Error::Forecast(forecast::ForecastError::NonFinite { .. }) => 2,
            Error::Forecast(_) => 1,
            Error::Detect(_) => 1,
            Error::Market(market::MarketError::Solver(_) | market::MarketError::PowerFlow(_)) => 2,
            Error::Market(_) => 1,
            Error::Optim(
                optim::OptimError::Invalid(_) | optim::OptimError::NotConvex | optim::OptimError::Unowned(_),
            ) => 1,
            Error::Optim(_) => 2,
            Error::Io(cli_io::CliIoError::Io { .. }) => 3,
            Error::Io(_) => 1,
            Error::Scenario(
                scenario::ScenarioError::Interval { source, .. } | scenario::ScenarioError::Module(source),
            ) => source.exit_code(),
            Error::Scenario(_) => 1,
        }
    }
}

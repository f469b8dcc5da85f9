use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AttackEvent, ScenarioError};
use crate::cli_io::SynthParams;
use crate::detect::Thresholds;
use crate::market::SolverChoice;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Network file; the built-in 88-bus surrogate when absent.
    pub network: Option<PathBuf>,
    pub solver: SolverChoice,
    /// Market interval in minutes; measurements and detection run every minute.
    pub interval_min: usize,
    /// Standard deviation of Gaussian noise on the measured PCC (kW per phase).
    pub measurement_noise_kw: f64,
    pub data: DataConfig,
    pub forecast: ForecastConfig,
    pub detect: Thresholds,
    pub market: MarketConfig,
    pub mitigation: MitigationConfig,
    #[serde(rename = "attack")]
    pub attacks: Vec<AttackEvent>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 42,
            network: None,
            solver: SolverChoice::Central,
            interval_min: 15,
            measurement_noise_kw: 0.0,
            data: DataConfig::default(),
            forecast: ForecastConfig::default(),
            detect: Thresholds::default(),
            market: MarketConfig::default(),
            mitigation: MitigationConfig::default(),
            attacks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Synthesis parameters; `synth.start` is the first training day.
    pub synth: SynthParams,
    /// Number of prosumers whose data trains the forecasters.
    pub training_clients: usize,
    pub training_days: usize,
    /// Days of measurements kept before the simulated day.
    pub history_days: usize,
    /// 1-minute measurements whose last day is simulated, instead of
    /// synthetic data.
    pub timeseries: Option<PathBuf>,
    /// 1-minute training data, instead of synthetic data.
    pub training_timeseries: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synth: SynthParams::default(),
            training_clients: 12,
            training_days: 365,
            history_days: 7,
            timeseries: None,
            training_timeseries: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// Directory with trained models; training runs when absent.
    pub models_dir: Option<PathBuf>,
    pub rounds: usize,
    pub epochs_per_round: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig { models_dir: None, rounds: 20, epochs_per_round: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeScore {
    pub node: u32,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarketConfig {
    pub alpha: f64,
    pub beta: f64,
    pub xi: f64,
    pub mu_kw: f64,
    /// Resilience score of nodes not listed in `resilience`.
    pub default_resilience: f64,
    pub resilience: Vec<NodeScore>,
    /// Range of the downward flexibility offered, as a fraction of the
    /// forecast demand; drawn once per node.
    pub flex_range: (f64, f64),
    pub power_factor: f64,
    /// Price per kW imported at the PCC.
    pub import_price: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig {
            alpha: 0.01,
            beta: 1.0,
            xi: 0.1,
            mu_kw: 5e-4,
            default_resilience: 1.0,
            resilience: Vec::new(),
            flex_range: (0.2, 0.4),
            power_factor: 0.95,
            import_price: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Persistence {
    /// Mitigated setpoints only for the rest of the flagged interval.
    Interval,
    /// Until the attacked PV is measured again.
    UntilRecovered,
    RestOfDay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationConfig {
    pub enabled: bool,
    pub persistence: Persistence,
    /// Share of the day-ahead PV forecast that the attacked nodes must
    /// deliver again to count as recovered.
    pub recovery_fraction: f64,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        MitigationConfig { enabled: true, persistence: Persistence::UntilRecovered, recovery_fraction: 0.5 }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        if self.interval_min == 0 || 1440 % self.interval_min != 0 || self.interval_min > 60 {
            return bad(format!("interval_min must divide the day and be ≤ 60, got {}", self.interval_min));
        }
        if !(self.measurement_noise_kw >= 0.0) {
            return bad("measurement_noise_kw must be ≥ 0".into());
        }
        if self.data.history_days < 2 {
            return bad("history_days must be ≥ 2".into());
        }
        if self.data.training_clients == 0 || self.data.training_days < 2 {
            return bad("need ≥ 1 training client and ≥ 2 training days".into());
        }
        let (lo, hi) = self.market.flex_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("flex_range must satisfy 0 ≤ lo ≤ hi ≤ 1, got {:?}", self.market.flex_range));
        }
        if !(self.market.default_resilience > 0.0 && self.market.default_resilience <= 1.0)
            || self.market.resilience.iter().any(|s| !(s.score > 0.0 && s.score <= 1.0))
        {
            return bad("resilience scores must lie in (0, 1]".into());
        }
        if !(self.mitigation.recovery_fraction >= 0.0) {
            return bad("recovery_fraction must be ≥ 0".into());
        }
        if self.detect.m == 0 || !(self.detect.k > 0.0) || !(self.detect.theta_kw >= 0.0) {
            return bad(format!("bad detector thresholds {:?}", self.detect));
        }
        for a in &self.attacks {
            if a.duration_min == 0 || a.start_minute() >= 1440 {
                return Err(ScenarioError::Attack(format!(
                    "attack at {} for {} min is outside the day",
                    a.start, a.duration_min
                )));
            }
        }
        Ok(())
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [
            &mut self.network,
            &mut self.data.timeseries,
            &mut self.data.training_timeseries,
            &mut self.forecast.models_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Reads a TOML scenario file; relative paths inside resolve against the
/// file's directory.
pub fn load_config(path: impl AsRef<Path>) -> Result<ScenarioConfig, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| crate::cli_io::CliIoError::io(path, e))?;
    let mut cfg: ScenarioConfig =
        toml::from_str(&text).map_err(|e| ScenarioError::Config(format!("{}: {e}", path.display())))?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_attack_and_overrides() {
        let cfg: ScenarioConfig = toml::from_str(
            r#"
            seed = 3
            [market]
            beta = 2.0
            [[attack]]
            kind = "pv-dos"
            targets = "all"
            start = "12:30"
            duration_min = 60
            [[attack]]
            kind = "pv-dos"
            targets = [1, 2]
            start = "09:00"
            duration_min = 5
            "#,
        )
        .unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.market.beta, 2.0);
        assert_eq!(cfg.market.alpha, MarketConfig::default().alpha);
        assert_eq!(cfg.attacks[0].start_minute(), 750);
        assert_eq!(cfg.attacks[1].targets(&[]).unwrap().len(), 2);
        let back: ScenarioConfig = toml::from_str(&toml::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(toml::from_str::<ScenarioConfig>("unknown = 1").is_err());
        let mut cfg = ScenarioConfig { interval_min: 7, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.interval_min = 15;
        cfg.market.flex_range = (0.5, 0.2);
        assert!(cfg.validate().is_err());
    }
}

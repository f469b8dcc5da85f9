//! Trains the four quantile forecasters with federated averaging on a few
//! synthetic prosumers and scores them against persistence on the next day.

use lem_guard::cli_io::{generate_synthetic, SynthParams};
use lem_guard::forecast::{evaluate_day, train_models, FederatedConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = SynthParams::default();
    let data = generate_synthetic(7, 4, 30, &params)?;
    let train = data.slice(0, 29 * 1440);
    let cfg = FederatedConfig { rounds: 10, ..FederatedConfig::default() };
    let (models, logs) = train_models(&train, &cfg)?;
    for l in &logs {
        let first = l.log.first().map_or(f64::NAN, |r| r.global_loss);
        let last = l.log.last().map_or(f64::NAN, |r| r.global_loss);
        println!("{:<18} loss {first:.4} -> {last:.4} over {} rounds", l.name(), l.log.len());
    }
    for s in evaluate_day(&models, &data, 29 * 1440)? {
        println!(
            "{:?} {:?}: model {:.4} kW, persistence {:.4} kW",
            s.horizon, s.target, s.model_loss, s.persistence_loss
        );
    }
    Ok(())
}

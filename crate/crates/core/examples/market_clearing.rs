//! Clears one midday market on the 88-bus feeder with the central solver
//! and with consensus ADMM, and compares the two dispatches.

use lem_guard::cli_io::{generate_synthetic, SynthParams};
use lem_guard::market::{assemble_acopf, clear_market, Bid, Coefficients, MarketInputs, MarketSettings, SolverChoice};
use lem_guard::netmodel::surrogate::feeder88;
use lem_guard::netmodel::Phase;

fn midday_market() -> Result<MarketInputs, Box<dyn std::error::Error>> {
    let net = feeder88();
    let ids: Vec<u32> = net.buses().iter().map(|b| b.id).collect();
    let data = generate_synthetic(3, ids.len(), 1, &SynthParams::default())?;
    let noon = 12 * 60;
    let mut demand = vec![[0.0; 3]; net.len()];
    let mut bids = Vec::new();
    for (i, (bus, s)) in net.buses().iter().zip(&data.nodes).enumerate() {
        let phase = Phase::ALL[i % 3];
        demand[i][phase.index()] = s.demand_kw[noon];
        bids.push(Bid {
            node_id: bus.id,
            phase,
            flexibility_kw: 0.3 * s.demand_kw[noon],
            pv_capacity_kw: s.pv_kw[noon],
        });
    }
    let coefficients = Coefficients::uniform(&ids, 0.01, 1.0, 0.1, 5e-4);
    Ok(MarketInputs { network: net, bids, coefficients, demand_kw: demand, settings: MarketSettings::default() })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let problem = assemble_acopf(&midday_market()?)?;
    println!("{} variables, {} equalities", problem.qp.n_vars(), problem.qp.equalities.len());
    let c = clear_market(&problem, SolverChoice::Central)?;
    let d = clear_market(&problem, SolverChoice::Distributed)?;
    for (name, r) in [("central", &c), ("distributed", &d)] {
        println!(
            "{name:<12} objective {:.6}  import {:.2} kW  losses {:.3} kW  {} iterations",
            r.objective,
            r.pcc_kw.iter().sum::<f64>(),
            r.losses_kw,
            r.iterations
        );
    }
    let worst = c
        .bids
        .iter()
        .zip(&d.bids)
        .map(|(a, b)| (a.g_kw - b.g_kw).abs().max((a.c_kw - b.c_kw).abs()))
        .fold(0.0, f64::max);
    println!("largest setpoint difference {worst:.2e} kW");
    Ok(())
}

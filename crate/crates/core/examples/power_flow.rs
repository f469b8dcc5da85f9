//! Solves the 88-bus feeder with every bus drawing 1 kW on one phase, then
//! again with 2 kW of PV per bus, and prints busbar import and losses.

use lem_guard::netmodel::surrogate::feeder88;
use lem_guard::netmodel::Phase;
use lem_guard::powerflow::{solve_power_flow, InjectionSet, DEFAULT_MAX_ITER, DEFAULT_TOL};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let net = feeder88();
    for pv in [0.0, 2.0] {
        let mut p = vec![[0.0; 3]; net.len()];
        let mut q = vec![[0.0; 3]; net.len()];
        for (i, bus) in net.buses().iter().enumerate().filter(|(_, b)| !b.is_slack) {
            let k = Phase::ALL[bus.id as usize % 3].index();
            p[i][k] = pv - 1.0;
            q[i][k] = -0.3;
        }
        let sol = solve_power_flow(&net, &InjectionSet::from_kw(&net, &p, &q), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        let vmin = sol
            .voltage_magnitudes()
            .iter()
            .flat_map(|v| v.iter().copied())
            .filter(|v| *v > 0.0)
            .fold(f64::INFINITY, f64::min);
        println!(
            "PV {pv} kW/bus: import {:?} kW, losses {:.3} kW, min |V| {vmin:.4} pu, {} iterations",
            sol.pcc_kw.map(|x| (x * 100.0).round() / 100.0),
            sol.total_losses_kw(),
            sol.iterations
        );
    }
    Ok(())
}

//! Coefficient update after a PV outage: nodes on the phase that lost
//! generation get cheaper curtailment, scaled by their resilience score.

use lem_guard::market::{update_coefficients, update_factors, Bid, Coefficients, MitigationContext};
use lem_guard::netmodel::Phase;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let bids: Vec<Bid> = (0..6)
        .map(|id| Bid { node_id: id, phase: Phase::ALL[id as usize % 3], flexibility_kw: 0.5, pv_capacity_kw: 2.0 })
        .collect();
    let ids: Vec<u32> = bids.iter().map(|b| b.node_id).collect();
    let mut coeffs = Coefficients::uniform(&ids, 0.01, 1.0, 0.1, 2.0);
    coeffs.nodes[3].rs = 0.3;

    // 12 kW of generation missing on phase A
    let ctx = MitigationContext::new([5.0, 4.0, 6.0], [17.0, 4.0, 6.0], &bids);
    let gamma = update_factors(&ctx, &coeffs)?;
    let next = update_coefficients(&ctx, &coeffs)?;
    for ((b, g), n) in bids.iter().zip(&gamma).zip(&next.nodes) {
        println!(
            "node {} phase {} rs {:.1}: gamma {g:.3}, beta {:.3}",
            b.node_id,
            b.phase,
            n.rs,
            n.beta[b.phase.index()]
        );
    }
    println!("loss penalty {:?} -> {:?}", coeffs.xi, next.xi.map(|x| (x * 1e4).round() / 1e4));
    Ok(())
}

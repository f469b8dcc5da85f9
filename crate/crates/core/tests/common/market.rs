use lem_guard::market::{Bid, Coefficients, MarketInputs, MarketSettings};
use lem_guard::netmodel::surrogate::feeder88;
use lem_guard::netmodel::Phase;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Midday market on the 88-bus feeder: one prosumer per bus with random
/// demand, PV and flexibility, and coefficients drawn log-uniformly around
/// the configured defaults.
pub fn market88(seed: u64) -> MarketInputs {
    let net = feeder88();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut demand = vec![[0.0; 3]; net.len()];
    let mut bids = Vec::with_capacity(net.len());
    for (i, bus) in net.buses().iter().enumerate() {
        let phase = Phase::ALL[(bus.id as usize * 7 + 1) % 3];
        let d = rng.gen_range(0.2..1.5);
        demand[i][phase.index()] = d;
        bids.push(Bid {
            node_id: bus.id,
            phase,
            flexibility_kw: d * rng.gen_range(0.2..0.4),
            pv_capacity_kw: if rng.gen_bool(0.8) { rng.gen_range(0.5..3.0) } else { 0.0 },
        });
    }
    let ids: Vec<u32> = bids.iter().map(|b| b.node_id).collect();
    let mut coefficients = Coefficients::uniform(&ids, 0.01, 1.0, 0.1, 5e-4);
    let mut logu = |lo: f64, hi: f64| (rng.gen_range(lo.ln()..hi.ln())).exp();
    for n in &mut coefficients.nodes {
        for k in 0..3 {
            n.alpha[k] = logu(0.003, 0.03);
            n.beta[k] = logu(0.3, 3.0);
        }
        n.rs = logu(0.2, 1.0);
    }
    for x in &mut coefficients.xi {
        *x = logu(0.03, 0.3);
    }
    MarketInputs { network: net, bids, coefficients, demand_kw: demand, settings: MarketSettings::default() }
}

mod common;

use approx::assert_relative_eq;
use chrono::{Duration, NaiveDate};
use common::newton::newton_power_flow;
use common::qp::{enumerate_qp, random_qp, two_bus};
use lem_guard::detect::{detect_node, persistent_runs, ResidualSeries};
use lem_guard::forecast::{fed_avg, pinball_loss, ModelParams, Target, N_FEATURES};
use lem_guard::market::{update_coefficients, update_factors, Bid, Coefficients, MitigationContext, Z_FLOOR};
use lem_guard::netmodel::surrogate::{random_radial_network, RandomNetworkOptions};
use lem_guard::netmodel::Phase;
use lem_guard::optim::{partition_atoms, solve_centralized, solve_distributed, CentralOptions, DistributedOptions};
use lem_guard::powerflow::{solve_power_flow, InjectionSet, DEFAULT_MAX_ITER, DEFAULT_TOL};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn power_flow_matches_newton(seed in 0u64..10_000, n in 3usize..14, load in 0.005f64..0.06) {
        let net = random_radial_network(seed, n, &RandomNetworkOptions::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut inj = InjectionSet::zeros(net.len());
        for (i, bus) in net.buses().iter().enumerate() {
            for p in bus.phases.iter() {
                inj.s[i][p.index()] = Complex64::new(rng.gen_range(-load..load / 2.0), rng.gen_range(-load / 3.0..load / 6.0));
            }
        }
        let ci = solve_power_flow(&net, &inj, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        let nr = newton_power_flow(&net, &inj, 1e-13);
        for (a, b) in ci.voltages.iter().zip(&nr.voltages) {
            for k in 0..3 {
                prop_assert!((a[k] - b[k]).norm() < 1e-7, "{} vs {}", a[k], b[k]);
            }
        }
        for k in 0..3 {
            prop_assert!((ci.pcc_kw[k] - nr.pcc_kw[k]).abs() < 1e-5 * net.phase_base_kw());
        }
    }

    #[test]
    fn central_qp_matches_enumeration(seed in 0u64..100_000, n in 2usize..7) {
        let qp = random_qp(seed, n);
        let exact = enumerate_qp(&qp);
        let sol = solve_centralized(&qp, &CentralOptions::default()).unwrap();
        for (a, b) in sol.x.iter().zip(&exact) {
            prop_assert!((a - b).abs() < 1e-6, "{:?} vs {:?}", sol.x, exact);
        }
    }

    #[test]
    fn distributed_qp_matches_enumeration(seed in 0u64..100_000, n in 2usize..6) {
        let qp = random_qp(seed, n);
        let exact = enumerate_qp(&qp);
        let part = partition_atoms(&qp, &two_bus()).unwrap();
        let d = solve_distributed(&part, &DistributedOptions { seed, ..DistributedOptions::default() }).unwrap();
        for (a, b) in d.solution.x.iter().zip(&exact) {
            prop_assert!((a - b).abs() < 1e-4, "{:?} vs {:?}", d.solution.x, exact);
        }
        let f = qp.objective(&exact);
        prop_assert!((d.solution.objective - f).abs() <= 1e-5 * f.abs().max(1.0));
    }
}

fn bids_and_coeffs(seed: u64, n: usize) -> (Vec<Bid>, Coefficients) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bids: Vec<Bid> = (0..n as u32)
        .map(|id| Bid {
            node_id: id,
            phase: Phase::ALL[rng.gen_range(0..3)],
            flexibility_kw: rng.gen_range(0.05..1.0),
            pv_capacity_kw: 0.0,
        })
        .collect();
    let ids: Vec<u32> = bids.iter().map(|b| b.node_id).collect();
    let mut c = Coefficients::uniform(&ids, 0.01, 1.0, 0.1, rng.gen_range(0.1..10.0));
    for node in &mut c.nodes {
        node.rs = rng.gen_range(0.05..=1.0);
        node.alpha = std::array::from_fn(|_| rng.gen_range(0.001..0.1));
        node.beta = std::array::from_fn(|_| rng.gen_range(0.1..10.0));
    }
    (bids, c)
}

proptest! {
    #[test]
    fn update_factors_bounded_and_signed(
        seed in any::<u64>(),
        n in 1usize..25,
        delta in prop::array::uniform3(-40.0f64..40.0),
    ) {
        let (bids, coeffs) = bids_and_coeffs(seed, n);
        let forecast = [5.0, -3.0, 10.0];
        let measured = std::array::from_fn(|k| forecast[k] + delta[k]);
        let ctx = MitigationContext::new(forecast, measured, &bids);
        let g = update_factors(&ctx, &coeffs).unwrap();
        for (b, gi) in bids.iter().zip(&g) {
            prop_assert!(*gi > 0.0 && *gi <= 1.0 / Z_FLOOR);
            // a node only reacts to the imbalance on its own phase
            let d = delta[b.phase.index()];
            if d > 0.0 {
                prop_assert!(*gi < 1.0);
            } else if d < 0.0 {
                prop_assert!(*gi > 1.0);
            } else {
                prop_assert_eq!(*gi, 1.0);
            }
        }
        let out = update_coefficients(&ctx, &coeffs).unwrap();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        for ((before, after), gi) in coeffs.nodes.iter().zip(&out.nodes).zip(&g) {
            for k in 0..3 {
                assert_relative_eq!(after.alpha[k], before.alpha[k] * gi, max_relative = 1e-14);
                assert_relative_eq!(after.beta[k], before.beta[k] * gi, max_relative = 1e-14);
            }
            prop_assert_eq!(after.rs, before.rs);
        }
        for k in 0..3 {
            assert_relative_eq!(out.xi[k] * mean, coeffs.xi[k], max_relative = 1e-14);
        }
    }

    #[test]
    fn fed_avg_is_weighted_mean(
        seed in any::<u64>(),
        clients in 1usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let updates: Vec<(ModelParams, usize)> = (0..clients)
            .map(|_| {
                let mut p = ModelParams::zeros(N_FEATURES);
                p.weights.iter_mut().for_each(|w| *w = rng.gen_range(-5.0..5.0));
                (p, rng.gen_range(1..500))
            })
            .collect();
        let avg = fed_avg(&updates).unwrap();
        let total: usize = updates.iter().map(|(_, n)| n).sum();
        for j in 0..avg.weights.len() {
            let expect: f64 = updates.iter().map(|(p, n)| p.weights[j] * *n as f64).sum::<f64>() / total as f64;
            assert_relative_eq!(avg.weights[j], expect, epsilon = 1e-12, max_relative = 1e-12);
            let lo = updates.iter().map(|(p, _)| p.weights[j]).fold(f64::INFINITY, f64::min);
            let hi = updates.iter().map(|(p, _)| p.weights[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(avg.weights[j] >= lo - 1e-12 && avg.weights[j] <= hi + 1e-12);
        }
        let mut reversed = updates.clone();
        reversed.reverse();
        let back = fed_avg(&reversed).unwrap();
        for (a, b) in avg.weights.iter().zip(&back.weights) {
            assert_relative_eq!(*a, *b, epsilon = 1e-12, max_relative = 1e-12);
        }
        // doubling every sample count changes nothing
        let doubled: Vec<_> = updates.iter().map(|(p, n)| (p.clone(), 2 * n)).collect();
        prop_assert_eq!(fed_avg(&doubled).unwrap().weights, avg.weights);
    }

    #[test]
    fn pinball_loss_nonnegative(pred in -50.0f64..50.0, actual in -50.0f64..50.0, q in 0.01f64..0.99) {
        let l = pinball_loss(pred, actual, q).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(pinball_loss(actual, actual, q).unwrap(), 0.0);
        // the median loss is symmetric
        prop_assert_eq!(pinball_loss(pred, actual, 0.5).unwrap(), pinball_loss(actual, pred, 0.5).unwrap());
    }

    #[test]
    fn persistent_runs_cover_exactly_long_runs(exceed in prop::collection::vec(any::<bool>(), 0..200), m in 1usize..6) {
        let flags = persistent_runs(&exceed, m);
        let mut covered = vec![false; exceed.len()];
        for f in &flags {
            prop_assert!(f.steps >= m);
            let start = f.onset_index + 1 - m;
            prop_assert!(exceed[start..start + f.steps].iter().all(|e| *e));
            prop_assert!(start == 0 || !exceed[start - 1]);
            prop_assert!(start + f.steps == exceed.len() || !exceed[start + f.steps]);
            covered[start..start + f.steps].iter_mut().for_each(|c| *c = true);
        }
        // every uncovered exceedance sits in a run shorter than m
        let mut run = 0;
        for (t, e) in exceed.iter().chain(std::iter::once(&false)).enumerate() {
            if *e {
                run += 1;
            } else {
                if run > 0 && !covered[t - 1] {
                    prop_assert!(run < m);
                }
                run = 0;
            }
        }
    }

    #[test]
    fn node_detection_monotone_in_thresholds(
        residual in prop::collection::vec(-3.0f64..3.0, 10..120),
        k in 0.5f64..5.0,
        dk in 0.0f64..3.0,
        m in 1usize..5,
    ) {
        let t0 = NaiveDate::from_ymd_opt(2024, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let n = residual.len();
        let res = ResidualSeries {
            node_id: 1,
            target: Target::Pv,
            times: (0..n).map(|i| t0 + Duration::minutes(i as i64)).collect(),
            scale: vec![0.3; n],
            residual,
        };
        let steps = |k: f64, m: usize| -> usize {
            detect_node(&res, k, m, 0.05).unwrap().flags.iter().map(|f| f.steps).sum()
        };
        prop_assert!(steps(k + dk, m) <= steps(k, m));
        prop_assert!(steps(k, m + 1) <= steps(k, m));
    }
}

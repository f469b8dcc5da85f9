//! Generated feeders: the 88-bus surrogate LV network and random radial
//! networks for property tests.
//!
//! The surrogate stands in for a real feeder whose line data is not public.
//! It has five feeders leaving the LV busbar of a 250 kVA transformer, each a
//! trunk of 185 mm² Al cable with 95 mm² laterals, 20–40 m between poles.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bus, Line, Network, PhaseSet, Transformer, ZERO3};

#[derive(Clone, Debug)]
pub struct SurrogateOptions {
    pub seed: u64,
    pub n_buses: usize,
    pub n_feeders: usize,
    /// Trunk cable resistance and reactance in ohm/km.
    pub trunk_ohm_per_km: (f64, f64),
    pub lateral_ohm_per_km: (f64, f64),
    /// Span length range in metres.
    pub span_m: (f64, f64),
    /// Probability that a new bus starts or extends a lateral instead of the trunk.
    pub lateral_prob: f64,
    pub vmin: f64,
    pub vmax: f64,
    pub trunk_ampacity_a: f64,
    pub lateral_ampacity_a: f64,
}

impl Default for SurrogateOptions {
    fn default() -> Self {
        SurrogateOptions {
            seed: 88,
            n_buses: 88,
            n_feeders: 5,
            trunk_ohm_per_km: (0.164, 0.070),
            lateral_ohm_per_km: (0.320, 0.075),
            span_m: (20.0, 40.0),
            lateral_prob: 0.45,
            vmin: 0.9,
            vmax: 1.1,
            trunk_ampacity_a: 340.0,
            lateral_ampacity_a: 230.0,
        }
    }
}

/// Surrogate 88-bus feeder with default options.
pub fn feeder88() -> Network {
    surrogate_feeder(&SurrogateOptions::default()).expect("default surrogate feeder is valid")
}

/// Builds a surrogate radial feeder. Bus 0 is the LV busbar (slack); all
/// buses are three-phase and lines carry no mutual coupling.
pub fn surrogate_feeder(opts: &SurrogateOptions) -> Result<Network, super::NetworkError> {
    let base_kva = 250.0;
    let base_v = 400.0;
    let z_base = base_v * base_v / (base_kva * 1000.0);
    let i_base = base_kva * 1000.0 / (3f64.sqrt() * base_v);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut buses = vec![Bus { vmin: opts.vmin, vmax: opts.vmax, ..Bus::slack(0) }];
    let mut lines = Vec::new();
    let n_feeders = opts.n_feeders.max(1);
    // trunk tips per feeder, and the open lateral tip (if any)
    let mut trunk_tip = vec![0u32; n_feeders];
    let mut lateral_tip: Vec<Option<u32>> = vec![None; n_feeders];
    let mut trunk_nodes: Vec<Vec<u32>> = vec![Vec::new(); n_feeders];

    for id in 1..opts.n_buses as u32 {
        let f = (id as usize - 1) % n_feeders;
        let span_km = rng.gen_range(opts.span_m.0..=opts.span_m.1) / 1000.0;
        let on_lateral = !trunk_nodes[f].is_empty() && rng.gen_bool(opts.lateral_prob);
        let (from, (r, x), amp) = if on_lateral {
            let from = match lateral_tip[f] {
                Some(tip) if rng.gen_bool(0.6) => tip,
                _ => trunk_nodes[f][rng.gen_range(0..trunk_nodes[f].len())],
            };
            lateral_tip[f] = Some(id);
            (from, opts.lateral_ohm_per_km, opts.lateral_ampacity_a)
        } else {
            let from = trunk_tip[f];
            trunk_tip[f] = id;
            trunk_nodes[f].push(id);
            lateral_tip[f] = None;
            (from, opts.trunk_ohm_per_km, opts.trunk_ampacity_a)
        };
        buses.push(Bus { id, phases: PhaseSet::ABC, vmin: opts.vmin, vmax: opts.vmax, is_slack: false });
        let z = Complex64::new(r * span_km, x * span_km) / z_base;
        lines.push(Line { ampacity: Some(amp / i_base), ..Line::uniform(from, id, z) });
    }
    Network::new(buses, lines, Transformer::default(), base_kva, base_v)
}

#[derive(Clone, Debug)]
pub struct RandomNetworkOptions {
    /// Allow buses with one or two phases (always a subset of the parent's).
    pub mixed_phases: bool,
    /// Add mutual coupling terms to line impedances.
    pub mutual: bool,
    /// Range of per-phase series resistance (per-unit).
    pub r_pu: (f64, f64),
    /// Range of X/R ratio.
    pub x_over_r: (f64, f64),
    /// Transformer short-circuit percentage (0 = ideal slack).
    pub short_circuit_pct: f64,
}

impl Default for RandomNetworkOptions {
    fn default() -> Self {
        RandomNetworkOptions {
            mixed_phases: true,
            mutual: true,
            r_pu: (0.002, 0.02),
            x_over_r: (0.3, 1.5),
            short_circuit_pct: 4.0,
        }
    }
}

/// Random radial network with `n` buses; bus 0 is the slack.
pub fn random_radial_network(seed: u64, n: usize, opts: &RandomNetworkOptions) -> Network {
    assert!(n >= 1, "need at least one bus");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buses = vec![Bus::slack(0)];
    let mut lines = Vec::new();
    for id in 1..n as u32 {
        let parent = rng.gen_range(0..id);
        let parent_phases = buses[parent as usize].phases;
        let phases = if opts.mixed_phases && rng.gen_bool(0.5) {
            let avail: Vec<_> = parent_phases.iter().collect();
            let mut set = PhaseSet::EMPTY;
            set.insert(avail[rng.gen_range(0..avail.len())]);
            if avail.len() > 1 && rng.gen_bool(0.3) {
                set.insert(avail[rng.gen_range(0..avail.len())]);
            }
            set
        } else {
            parent_phases
        };
        buses.push(Bus::new(id, phases));
        let mut z = ZERO3;
        for (i, row) in z.iter_mut().enumerate() {
            let r = rng.gen_range(opts.r_pu.0..=opts.r_pu.1);
            let xr = rng.gen_range(opts.x_over_r.0..=opts.x_over_r.1);
            row[i] = Complex64::new(r, r * xr);
        }
        if opts.mutual {
            for i in 0..3 {
                for j in (i + 1)..3 {
                    let f = rng.gen_range(0.15..0.35);
                    let m = Complex64::new(0.5 * (z[i][i].re + z[j][j].re) * f, 0.5 * (z[i][i].im + z[j][j].im) * f);
                    z[i][j] = m;
                    z[j][i] = m;
                }
            }
        }
        lines.push(Line { from: parent, to: id, z, ampacity: None });
    }
    let transformer = Transformer { short_circuit_pct: opts.short_circuit_pct, ..Transformer::default() };
    Network::new(buses, lines, transformer, 250.0, 400.0).expect("random network is valid by construction")
}

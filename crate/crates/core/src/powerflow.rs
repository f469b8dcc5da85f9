//! Three-phase unbalanced power flow by current-injection fixed point.
//!
//! The slack bus is the LV busbar. When the transformer has a non-zero
//! short-circuit impedance an ideal source (1∠0°, 1∠−120°, 1∠120°) sits
//! behind it; otherwise the busbar itself is held at those phasors.
//! Every bus, the busbar included, may carry a prosumer injection.
//!
//! With the source voltages V_S fixed, the unknown bus-phase voltages obey
//! Y_UU·V_U + Y_US·V_S = conj(s/V_U), which is iterated as
//! V_U ← Y_UU⁻¹ (conj(s/V_U) − Y_US·V_S) from a flat start.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netmodel::{build_admittance, primitive_admittance, Network, NetworkError, Phase};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 100;
const COLLAPSE_PU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PowerFlowError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid injections: {0}")]
    InvalidInjection(String),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("no convergence after {iterations} iterations (mismatch {residual:.3e} pu)")]
    NonConvergence { iterations: usize, residual: f64, history: Vec<f64> },
    #[error("voltage collapse at bus {bus} phase {phase}: |V| = {magnitude:.4} pu")]
    VoltageCollapse { bus: u32, phase: Phase, magnitude: f64, iteration: usize },
    #[error("bus admittance block is singular")]
    Singular,
}

/// Complex power injections per bus and phase, per-unit on the per-phase
/// base; generation positive, load negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionSet {
    pub s: Vec<[Complex64; 3]>,
}

impl InjectionSet {
    pub fn zeros(n: usize) -> Self {
        InjectionSet { s: vec![[Complex64::new(0.0, 0.0); 3]; n] }
    }

    /// Builds injections from kW/kvar values (generation positive).
    pub fn from_kw(net: &Network, p_kw: &[[f64; 3]], q_kvar: &[[f64; 3]]) -> Self {
        let base = net.phase_base_kw();
        let s = p_kw
            .iter()
            .zip(q_kvar)
            .map(|(p, q)| {
                let mut row = [Complex64::new(0.0, 0.0); 3];
                for k in 0..3 {
                    row[k] = Complex64::new(p[k] / base, q[k] / base);
                }
                row
            })
            .collect();
        InjectionSet { s }
    }

    /// Total real injection in kW.
    pub fn total_kw(&self, net: &Network) -> f64 {
        self.s.iter().flatten().map(|v| v.re).sum::<f64>() * net.phase_base_kw()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    /// Voltage phasors per bus (network order) and phase; absent phases are 0.
    pub voltages: Vec<[Complex64; 3]>,
    /// Current per line and phase, positive from `from` to `to`.
    pub currents: Vec<[Complex64; 3]>,
    /// Series losses per phase, kW.
    pub losses_kw: [f64; 3],
    /// Real power imported at the busbar per phase, kW.
    pub pcc_kw: [f64; 3],
    pub iterations: usize,
    /// Final max bus-phase power mismatch, per-unit.
    pub residual: f64,
    pub residual_history: Vec<f64>,
}

impl PowerFlowSolution {
    pub fn total_losses_kw(&self) -> f64 {
        self.losses_kw.iter().sum()
    }

    pub fn total_pcc_kw(&self) -> f64 {
        self.pcc_kw.iter().sum()
    }

    pub fn voltage_magnitudes(&self) -> Vec<[f64; 3]> {
        self.voltages.iter().map(|v| [v[0].norm(), v[1].norm(), v[2].norm()]).collect()
    }
}

/// Precomputed solver for one network; reusable across injection sets.
#[derive(Clone, Debug)]
pub struct PowerFlowSolver {
    net: Network,
    y_bus: DMatrix<Complex64>,
    /// Active bus-phase slots as (bus index, phase index).
    slots: Vec<(usize, usize)>,
    /// Position of each bus-phase in the unknown vector, if any.
    slot_of: Vec<[Option<usize>; 3]>,
    z_uu: DMatrix<Complex64>,
    y_uu: DMatrix<Complex64>,
    /// Y_US · V_S over the unknown slots.
    source_coupling: DVector<Complex64>,
    /// Fixed voltages when the busbar is the ideal source.
    fixed: Vec<[Option<Complex64>; 3]>,
    /// Transformer admittance (diagonal), if any.
    y_tx: Option<Complex64>,
}

impl PowerFlowSolver {
    pub fn new(net: &Network) -> Result<Self, PowerFlowError> {
        let n = net.len();
        let y_bus = build_admittance(net)?;
        let slack = net.slack_index();
        let y_tx = net.transformer().series_impedance(net.base_kva()).map(|z| Complex64::new(1.0, 0.0) / z);

        let mut fixed = vec![[None; 3]; n];
        let mut slots = Vec::new();
        let mut slot_of = vec![[None; 3]; n];
        for (i, bus) in net.buses().iter().enumerate() {
            for p in bus.phases.iter() {
                if i == slack && y_tx.is_none() {
                    fixed[i][p.index()] = Some(p.phasor());
                } else {
                    slot_of[i][p.index()] = Some(slots.len());
                    slots.push((i, p.index()));
                }
            }
        }
        let m = slots.len();
        let mut y_uu = DMatrix::<Complex64>::zeros(m, m);
        for (r, &(bi, pi)) in slots.iter().enumerate() {
            for (c, &(bj, pj)) in slots.iter().enumerate() {
                y_uu[(r, c)] = y_bus[(3 * bi + pi, 3 * bj + pj)];
            }
        }
        let mut source_coupling = DVector::<Complex64>::zeros(m);
        match y_tx {
            Some(yt) => {
                for p in net.buses()[slack].phases.iter() {
                    let r = slot_of[slack][p.index()].expect("slack slot");
                    y_uu[(r, r)] += yt;
                    source_coupling[r] = -yt * p.phasor();
                }
            }
            None => {
                for (r, &(bi, pi)) in slots.iter().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for pj in 0..3 {
                        if let Some(v) = fixed[slack][pj] {
                            acc += y_bus[(3 * bi + pi, 3 * slack + pj)] * v;
                        }
                    }
                    source_coupling[r] = acc;
                }
            }
        }
        let z_uu =
            if m == 0 { DMatrix::zeros(0, 0) } else { y_uu.clone().try_inverse().ok_or(PowerFlowError::Singular)? };
        Ok(PowerFlowSolver { net: net.clone(), y_bus, slots, slot_of, z_uu, y_uu, source_coupling, fixed, y_tx })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn admittance(&self) -> &DMatrix<Complex64> {
        &self.y_bus
    }

    fn check_injections(&self, inj: &InjectionSet) -> Result<(), PowerFlowError> {
        if inj.s.len() != self.net.len() {
            return Err(PowerFlowError::InvalidInjection(format!("{} rows for {} buses", inj.s.len(), self.net.len())));
        }
        for (i, bus) in self.net.buses().iter().enumerate() {
            for p in Phase::ALL {
                let v = inj.s[i][p.index()];
                if !v.re.is_finite() || !v.im.is_finite() {
                    return Err(PowerFlowError::InvalidInjection(format!("non-finite value at bus {}", bus.id)));
                }
                if !bus.phases.contains(p) && v.norm() > 0.0 {
                    return Err(PowerFlowError::InvalidInjection(format!(
                        "bus {} has no phase {p} but a non-zero injection",
                        bus.id
                    )));
                }
            }
        }
        Ok(())
    }

    fn mismatch(&self, v: &DVector<Complex64>, s: &DVector<Complex64>) -> f64 {
        let i = &self.y_uu * v + &self.source_coupling;
        v.iter().zip(i.iter()).zip(s.iter()).map(|((vk, ik), sk)| (sk - vk * ik.conj()).norm()).fold(0.0, f64::max)
    }

    pub fn solve(&self, inj: &InjectionSet, tol: f64, max_iter: usize) -> Result<PowerFlowSolution, PowerFlowError> {
        if !(tol > 0.0) {
            return Err(PowerFlowError::BadTolerance(tol));
        }
        self.check_injections(inj)?;
        let m = self.slots.len();
        let s = DVector::from_iterator(m, self.slots.iter().map(|&(b, p)| inj.s[b][p]));
        let mut v = DVector::from_iterator(m, self.slots.iter().map(|&(_, p)| Phase::ALL[p].phasor()));
        let mut history = Vec::new();
        let mut residual = self.mismatch(&v, &s);
        history.push(residual);
        let mut iterations = 0;
        while residual > tol {
            if iterations >= max_iter {
                return Err(PowerFlowError::NonConvergence { iterations, residual, history });
            }
            let rhs = DVector::from_iterator(m, s.iter().zip(v.iter()).map(|(sk, vk)| (sk / vk).conj()))
                - &self.source_coupling;
            v = &self.z_uu * rhs;
            iterations += 1;
            for (k, vk) in v.iter().enumerate() {
                if !(vk.norm() >= COLLAPSE_PU) {
                    let (b, p) = self.slots[k];
                    return Err(PowerFlowError::VoltageCollapse {
                        bus: self.net.buses()[b].id,
                        phase: Phase::ALL[p],
                        magnitude: vk.norm(),
                        iteration: iterations,
                    });
                }
            }
            residual = self.mismatch(&v, &s);
            history.push(residual);
        }
        Ok(self.assemble(&v, inj, iterations, residual, history))
    }

    fn assemble(
        &self,
        v: &DVector<Complex64>,
        inj: &InjectionSet,
        iterations: usize,
        residual: f64,
        residual_history: Vec<f64>,
    ) -> PowerFlowSolution {
        let n = self.net.len();
        let mut voltages = vec![[Complex64::new(0.0, 0.0); 3]; n];
        for i in 0..n {
            for p in 0..3 {
                if let Some(k) = self.slot_of[i][p] {
                    voltages[i][p] = v[k];
                } else if let Some(f) = self.fixed[i][p] {
                    voltages[i][p] = f;
                }
            }
        }
        let mut currents = Vec::with_capacity(self.net.lines().len());
        for (k, line) in self.net.lines().iter().enumerate() {
            let a = self.net.bus_index(line.from).expect("validated");
            let b = self.net.bus_index(line.to).expect("validated");
            let y = primitive_admittance(&line.z, self.net.line_phases(k)).expect("validated");
            let mut cur = [Complex64::new(0.0, 0.0); 3];
            for (r, c_out) in cur.iter_mut().enumerate() {
                for c in 0..3 {
                    *c_out += y[r][c] * (voltages[a][c] - voltages[b][c]);
                }
            }
            currents.push(cur);
        }
        let mut sol = PowerFlowSolution {
            voltages,
            currents,
            losses_kw: [0.0; 3],
            pcc_kw: [0.0; 3],
            iterations,
            residual,
            residual_history,
        };
        sol.losses_kw = compute_losses(&sol, &self.net);
        sol.pcc_kw = self.busbar_import(&sol, inj);
        sol
    }

    /// Real power delivered into the feeder at the busbar, minus the busbar
    /// prosumer's own injection.
    fn busbar_import(&self, sol: &PowerFlowSolution, inj: &InjectionSet) -> [f64; 3] {
        let slack = self.net.slack_index();
        let base = self.net.phase_base_kw();
        let mut out = [0.0; 3];
        for p in self.net.buses()[slack].phases.iter() {
            let row = 3 * slack + p.index();
            let mut i = Complex64::new(0.0, 0.0);
            for (j, vj) in sol.voltages.iter().enumerate() {
                for q in 0..3 {
                    i += self.y_bus[(row, 3 * j + q)] * vj[q];
                }
            }
            let s_out = sol.voltages[slack][p.index()] * i.conj();
            out[p.index()] = (s_out.re - inj.s[slack][p.index()].re) * base;
        }
        out
    }

    /// Transformer series admittance, when modelled.
    pub fn transformer_admittance(&self) -> Option<Complex64> {
        self.y_tx
    }
}

/// One-shot solve; builds a [`PowerFlowSolver`] internally.
pub fn solve_power_flow(
    net: &Network,
    inj: &InjectionSet,
    tol: f64,
    max_iter: usize,
) -> Result<PowerFlowSolution, PowerFlowError> {
    PowerFlowSolver::new(net)?.solve(inj, tol, max_iter)
}

/// Series losses per phase in kW: Σ_lines Re(ΔV · conj(I)).
pub fn compute_losses(sol: &PowerFlowSolution, net: &Network) -> [f64; 3] {
    let base = net.phase_base_kw();
    let mut out = [0.0; 3];
    for (k, line) in net.lines().iter().enumerate() {
        let a = net.bus_index(line.from).expect("validated");
        let b = net.bus_index(line.to).expect("validated");
        for p in 0..3 {
            let dv = sol.voltages[a][p] - sol.voltages[b][p];
            out[p] += (dv * sol.currents[k][p].conj()).re * base;
        }
    }
    out
}

/// Import-positive real power at the point of common coupling, kW per phase.
pub fn pcc_injection(sol: &PowerFlowSolution) -> [f64; 3] {
    sol.pcc_kw
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::surrogate::{random_radial_network, RandomNetworkOptions};
    use crate::netmodel::{Bus, Line, PhaseSet, Transformer};

    fn two_bus(phases: PhaseSet) -> Network {
        let ideal = Transformer { short_circuit_pct: 0.0, ..Transformer::default() };
        Network::new(
            vec![Bus::slack(1), Bus::new(2, phases)],
            vec![Line::uniform(1, 2, Complex64::new(0.01, 0.01))],
            ideal,
            250.0,
            400.0,
        )
        .unwrap()
    }

    #[test]
    fn no_load_is_flat() {
        let net = random_radial_network(3, 10, &RandomNetworkOptions::default());
        let sol = solve_power_flow(&net, &InjectionSet::zeros(net.len()), DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
        for (bus, v) in net.buses().iter().zip(&sol.voltages) {
            for p in bus.phases.iter() {
                assert!((v[p.index()] - p.phasor()).norm() < 1e-12);
            }
        }
        assert!(sol.losses_kw.iter().all(|x| x.abs() < 1e-9));
        assert!(sol.pcc_kw.iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn two_bus_matches_hand_fixed_point() {
        let net = two_bus(PhaseSet::single(Phase::A));
        let mut inj = InjectionSet::zeros(2);
        inj.s[1][0] = Complex64::new(-0.1, 0.0);
        let sol = solve_power_flow(&net, &inj, 1e-12, 100).unwrap();

        // scalar iteration V2 = V1 - z conj(s_load / V2) with s_load = 0.1
        let z = Complex64::new(0.01, 0.01);
        let s_load = Complex64::new(0.1, 0.0);
        let mut v2 = Complex64::new(1.0, 0.0);
        for _ in 0..200 {
            v2 = Complex64::new(1.0, 0.0) - z * (s_load / v2).conj();
        }
        assert!((sol.voltages[1][0] - v2).norm() < 1e-10);
        let i = (s_load / v2).conj();
        let loss = i.norm_sqr() * 0.01 * net.phase_base_kw();
        assert!((sol.losses_kw[0] - loss).abs() < 1e-9);
        assert!((sol.pcc_kw[0] - (0.1 * net.phase_base_kw() + loss)).abs() < 1e-6);
    }

    #[test]
    fn balanced_load_is_rotationally_symmetric() {
        let net = two_bus(PhaseSet::ABC);
        let mut inj = InjectionSet::zeros(2);
        inj.s[1] = [Complex64::new(-0.2, -0.05); 3];
        let sol = solve_power_flow(&net, &inj, 1e-12, 100).unwrap();
        let v = sol.voltages[1];
        assert!((v[1] - v[0] * Phase::B.phasor()).norm() < 1e-10);
        assert!((v[2] - v[0] * Phase::C.phasor()).norm() < 1e-10);
        assert!((sol.losses_kw[0] - sol.losses_kw[1]).abs() < 1e-9);
    }

    #[test]
    fn power_balance_on_random_networks() {
        for seed in 0..20 {
            let net = random_radial_network(seed, 10, &RandomNetworkOptions::default());
            let mut inj = InjectionSet::zeros(net.len());
            for (i, bus) in net.buses().iter().enumerate() {
                for p in bus.phases.iter() {
                    let x = ((seed as usize * 31 + i * 7 + p.index()) % 13) as f64 / 13.0;
                    inj.s[i][p.index()] = Complex64::new(-0.05 + 0.08 * x, -0.01 * x);
                }
            }
            let sol = solve_power_flow(&net, &inj, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
            let balance = inj.total_kw(&net) + sol.total_pcc_kw() - sol.total_losses_kw();
            assert!(
                balance.abs() <= 10.0 * DEFAULT_TOL * net.phase_base_kw() * net.len() as f64,
                "seed {seed}: {balance}"
            );
            assert!(sol.total_losses_kw() >= 0.0);
            let h = &sol.residual_history;
            if h.len() >= 4 {
                assert!(h[h.len() - 1] < h[h.len() - 2] && h[h.len() - 2] < h[h.len() - 3]);
            }
        }
    }

    #[test]
    fn injection_on_absent_phase_rejected() {
        let net = two_bus(PhaseSet::single(Phase::A));
        let mut inj = InjectionSet::zeros(2);
        inj.s[1][2] = Complex64::new(-0.1, 0.0);
        assert!(matches!(solve_power_flow(&net, &inj, 1e-8, 100), Err(PowerFlowError::InvalidInjection(_))));
    }

    #[test]
    fn heavy_load_collapses_or_fails() {
        let net = two_bus(PhaseSet::single(Phase::A));
        let mut inj = InjectionSet::zeros(2);
        inj.s[1][0] = Complex64::new(-40.0, 0.0);
        let err = solve_power_flow(&net, &inj, 1e-8, 100).unwrap_err();
        assert!(matches!(err, PowerFlowError::VoltageCollapse { .. } | PowerFlowError::NonConvergence { .. }));
    }
}

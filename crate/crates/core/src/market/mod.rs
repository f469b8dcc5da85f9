//! Primary-market clearing and attack mitigation.
//!
//! The clearing problem is a convex QP over a branch-flow linearization of
//! the feeder around its flat no-load profile. Per bus and phase it carries a
//! voltage deviation `e` (percent of nominal) and, for every non-root bus,
//! the real power `P` flowing in from its parent (kW). Prosumers offer PV up
//! to `ĝ` and load curtailment up to `f` on their phase. Reactive flows are
//! fixed by the demand forecast and a constant power factor.
//!
//! Objective: Σ α g² + Σ β c² + Σ_lines ξ r (P² + Q²) / S_phase + π Σ P_pcc,
//! where π is the price of energy imported at the PCC (exports earn it).
//! The result is checked with a full nonlinear power flow.

mod update;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use update::{update_coefficients, update_factors, Coefficients, MitigationContext, NodeCoefficients, Z_FLOOR};

use crate::netmodel::{Network, Phase};
use crate::optim::{
    partition_atoms, solve_centralized, solve_distributed, CentralOptions, DistributedOptions, OptimError,
    QuadraticProgram,
};
use crate::powerflow::{InjectionSet, PowerFlowError, PowerFlowSolver, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Band outside the voltage limits tolerated by the post-solve check (pu).
pub const VOLTAGE_CHECK_BAND: f64 = 0.005;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("invalid bid: {0}")]
    Bid(String),
    #[error("invalid coefficients: {0}")]
    Coefficients(String),
    #[error("invalid forecast: {0}")]
    Forecast(String),
    #[error("voltage limits unreachable at bus {bus} phase {phase}: achievable [{lo:.4}, {hi:.4}] pu, limits [{vmin}, {vmax}] pu")]
    Infeasible { bus: u32, phase: Phase, lo: f64, hi: f64, vmin: f64, vmax: f64 },
    #[error(transparent)]
    Solver(#[from] OptimError),
    #[error("post-clearing power flow: {0}")]
    PowerFlow(#[from] PowerFlowError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub node_id: u32,
    pub phase: Phase,
    /// Largest downward load adjustment offered (kW).
    pub flexibility_kw: f64,
    /// Available PV (kW).
    pub pv_capacity_kw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketSettings {
    pub power_factor: f64,
    /// Price per kW imported at the PCC.
    pub import_price: f64,
}

impl Default for MarketSettings {
    fn default() -> Self {
        MarketSettings { power_factor: 0.95, import_price: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct MarketInputs {
    pub network: Network,
    pub bids: Vec<Bid>,
    pub coefficients: Coefficients,
    /// Forecast demand per bus (network order) and phase, kW.
    pub demand_kw: Vec<[f64; 3]>,
    pub settings: MarketSettings,
}

/// Positions of the market variables in the QP.
#[derive(Clone, Debug)]
pub struct VarIndex {
    pub g: Vec<usize>,
    pub c: Vec<usize>,
    pub e: Vec<[Option<usize>; 3]>,
    /// Flow from the parent into each non-root bus.
    pub p: Vec<[Option<usize>; 3]>,
    pub pcc: [Option<usize>; 3],
}

#[derive(Clone, Debug)]
pub struct MarketProblem {
    pub qp: QuadraticProgram,
    pub vars: VarIndex,
    pub inputs: MarketInputs,
    /// Reactive demand per bus and phase, kvar.
    pub q_kvar: Vec<[f64; 3]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Central,
    Distributed,
}

impl std::str::FromStr for SolverChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "central" => Ok(SolverChoice::Central),
            "distributed" => Ok(SolverChoice::Distributed),
            _ => Err(format!("unknown solver '{s}' (central|distributed)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidDispatch {
    pub node_id: u32,
    pub phase: Phase,
    pub g_kw: f64,
    pub c_kw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub bids: Vec<BidDispatch>,
    pub objective: f64,
    /// Line losses from the nonlinear power flow (kW).
    pub losses_kw: f64,
    /// PCC import per phase from the nonlinear power flow (kW).
    pub pcc_kw: [f64; 3],
    pub min_voltage_pu: f64,
    pub max_voltage_pu: f64,
    pub warnings: Vec<String>,
    /// KKT residual for the central solver, consensus residual for the
    /// distributed one.
    pub residual: f64,
    pub iterations: usize,
}

impl Dispatch {
    pub fn pcc_total_kw(&self) -> f64 {
        self.pcc_kw.iter().sum()
    }

    pub fn curtailment_kw(&self) -> f64 {
        self.bids.iter().map(|b| b.c_kw).sum()
    }
}

/// Rotated line impedance seen by phase `psi` from the flow on phase `chi`
/// around a balanced flat profile, in percent-per-kW (real part for P,
/// imaginary part for Q).
fn drop_coeff(z: &crate::netmodel::Mat3, psi: Phase, chi: Phase, s_phase: f64) -> (f64, f64) {
    let rot = chi.phasor() / psi.phasor();
    let zt = z[psi.index()][chi.index()] * rot;
    (100.0 * zt.re / s_phase, 100.0 * zt.im / s_phase)
}

fn validate_inputs(inp: &MarketInputs) -> Result<(), MarketError> {
    let net = &inp.network;
    if inp.demand_kw.len() != net.len() {
        return Err(MarketError::Forecast(format!("{} demand rows for {} buses", inp.demand_kw.len(), net.len())));
    }
    for (i, d) in inp.demand_kw.iter().enumerate() {
        let bus = &net.buses()[i];
        for p in Phase::ALL {
            let v = d[p.index()];
            if !v.is_finite() || (v != 0.0 && !bus.phases.contains(p)) {
                return Err(MarketError::Forecast(format!("bus {} phase {p}: demand {v}", bus.id)));
            }
        }
    }
    let s = &inp.settings;
    if !(s.power_factor > 0.0 && s.power_factor <= 1.0) || !(s.import_price.is_finite() && s.import_price >= 0.0) {
        return Err(MarketError::Forecast(format!("bad settings {s:?}")));
    }
    inp.coefficients.validate()?;
    let mut seen = BTreeSet::new();
    for b in &inp.bids {
        let i =
            net.bus_index(b.node_id).ok_or_else(|| MarketError::Bid(format!("node {} not in network", b.node_id)))?;
        if !seen.insert(b.node_id) {
            return Err(MarketError::Bid(format!("node {} has more than one bid", b.node_id)));
        }
        if !net.buses()[i].phases.contains(b.phase) {
            return Err(MarketError::Bid(format!("node {} has no phase {}", b.node_id, b.phase)));
        }
        let load = inp.demand_kw[i][b.phase.index()];
        if !(b.flexibility_kw >= 0.0) || b.flexibility_kw > load + 1e-9 || !(b.pv_capacity_kw >= 0.0) {
            return Err(MarketError::Bid(format!(
                "node {}: need 0 ≤ f ≤ load ({load:.4} kW) and ĝ ≥ 0, got f={}, ĝ={}",
                b.node_id, b.flexibility_kw, b.pv_capacity_kw
            )));
        }
        if inp.coefficients.node(b.node_id).is_none() {
            return Err(MarketError::Coefficients(format!("no coefficients for node {}", b.node_id)));
        }
    }
    Ok(())
}

/// Subtree sums of a per-bus quantity.
fn subtree_sums(net: &Network, v: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let topo = net.topology();
    let mut out = v.to_vec();
    for &i in topo.order.iter().rev() {
        if let Some(p) = topo.parent[i] {
            for k in 0..3 {
                out[p][k] += out[i][k];
            }
        }
    }
    out
}

/// Checks that every bus-phase voltage window intersects the range the
/// linearized model can reach with the offered bids.
fn check_voltage_reach(inp: &MarketInputs, q_kvar: &[[f64; 3]]) -> Result<(), MarketError> {
    let net = &inp.network;
    let topo = net.topology();
    let s_ph = net.phase_base_kw();
    let tx = net.transformer().series_impedance(net.base_kva());
    let flows_p = subtree_sums(net, &inp.demand_kw);
    let flows_q = subtree_sums(net, q_kvar);
    let root = topo.root;
    // deviation with no injections
    let mut e0 = vec![[0.0; 3]; net.len()];
    if let Some(z) = tx {
        for k in 0..3 {
            e0[root][k] = -100.0 * (z.re * flows_p[root][k] + z.im * flows_q[root][k]) / s_ph;
        }
    }
    for &i in topo.order.iter().skip(1) {
        let p = topo.parent[i].expect("non-root");
        let line = &net.lines()[topo.parent_line[i].expect("non-root")];
        let phases = net.buses()[i].phases;
        for psi in phases.iter() {
            let mut d = 0.0;
            for chi in phases.iter() {
                let (a, b) = drop_coeff(&line.z, psi, chi, s_ph);
                d += a * flows_p[i][chi.index()] + b * flows_q[i][chi.index()];
            }
            e0[i][psi.index()] = e0[p][psi.index()] - d;
        }
    }
    // raise of e per kW injected at each bid, bounded by its offer
    let mut lo = e0.clone();
    let mut hi = e0.clone();
    for b in &inp.bids {
        let j = net.bus_index(b.node_id).expect("validated");
        let reach = b.pv_capacity_kw + b.flexibility_kw;
        let path: BTreeSet<usize> = topo.path_from_root(j).into_iter().collect();
        for i in 0..net.len() {
            for psi in net.buses()[i].phases.iter() {
                let mut sens = 0.0;
                if psi == b.phase {
                    if let Some(z) = tx {
                        sens += 100.0 * z.re / s_ph;
                    }
                }
                for k in topo.path_from_root(i).into_iter().skip(1) {
                    if path.contains(&k) {
                        let line = &net.lines()[topo.parent_line[k].expect("non-root")];
                        sens += drop_coeff(&line.z, psi, b.phase, s_ph).0;
                    }
                }
                let delta = sens * reach;
                lo[i][psi.index()] += delta.min(0.0);
                hi[i][psi.index()] += delta.max(0.0);
            }
        }
    }
    for (i, bus) in net.buses().iter().enumerate() {
        for psi in bus.phases.iter() {
            let (l, h) = (1.0 + lo[i][psi.index()] / 100.0, 1.0 + hi[i][psi.index()] / 100.0);
            if h < bus.vmin - 1e-9 || l > bus.vmax + 1e-9 {
                return Err(MarketError::Infeasible {
                    bus: bus.id,
                    phase: psi,
                    lo: l,
                    hi: h,
                    vmin: bus.vmin,
                    vmax: bus.vmax,
                });
            }
        }
    }
    Ok(())
}

/// Builds the clearing QP. Variables of a bus (and the flow on its parent
/// line) belong to that bus's atom.
pub fn assemble_acopf(inputs: &MarketInputs) -> Result<MarketProblem, MarketError> {
    validate_inputs(inputs)?;
    let net = &inputs.network;
    let topo = net.topology();
    let n = net.len();
    let s_ph = net.phase_base_kw();
    let tan_phi = (1.0 / (inputs.settings.power_factor * inputs.settings.power_factor) - 1.0).max(0.0).sqrt();
    let q_kvar: Vec<[f64; 3]> = inputs.demand_kw.iter().map(|d| d.map(|v| v * tan_phi)).collect();
    check_voltage_reach(inputs, &q_kvar)?;
    let flows_q = subtree_sums(net, &q_kvar);
    let root = topo.root;

    let mut qp = QuadraticProgram::new(n);
    let mut vars = VarIndex {
        g: Vec::with_capacity(inputs.bids.len()),
        c: Vec::with_capacity(inputs.bids.len()),
        e: vec![[None; 3]; n],
        p: vec![[None; 3]; n],
        pcc: [None; 3],
    };
    let coeffs = &inputs.coefficients;
    let mut bid_at = vec![None; n];
    for (k, b) in inputs.bids.iter().enumerate() {
        let i = net.bus_index(b.node_id).expect("validated");
        bid_at[i] = Some(k);
        let nc = coeffs.node(b.node_id).expect("validated");
        let g = qp.add_var(0.0, b.pv_capacity_kw, i);
        let c = qp.add_var(0.0, b.flexibility_kw, i);
        qp.add_objective_term(g, g, nc.alpha[b.phase.index()]);
        qp.add_objective_term(c, c, nc.beta[b.phase.index()]);
        vars.g.push(g);
        vars.c.push(c);
    }
    for (i, bus) in net.buses().iter().enumerate() {
        for psi in bus.phases.iter() {
            let k = psi.index();
            vars.e[i][k] = Some(qp.add_var(100.0 * (bus.vmin - 1.0), 100.0 * (bus.vmax - 1.0), i));
            if i == root {
                let pcc = qp.add_var(f64::NEG_INFINITY, f64::INFINITY, i);
                qp.linear[pcc] = inputs.settings.import_price;
                vars.pcc[k] = Some(pcc);
            } else {
                let pv = qp.add_var(f64::NEG_INFINITY, f64::INFINITY, i);
                vars.p[i][k] = Some(pv);
                let line = &net.lines()[topo.parent_line[i].expect("non-root")];
                let r = line.z[k][k].re;
                let w = coeffs.xi[k] * r / s_ph;
                qp.add_objective_term(pv, pv, w);
                qp.constant += w * flows_q[i][k] * flows_q[i][k];
            }
        }
    }
    // power balance per bus and phase
    for (i, bus) in net.buses().iter().enumerate() {
        for psi in bus.phases.iter() {
            let k = psi.index();
            let mut terms = Vec::new();
            terms.push((if i == root { vars.pcc[k] } else { vars.p[i][k] }.expect("present"), 1.0));
            for &ch in &topo.children[i] {
                if let Some(v) = vars.p[ch][k] {
                    terms.push((v, -1.0));
                }
            }
            if let Some(b) = bid_at[i] {
                if inputs.bids[b].phase == psi {
                    terms.push((vars.g[b], 1.0));
                    terms.push((vars.c[b], 1.0));
                }
            }
            qp.add_equality(terms, inputs.demand_kw[i][k], i);
        }
    }
    // voltage at the busbar
    let tx = net.transformer().series_impedance(net.base_kva());
    for psi in net.buses()[root].phases.iter() {
        let k = psi.index();
        let e = vars.e[root][k].expect("present");
        match tx {
            Some(z) => {
                let pcc = vars.pcc[k].expect("present");
                qp.add_equality(
                    vec![(e, 1.0), (pcc, 100.0 * z.re / s_ph)],
                    -100.0 * z.im * flows_q[root][k] / s_ph,
                    root,
                )
            }
            None => qp.add_equality(vec![(e, 1.0)], 0.0, root),
        }
    }
    // voltage drop along each line
    for &i in topo.order.iter().skip(1) {
        let p = topo.parent[i].expect("non-root");
        let line = &net.lines()[topo.parent_line[i].expect("non-root")];
        let phases = net.buses()[i].phases;
        for psi in phases.iter() {
            let mut terms = vec![
                (vars.e[i][psi.index()].expect("present"), 1.0),
                (vars.e[p][psi.index()].expect("parent phase"), -1.0),
            ];
            let mut rhs = 0.0;
            for chi in phases.iter() {
                let (a, b) = drop_coeff(&line.z, psi, chi, s_ph);
                if a != 0.0 {
                    terms.push((vars.p[i][chi.index()].expect("present"), a));
                }
                rhs -= b * flows_q[i][chi.index()];
            }
            qp.add_equality(terms, rhs, i);
        }
    }
    Ok(MarketProblem { qp, vars, inputs: inputs.clone(), q_kvar })
}

/// Solves the clearing QP and validates the dispatch with a nonlinear
/// power flow.
pub fn clear_market(problem: &MarketProblem, solver: SolverChoice) -> Result<Dispatch, MarketError> {
    clear_market_with(problem, solver, &CentralOptions::default(), &DistributedOptions::default())
}

pub fn clear_market_with(
    problem: &MarketProblem,
    solver: SolverChoice,
    central: &CentralOptions,
    distributed: &DistributedOptions,
) -> Result<Dispatch, MarketError> {
    let net = &problem.inputs.network;
    let sol = match solver {
        SolverChoice::Central => solve_centralized(&problem.qp, central)?,
        SolverChoice::Distributed => {
            let part = partition_atoms(&problem.qp, net)?;
            solve_distributed(&part, distributed)?.solution
        }
    };
    let bids: Vec<BidDispatch> = problem
        .inputs
        .bids
        .iter()
        .enumerate()
        .map(|(k, b)| BidDispatch {
            node_id: b.node_id,
            phase: b.phase,
            g_kw: sol.x[problem.vars.g[k]].clamp(0.0, b.pv_capacity_kw),
            c_kw: sol.x[problem.vars.c[k]].clamp(0.0, b.flexibility_kw),
        })
        .collect();
    let (p_inj, q_inj) = dispatch_injections(problem, &bids);
    let pf =
        PowerFlowSolver::new(net)?.solve(&InjectionSet::from_kw(net, &p_inj, &q_inj), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let mags = pf.voltage_magnitudes();
    let mut warnings = Vec::new();
    let (mut vlo, mut vhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (i, bus) in net.buses().iter().enumerate() {
        for p in bus.phases.iter() {
            let v = mags[i][p.index()];
            vlo = vlo.min(v);
            vhi = vhi.max(v);
            if v < bus.vmin - VOLTAGE_CHECK_BAND || v > bus.vmax + VOLTAGE_CHECK_BAND {
                warnings.push(format!("bus {} phase {p}: {v:.4} pu outside [{}, {}]", bus.id, bus.vmin, bus.vmax));
            }
        }
    }
    Ok(Dispatch {
        bids,
        objective: sol.objective,
        losses_kw: pf.total_losses_kw(),
        pcc_kw: pf.pcc_kw,
        min_voltage_pu: vlo,
        max_voltage_pu: vhi,
        warnings,
        residual: sol.kkt_residual,
        iterations: sol.iterations,
    })
}

/// Net injections (generation positive) implied by a dispatch against the
/// forecast demand.
pub fn dispatch_injections(problem: &MarketProblem, bids: &[BidDispatch]) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let net = &problem.inputs.network;
    let mut p: Vec<[f64; 3]> = problem.inputs.demand_kw.iter().map(|d| d.map(|v| -v)).collect();
    let q: Vec<[f64; 3]> = problem.q_kvar.iter().map(|d| d.map(|v| -v)).collect();
    for b in bids {
        let i = net.bus_index(b.node_id).expect("validated");
        p[i][b.phase.index()] += b.g_kw + b.c_kw;
    }
    (p, q)
}

#[derive(Clone, Debug)]
pub struct Mitigation {
    pub coefficients: Coefficients,
    pub dispatch: Dispatch,
}

/// Updates the coefficients from the attack context, removes the PV of
/// attacked nodes and clears again.
pub fn mitigate_redispatch(
    inputs: &MarketInputs,
    ctx: &MitigationContext,
    attacked: &BTreeSet<u32>,
    solver: SolverChoice,
) -> Result<Mitigation, MarketError> {
    let coefficients = update_coefficients(ctx, &inputs.coefficients)?;
    let mut next = inputs.clone();
    next.coefficients = coefficients.clone();
    for b in &mut next.bids {
        if attacked.contains(&b.node_id) {
            b.pv_capacity_kw = 0.0;
        }
    }
    let dispatch = clear_market(&assemble_acopf(&next)?, solver)?;
    Ok(Mitigation { coefficients, dispatch })
}

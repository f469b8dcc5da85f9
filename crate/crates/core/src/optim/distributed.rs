//! Consensus ADMM over per-bus atoms.
//!
//! Each atom owns its variables and constraint rows and keeps local copies
//! of neighbours' variables that appear in its rows. One iteration: every
//! atom solves its equality-constrained proximal QP (inequality rows get a
//! local slack), the consensus value of each variable is the box-projected
//! mean of its copies, and the scaled duals absorb the disagreement. During
//! the first iterations the penalty ρ is doubled or halved when the primal
//! and dual residuals drift apart by more than 10×.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{OptimError, QuadraticProgram, Solution};
use crate::netmodel::Network;

const DIVERGENCE_FACTOR: f64 = 1e3;

/// A variable copied into a non-owning atom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedVariable {
    pub var: usize,
    pub owner: usize,
    pub atom: usize,
}

#[derive(Clone, Debug)]
pub struct Atom {
    pub id: usize,
    pub owned: Vec<usize>,
    /// Variables of other atoms referenced by this atom's rows.
    pub copies: Vec<usize>,
    pub equalities: Vec<usize>,
    pub inequalities: Vec<usize>,
    pub neighbors: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AtomPartition {
    pub qp: QuadraticProgram,
    pub atoms: Vec<Atom>,
    pub shared: Vec<SharedVariable>,
}

/// Splits `qp` into one atom per bus of `net`; atoms may only share
/// variables across feeder lines.
pub fn partition_atoms(qp: &QuadraticProgram, net: &Network) -> Result<AtomPartition, OptimError> {
    if let Some(j) = qp.owner.iter().position(|o| o.is_none()) {
        return Err(OptimError::Unowned(j));
    }
    qp.validate()?;
    if qp.n_atoms != net.len() {
        return Err(OptimError::Invalid(format!("{} atoms for a {}-bus network", qp.n_atoms, net.len())));
    }
    let owner: Vec<usize> = qp.owner.iter().map(|o| o.expect("checked above")).collect();
    for &(i, j, _) in &qp.quad {
        if owner[i] != owner[j] {
            return Err(OptimError::Invalid(format!("objective couples atoms {} and {}", owner[i], owner[j])));
        }
    }
    let mut atoms: Vec<Atom> = (0..qp.n_atoms)
        .map(|id| Atom {
            id,
            owned: Vec::new(),
            copies: Vec::new(),
            equalities: Vec::new(),
            inequalities: Vec::new(),
            neighbors: Vec::new(),
        })
        .collect();
    for (j, &a) in owner.iter().enumerate() {
        atoms[a].owned.push(j);
    }
    for (k, r) in qp.equalities.iter().enumerate() {
        atoms[r.owner].equalities.push(k);
    }
    for (k, r) in qp.inequalities.iter().enumerate() {
        atoms[r.owner].inequalities.push(k);
    }
    let adjacent: BTreeSet<(usize, usize)> = net
        .lines()
        .iter()
        .filter_map(|l| Some((net.bus_index(l.from)?, net.bus_index(l.to)?)))
        .flat_map(|(a, b)| [(a, b), (b, a)])
        .collect();
    let mut shared = Vec::new();
    for atom in &mut atoms {
        let mut copies = BTreeSet::new();
        let rows = atom
            .equalities
            .iter()
            .map(|k| &qp.equalities[*k])
            .chain(atom.inequalities.iter().map(|k| &qp.inequalities[*k]));
        for r in rows {
            for (j, _) in &r.terms {
                if owner[*j] != atom.id {
                    copies.insert(*j);
                }
            }
        }
        let mut neighbors = BTreeSet::new();
        for &j in &copies {
            let o = owner[j];
            if !adjacent.contains(&(atom.id, o)) {
                return Err(OptimError::Invalid(format!("atoms {} and {o} share variable {j} but no line", atom.id)));
            }
            neighbors.insert(o);
            shared.push(SharedVariable { var: j, owner: o, atom: atom.id });
        }
        atom.copies = copies.into_iter().collect();
        atom.neighbors.extend(neighbors);
    }
    // neighbour lists are symmetric
    let pairs: Vec<(usize, usize)> = atoms.iter().flat_map(|a| a.neighbors.iter().map(move |b| (*b, a.id))).collect();
    for (a, b) in pairs {
        if !atoms[a].neighbors.contains(&b) {
            atoms[a].neighbors.push(b);
        }
    }
    for a in &mut atoms {
        a.neighbors.sort_unstable();
    }
    Ok(AtomPartition { qp: qp.clone(), atoms, shared })
}

#[derive(Clone, Debug)]
pub struct DistributedOptions {
    pub rho: f64,
    /// Bound on both the largest copy disagreement and the scaled change
    /// of the consensus values between iterations.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    /// Amplitude of the seeded perturbation of the starting point.
    pub jitter: f64,
    /// Iterations between ρ adjustments.
    pub adapt_every: usize,
    /// ρ stays fixed after this many iterations.
    pub adapt_until: usize,
}

impl Default for DistributedOptions {
    fn default() -> Self {
        DistributedOptions {
            rho: 1.0,
            tol: 1e-7,
            max_iter: 50_000,
            seed: 0,
            jitter: 1e-3,
            adapt_every: 10,
            adapt_until: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub rho: f64,
}

#[derive(Clone, Debug)]
pub struct DistributedSolution {
    /// `kkt_residual` holds the final consensus residual.
    pub solution: Solution,
    pub trace: Vec<TraceRow>,
}

struct LocalProblem {
    /// Indices into the extended variable vector; owned variables first.
    vars: Vec<usize>,
    hess: DMatrix<f64>,
    lin: Vec<f64>,
    rows: Vec<(Vec<(usize, f64)>, f64)>,
    factor: Option<LU<f64, Dyn, Dyn>>,
}

impl LocalProblem {
    fn factorize(&mut self, rho: f64) -> Result<(), OptimError> {
        let n = self.vars.len();
        let m = self.rows.len();
        let mut k = DMatrix::<f64>::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&self.hess);
        for i in 0..n {
            k[(i, i)] += rho;
        }
        for (r, (terms, _)) in self.rows.iter().enumerate() {
            for &(j, a) in terms {
                k[(n + r, j)] += a;
                k[(j, n + r)] += a;
            }
            k[(n + r, n + r)] = -1e-12;
        }
        let lu = k.lu();
        if !lu.is_invertible() {
            return Err(OptimError::Solver("singular local KKT system".into()));
        }
        self.factor = Some(lu);
        Ok(())
    }

    fn solve(&self, rho: f64, target: &[f64]) -> Vec<f64> {
        let n = self.vars.len();
        let mut rhs = DVector::<f64>::zeros(n + self.rows.len());
        for i in 0..n {
            rhs[i] = rho * target[i] - self.lin[i];
        }
        for (r, (_, b)) in self.rows.iter().enumerate() {
            rhs[n + r] = *b;
        }
        let sol = self.factor.as_ref().expect("factorized").solve(&rhs).expect("invertible");
        sol.as_slice()[..n].to_vec()
    }
}

fn build_locals(part: &AtomPartition) -> (Vec<LocalProblem>, Vec<f64>, Vec<f64>) {
    let qp = &part.qp;
    let n = qp.n_vars();
    let mut lower = qp.lower.clone();
    let mut upper = qp.upper.clone();
    // one non-negative slack per inequality row, owned by the row's atom
    let mut slack_of = vec![0; qp.inequalities.len()];
    for k in 0..qp.inequalities.len() {
        slack_of[k] = n + k;
        lower.push(0.0);
        upper.push(f64::INFINITY);
    }
    let locals = part
        .atoms
        .iter()
        .map(|atom| {
            let mut vars = atom.owned.clone();
            vars.extend(atom.inequalities.iter().map(|k| slack_of[*k]));
            vars.extend(&atom.copies);
            let pos = |g: usize| vars.iter().position(|v| *v == g).expect("local variable");
            let nl = vars.len();
            let mut hess = DMatrix::<f64>::zeros(nl, nl);
            let mut lin = vec![0.0; nl];
            for (li, &g) in atom.owned.iter().enumerate() {
                lin[li] = qp.linear[g];
            }
            for &(i, j, v) in &qp.quad {
                if qp.owner[i] == Some(atom.id) {
                    let (a, b) = (pos(i), pos(j));
                    hess[(a, b)] += v;
                    if a != b {
                        hess[(b, a)] += v;
                    }
                }
            }
            let mut rows = Vec::new();
            for &k in &atom.equalities {
                let r = &qp.equalities[k];
                rows.push((r.terms.iter().map(|(j, a)| (pos(*j), *a)).collect(), r.rhs));
            }
            for &k in &atom.inequalities {
                let r = &qp.inequalities[k];
                let mut t: Vec<(usize, f64)> = r.terms.iter().map(|(j, a)| (pos(*j), *a)).collect();
                t.push((pos(slack_of[k]), 1.0));
                rows.push((t, r.rhs));
            }
            LocalProblem { vars, hess, lin, rows, factor: None }
        })
        .collect();
    (locals, lower, upper)
}

/// Consensus ADMM on a partitioned QP. Deterministic for a given seed.
pub fn solve_distributed(part: &AtomPartition, opts: &DistributedOptions) -> Result<DistributedSolution, OptimError> {
    if !(opts.rho > 0.0) || !(opts.tol > 0.0) {
        return Err(OptimError::Invalid(format!("need ρ > 0 and tol > 0, got ρ={}, tol={}", opts.rho, opts.tol)));
    }
    let n = part.qp.n_vars();
    let (mut locals, lower, upper) = build_locals(part);
    let ne = lower.len();
    let mut rho = opts.rho;
    for l in &mut locals {
        l.factorize(rho)?;
    }
    let mut copies = vec![0usize; ne];
    for l in &locals {
        for &g in &l.vars {
            copies[g] += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut z: Vec<f64> = (0..ne).map(|j| (opts.jitter * rng.gen_range(-1.0..1.0)).clamp(lower[j], upper[j])).collect();
    let mut u: Vec<Vec<f64>> = locals.iter().map(|l| vec![0.0; l.vars.len()]).collect();
    let mut trace: Vec<TraceRow> = Vec::new();
    for it in 1..=opts.max_iter {
        let xs: Vec<Vec<f64>> = locals
            .par_iter()
            .zip(&u)
            .map(|(l, ua)| {
                let target: Vec<f64> = l.vars.iter().zip(ua).map(|(g, ui)| z[*g] - ui).collect();
                l.solve(rho, &target)
            })
            .collect();
        let mut acc = vec![0.0; ne];
        for (l, (xa, ua)) in locals.iter().zip(xs.iter().zip(&u)) {
            for (k, &g) in l.vars.iter().enumerate() {
                acc[g] += xa[k] + ua[k];
            }
        }
        let mut dz: f64 = 0.0;
        for j in 0..ne {
            let v = (acc[j] / copies[j] as f64).clamp(lower[j], upper[j]);
            dz = dz.max((v - z[j]).abs());
            z[j] = v;
        }
        let mut primal: f64 = 0.0;
        for (l, (xa, ua)) in locals.iter().zip(xs.iter().zip(u.iter_mut())) {
            for (k, &g) in l.vars.iter().enumerate() {
                let d = xa[k] - z[g];
                ua[k] += d;
                primal = primal.max(d.abs());
            }
        }
        let dual = rho * dz;
        let objective = part.qp.objective(&z[..n]);
        trace.push(TraceRow { iteration: it, primal_residual: primal, dual_residual: dual, objective, rho });
        if !primal.is_finite() || !dual.is_finite() {
            return Err(OptimError::Divergence { iteration: it, disagreement: primal, trace });
        }
        if primal <= opts.tol && dual <= opts.tol {
            let x = z[..n].to_vec();
            let solution =
                Solution { objective: part.qp.objective(&x), x, iterations: it, kkt_residual: primal.max(dual) };
            return Ok(DistributedSolution { solution, trace });
        }
        // residuals oscillate on long feeders, so only a blow-up counts
        if primal > DIVERGENCE_FACTOR * trace[0].primal_residual.max(1.0) {
            return Err(OptimError::Divergence { iteration: it, disagreement: primal, trace });
        }
        if opts.adapt_every > 0 && it <= opts.adapt_until && it % opts.adapt_every == 0 {
            let factor = if primal > 10.0 * dual {
                2.0
            } else if dual > 10.0 * primal {
                0.5
            } else {
                1.0
            };
            if factor != 1.0 {
                rho *= factor;
                for ua in &mut u {
                    ua.iter_mut().for_each(|v| *v /= factor);
                }
                for l in &mut locals {
                    l.factorize(rho)?;
                }
            }
        }
    }
    let last = trace.last().map(|r| r.primal_residual.max(r.dual_residual)).unwrap_or(f64::NAN);
    Err(OptimError::MaxIterations { iterations: opts.max_iter, residual: last })
}

/// Convergence trace as CSV, one row per iteration.
pub fn write_trace(path: impl AsRef<Path>, trace: &[TraceRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "primal_residual", "dual_residual", "objective", "rho"])?;
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            format!("{:.6e}", r.primal_residual),
            format!("{:.6e}", r.dual_residual),
            format!("{:.9e}", r.objective),
            format!("{:.6e}", r.rho),
        ])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::{Bus, Line, Network, PhaseSet, Transformer};
    use crate::optim::{solve_centralized, CentralOptions};

    fn two_bus() -> Network {
        let buses = vec![Bus::slack(0), Bus::new(1, PhaseSet::ABC)];
        let lines = vec![Line::uniform(0, 1, num_complex::Complex64::new(0.01, 0.01))];
        Network::new(buses, lines, Transformer::default(), 250.0, 400.0).unwrap()
    }

    // atom 1 owns y and a row tying it to atom 0's x
    fn coupled_toy() -> QuadraticProgram {
        let mut qp = QuadraticProgram::new(2);
        let x = qp.add_var(-10.0, 10.0, 0);
        let y = qp.add_var(0.0, 10.0, 1);
        let w = qp.add_var(-10.0, 10.0, 1);
        qp.add_objective_term(x, x, 1.0);
        qp.linear[x] = -4.0;
        qp.add_objective_term(y, y, 2.0);
        qp.add_objective_term(w, w, 0.5);
        qp.add_equality(vec![(y, 1.0), (x, -1.0), (w, 1.0)], 1.0, 1);
        qp.add_inequality(vec![(x, 1.0)], 1.5, 0);
        qp
    }

    #[test]
    fn two_atom_toy_matches_central() {
        let qp = coupled_toy();
        let part = partition_atoms(&qp, &two_bus()).unwrap();
        assert_eq!(part.atoms.len(), 2);
        assert_eq!(part.shared, vec![SharedVariable { var: 0, owner: 0, atom: 1 }]);
        assert_eq!(part.atoms[0].neighbors, vec![1]);
        let c = solve_centralized(&qp, &CentralOptions::default()).unwrap();
        let d = solve_distributed(&part, &DistributedOptions { tol: 1e-8, ..Default::default() }).unwrap();
        for (a, b) in c.x.iter().zip(&d.solution.x) {
            assert!((a - b).abs() < 1e-5, "{:?} vs {:?}", c.x, d.solution.x);
        }
        assert!((c.objective - d.solution.objective).abs() < 1e-5);
    }

    #[test]
    fn deterministic_for_seed() {
        let part = partition_atoms(&coupled_toy(), &two_bus()).unwrap();
        let a = solve_distributed(&part, &DistributedOptions { seed: 3, ..Default::default() }).unwrap();
        let b = solve_distributed(&part, &DistributedOptions { seed: 3, ..Default::default() }).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn unowned_variable_rejected() {
        let mut qp = coupled_toy();
        qp.owner[1] = None;
        assert!(matches!(partition_atoms(&qp, &two_bus()), Err(OptimError::Unowned(1))));
    }

    #[test]
    fn bad_rho_rejected() {
        let part = partition_atoms(&coupled_toy(), &two_bus()).unwrap();
        assert!(solve_distributed(&part, &DistributedOptions { rho: 0.0, ..Default::default() }).is_err());
    }
}

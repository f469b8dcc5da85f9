use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

use super::{OptimError, QuadraticProgram, Solution};

#[derive(Clone, Debug)]
pub struct CentralOptions {
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for CentralOptions {
    fn default() -> Self {
        CentralOptions { tol: 1e-6, max_iter: 200 }
    }
}

/// Rows in the solver's `A x + s = b` form: equalities first, then
/// inequalities, then finite bounds.
struct ConicRows {
    rows: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    n_eq: usize,
}

fn conic_rows(qp: &QuadraticProgram) -> ConicRows {
    let mut rows = Vec::new();
    let mut b = Vec::new();
    for r in &qp.equalities {
        rows.push(r.terms.clone());
        b.push(r.rhs);
    }
    // fixed variables become equalities
    for j in 0..qp.n_vars() {
        if qp.lower[j] == qp.upper[j] {
            rows.push(vec![(j, 1.0)]);
            b.push(qp.lower[j]);
        }
    }
    let n_eq = rows.len();
    for r in &qp.inequalities {
        rows.push(r.terms.clone());
        b.push(r.rhs);
    }
    for j in 0..qp.n_vars() {
        if qp.lower[j] == qp.upper[j] {
            continue;
        }
        if qp.upper[j].is_finite() {
            rows.push(vec![(j, 1.0)]);
            b.push(qp.upper[j]);
        }
        if qp.lower[j].is_finite() {
            rows.push(vec![(j, -1.0)]);
            b.push(-qp.lower[j]);
        }
    }
    ConicRows { rows, b, n_eq }
}

/// KKT residual of a primal-dual pair for rows in `A x + s = b` form with
/// `s = 0` on the first `n_eq` rows and `s ≥ 0` on the rest: the largest
/// of stationarity, primal infeasibility, dual infeasibility and
/// complementarity, each relative to the problem data scale.
fn conic_kkt(qp: &QuadraticProgram, rows: &ConicRows, x: &[f64], z: &[f64]) -> f64 {
    let mut grad = qp.hessian_product(x);
    for (g, c) in grad.iter_mut().zip(&qp.linear) {
        *g += c;
    }
    for (row, zi) in rows.rows.iter().zip(z) {
        for (j, a) in row {
            grad[*j] += a * zi;
        }
    }
    let q_scale = 1.0 + qp.linear.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let b_scale = 1.0 + rows.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let stat = grad.iter().fold(0.0f64, |m, v| m.max(v.abs())) / q_scale;
    let mut prim: f64 = 0.0;
    let mut dual: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for (k, (row, zi)) in rows.rows.iter().zip(z).enumerate() {
        let ax: f64 = row.iter().map(|(j, a)| a * x[*j]).sum();
        let slack = rows.b[k] - ax;
        if k < rows.n_eq {
            prim = prim.max(slack.abs());
        } else {
            prim = prim.max(-slack);
            dual = dual.max(-zi);
            comp = comp.max((zi * slack).abs());
        }
    }
    stat.max(prim / b_scale).max(dual / q_scale).max(comp / (q_scale * b_scale))
}

/// KKT residual of `x` with multipliers `z` ordered as the solver rows
/// (equalities, fixed variables, inequalities, upper then lower bounds).
pub fn kkt_residual(qp: &QuadraticProgram, x: &[f64], z: &[f64]) -> f64 {
    conic_kkt(qp, &conic_rows(qp), x, z)
}

fn csc(m: usize, n: usize, entries: impl Iterator<Item = (usize, usize, f64)>) -> CscMatrix<f64> {
    let (mut ii, mut jj, mut vv) = (Vec::new(), Vec::new(), Vec::new());
    for (i, j, v) in entries {
        if v != 0.0 {
            ii.push(i);
            jj.push(j);
            vv.push(v);
        }
    }
    // from_triplets trips a debug assertion when there are no entries
    if vv.is_empty() {
        return CscMatrix::zeros((m, n));
    }
    CscMatrix::new_from_triplets(m, n, ii, jj, vv)
}

/// Interior-point solve of the full QP.
pub fn solve_centralized(qp: &QuadraticProgram, opts: &CentralOptions) -> Result<Solution, OptimError> {
    qp.validate()?;
    let n = qp.n_vars();
    if n == 0 {
        return Ok(Solution { x: Vec::new(), objective: qp.constant, iterations: 0, kkt_residual: 0.0 });
    }
    let rows = conic_rows(qp);
    let m = rows.rows.len();
    let p = csc(n, n, qp.quad.iter().copied());
    let a = csc(m, n, rows.rows.iter().enumerate().flat_map(|(i, r)| r.iter().map(move |(j, v)| (i, *j, *v))));
    let mut cones = Vec::new();
    if rows.n_eq > 0 {
        cones.push(SupportedConeT::ZeroConeT(rows.n_eq));
    }
    if m > rows.n_eq {
        cones.push(SupportedConeT::NonnegativeConeT(m - rows.n_eq));
    }
    let tol = opts.tol.min(1e-8);
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(opts.max_iter)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .tol_feas(tol)
        .presolve_enable(false)
        .build()
        .map_err(|e| OptimError::Solver(format!("{e:?}")))?;
    let mut solver = DefaultSolver::new(&p, &qp.linear, &a, &rows.b, &cones, settings);
    solver.solve();
    let sol = &solver.solution;
    let iterations = sol.iterations as usize;
    match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(OptimError::Infeasible("primal infeasibility certificate".into()))
        }
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => {
            return Err(OptimError::Infeasible("objective unbounded below".into()))
        }
        SolverStatus::MaxIterations | SolverStatus::MaxTime => {
            return Err(OptimError::MaxIterations { iterations, residual: sol.r_prim.max(sol.r_dual) })
        }
        other => return Err(OptimError::Solver(format!("{other:?}"))),
    }
    let x = sol.x.clone();
    let kkt = conic_kkt(qp, &rows, &x, &sol.z);
    if !(kkt <= opts.tol) {
        return Err(OptimError::MaxIterations { iterations, residual: kkt });
    }
    Ok(Solution { objective: qp.objective(&x), x, iterations, kkt_residual: kkt })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn active_lower_bound() {
        let mut qp = QuadraticProgram::new(1);
        let x = qp.add_var(1.0, f64::INFINITY, 0);
        qp.add_objective_term(x, x, 1.0);
        let s = solve_centralized(&qp, &CentralOptions::default()).unwrap();
        assert!((s.x[0] - 1.0).abs() < 1e-7);
        assert!(s.kkt_residual <= 1e-6);
    }

    #[test]
    fn unconstrained_diagonal() {
        let mut qp = QuadraticProgram::new(1);
        let h = [2.0, 4.0, 0.5];
        let c = [1.0, -2.0, 3.0];
        for k in 0..3 {
            let v = qp.add_var(f64::NEG_INFINITY, f64::INFINITY, 0);
            qp.add_objective_term(v, v, h[k] / 2.0);
            qp.linear[v] = c[k];
        }
        let s = solve_centralized(&qp, &CentralOptions::default()).unwrap();
        for k in 0..3 {
            assert!((s.x[k] + c[k] / h[k]).abs() < 1e-7, "{k}: {}", s.x[k]);
        }
    }

    #[test]
    fn infeasible_rows_reported() {
        let mut qp = QuadraticProgram::new(1);
        let x = qp.add_var(0.0, 1.0, 0);
        qp.add_objective_term(x, x, 1.0);
        qp.add_equality(vec![(x, 1.0)], 2.0, 0);
        assert!(matches!(solve_centralized(&qp, &CentralOptions::default()), Err(OptimError::Infeasible(_))));
    }

    #[test]
    fn equality_with_fixed_variable() {
        // min x² + y² s.t. x + y = 3, y fixed at 1
        let mut qp = QuadraticProgram::new(1);
        let x = qp.add_var(f64::NEG_INFINITY, f64::INFINITY, 0);
        let y = qp.add_var(1.0, 1.0, 0);
        qp.add_objective_term(x, x, 1.0);
        qp.add_objective_term(y, y, 1.0);
        qp.add_equality(vec![(x, 1.0), (y, 1.0)], 3.0, 0);
        let s = solve_centralized(&qp, &CentralOptions::default()).unwrap();
        assert!((s.x[0] - 2.0).abs() < 1e-7 && (s.x[1] - 1.0).abs() < 1e-7);
        assert!((s.objective - 5.0).abs() < 1e-6);
    }
}

//! Convex QP solvers for market clearing: a centralized interior-point
//! reference and a distributed consensus scheme over per-bus atoms.

mod central;
mod distributed;

use serde::Serialize;
use thiserror::Error;

pub use central::{kkt_residual, solve_centralized, CentralOptions};
pub use distributed::{
    partition_atoms, solve_distributed, write_trace, Atom, AtomPartition, DistributedOptions, DistributedSolution,
    SharedVariable, TraceRow,
};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid problem: {0}")]
    Invalid(String),
    #[error("objective is not positive semidefinite")]
    NotConvex,
    #[error("variable {0} has no owning atom")]
    Unowned(usize),
    #[error("problem is infeasible: {0}")]
    Infeasible(String),
    #[error("no solution after {iterations} iterations (residual {residual:.3e})")]
    MaxIterations { iterations: usize, residual: f64 },
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("distributed iteration diverged at iteration {iteration}: disagreement {disagreement:.3e}")]
    Divergence { iteration: usize, disagreement: f64, trace: Vec<TraceRow> },
}

/// `Σ terms · x (= or ≤) rhs`, owned by one atom.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConstraint {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
    pub owner: usize,
}

impl LinearConstraint {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(j, a)| a * x[*j]).sum()
    }
}

/// minimize ½ xᵀPx + qᵀx + constant subject to equality rows, `≤`
/// inequality rows and box bounds. Every variable is owned by one atom.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuadraticProgram {
    /// Upper-triangular entries `(i, j, v)` with `i ≤ j` of the symmetric P;
    /// repeated entries add up.
    pub quad: Vec<(usize, usize, f64)>,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub equalities: Vec<LinearConstraint>,
    pub inequalities: Vec<LinearConstraint>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub owner: Vec<Option<usize>>,
    pub n_atoms: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct Solution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
}

impl QuadraticProgram {
    pub fn new(n_atoms: usize) -> Self {
        QuadraticProgram { n_atoms, ..Default::default() }
    }

    pub fn n_vars(&self) -> usize {
        self.linear.len()
    }

    pub fn add_var(&mut self, lower: f64, upper: f64, owner: usize) -> usize {
        self.linear.push(0.0);
        self.lower.push(lower);
        self.upper.push(upper);
        self.owner.push(Some(owner));
        self.linear.len() - 1
    }

    /// Adds `v · x_i · x_j` to the objective (`v · x_i²` when `i == j`).
    pub fn add_objective_term(&mut self, i: usize, j: usize, v: f64) {
        if i == j {
            self.quad.push((i, i, 2.0 * v));
        } else {
            self.quad.push((i.min(j), i.max(j), v));
        }
    }

    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64, owner: usize) {
        self.equalities.push(LinearConstraint { terms, rhs, owner });
    }

    pub fn add_inequality(&mut self, terms: Vec<(usize, f64)>, rhs: f64, owner: usize) {
        self.inequalities.push(LinearConstraint { terms, rhs, owner });
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut f = self.constant + self.linear.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
        for &(i, j, v) in &self.quad {
            f += if i == j { 0.5 * v * x[i] * x[i] } else { v * x[i] * x[j] };
        }
        f
    }

    /// P·x using the symmetric expansion of the stored triangle.
    pub fn hessian_product(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for &(i, j, v) in &self.quad {
            out[i] += v * x[j];
            if i != j {
                out[j] += v * x[i];
            }
        }
        out
    }

    /// Largest bound or row violation at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for (j, v) in x.iter().enumerate() {
            worst = worst.max(self.lower[j] - v).max(v - self.upper[j]);
        }
        for r in &self.equalities {
            worst = worst.max((r.eval(x) - r.rhs).abs());
        }
        for r in &self.inequalities {
            worst = worst.max(r.eval(x) - r.rhs);
        }
        worst
    }

    /// Dimension, bound and convexity checks.
    pub fn validate(&self) -> Result<(), OptimError> {
        let n = self.n_vars();
        if self.lower.len() != n || self.upper.len() != n || self.owner.len() != n {
            return Err(OptimError::Invalid("per-variable arrays differ in length".into()));
        }
        for j in 0..n {
            if !(self.lower[j] <= self.upper[j]) || self.lower[j] == f64::INFINITY || self.upper[j] == f64::NEG_INFINITY
            {
                return Err(OptimError::Infeasible(format!(
                    "variable {j} has empty bounds [{}, {}]",
                    self.lower[j], self.upper[j]
                )));
            }
        }
        for &(i, j, v) in &self.quad {
            if i > j || j >= n || !v.is_finite() {
                return Err(OptimError::Invalid(format!("bad quadratic entry ({i}, {j}, {v})")));
            }
        }
        for r in self.equalities.iter().chain(&self.inequalities) {
            if r.owner >= self.n_atoms || r.terms.iter().any(|(j, a)| *j >= n || !a.is_finite()) || !r.rhs.is_finite() {
                return Err(OptimError::Invalid("constraint row references unknown variable or atom".into()));
            }
        }
        if !self.is_psd() {
            return Err(OptimError::NotConvex);
        }
        Ok(())
    }

    fn is_psd(&self) -> bool {
        if self.quad.iter().all(|(i, j, _)| i == j) {
            let mut d = vec![0.0; self.n_vars()];
            for &(i, _, v) in &self.quad {
                d[i] += v;
            }
            return d.iter().all(|v| *v >= 0.0);
        }
        let n = self.n_vars();
        let mut p = nalgebra::DMatrix::<f64>::zeros(n, n);
        for &(i, j, v) in &self.quad {
            p[(i, j)] += v;
            if i != j {
                p[(j, i)] += v;
            }
        }
        let scale = p.amax().max(1.0);
        for i in 0..n {
            p[(i, i)] += 1e-10 * scale;
        }
        p.cholesky().is_some()
    }
}

//! Exact solution of small strictly convex QPs by enumerating active sets.

use lem_guard::netmodel::{Bus, Line, Network, PhaseSet, Transformer};
use lem_guard::optim::QuadraticProgram;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FEAS: f64 = 1e-9;

#[derive(Clone, Copy, PartialEq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Minimizer of `qp`, found by solving the KKT system of every combination
/// of active bounds and inequality rows and keeping the one that is primal
/// feasible with correctly signed multipliers. Exponential; keep n ≤ 7.
pub fn enumerate_qp(qp: &QuadraticProgram) -> Vec<f64> {
    let n = qp.n_vars();
    let m_in = qp.inequalities.len();
    let mut p = DMatrix::<f64>::zeros(n, n);
    for &(i, j, v) in &qp.quad {
        p[(i, j)] += v;
        if i != j {
            p[(j, i)] += v;
        }
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    let combos = 3usize.pow(n as u32) << m_in;
    for code in 0..combos {
        let mut c = code;
        let mut bounds = Vec::with_capacity(n);
        for j in 0..n {
            let b = [Bound::Free, Bound::Lower, Bound::Upper][c % 3];
            c /= 3;
            let finite = match b {
                Bound::Free => true,
                Bound::Lower => qp.lower[j].is_finite(),
                Bound::Upper => qp.upper[j].is_finite() && qp.upper[j] != qp.lower[j],
            };
            if !finite {
                bounds.clear();
                break;
            }
            bounds.push(b);
        }
        if bounds.len() != n {
            continue;
        }
        let active_in: Vec<usize> = (0..m_in).filter(|k| c >> k & 1 == 1).collect();

        // rows: equalities, active inequalities, active bounds
        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = qp.equalities.iter().map(|r| (r.terms.clone(), r.rhs)).collect();
        rows.extend(active_in.iter().map(|k| (qp.inequalities[*k].terms.clone(), qp.inequalities[*k].rhs)));
        for (j, b) in bounds.iter().enumerate() {
            match b {
                Bound::Lower => rows.push((vec![(j, 1.0)], qp.lower[j])),
                Bound::Upper => rows.push((vec![(j, 1.0)], qp.upper[j])),
                Bound::Free => {}
            }
        }
        let m = rows.len();
        if m > n {
            continue;
        }
        let mut k = DMatrix::<f64>::zeros(n + m, n + m);
        k.view_mut((0, 0), (n, n)).copy_from(&p);
        let mut rhs = DVector::<f64>::zeros(n + m);
        for j in 0..n {
            rhs[j] = -qp.linear[j];
        }
        for (r, (terms, b)) in rows.iter().enumerate() {
            for &(j, a) in terms {
                k[(n + r, j)] += a;
                k[(j, n + r)] += a;
            }
            rhs[n + r] = *b;
        }
        let Some(sol) = k.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let x: Vec<f64> = sol.as_slice()[..n].to_vec();
        let lam = &sol.as_slice()[n..];
        if qp.max_violation(&x) > FEAS {
            continue;
        }
        // P x + q + Aᵀλ = 0: active ≤ rows and upper bounds need λ ≥ 0,
        // lower bounds λ ≤ 0
        let ne = qp.equalities.len();
        let ok_in = (0..active_in.len()).all(|r| lam[ne + r] >= -FEAS);
        let mut r = ne + active_in.len();
        let mut ok_b = true;
        for b in &bounds {
            match b {
                Bound::Lower => {
                    ok_b &= lam[r] <= FEAS;
                    r += 1;
                }
                Bound::Upper => {
                    ok_b &= lam[r] >= -FEAS;
                    r += 1;
                }
                Bound::Free => {}
            }
        }
        if ok_in && ok_b {
            let f = qp.objective(&x);
            if best.as_ref().map_or(true, |(g, _)| f < *g) {
                best = Some((f, x));
            }
        }
    }
    best.expect("no KKT point found").1
}

pub fn two_bus() -> Network {
    let buses = vec![Bus::slack(0), Bus::new(1, PhaseSet::ABC)];
    let lines = vec![Line::uniform(0, 1, num_complex::Complex64::new(0.01, 0.01))];
    Network::new(buses, lines, Transformer::default(), 250.0, 400.0).unwrap()
}

/// Random strictly convex QP split over the two atoms of [`two_bus`], with
/// one coupling equality and one inequality, feasible by construction.
pub fn random_qp(seed: u64, n: usize) -> QuadraticProgram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut qp = QuadraticProgram::new(2);
    let owners: Vec<usize> = (0..n).map(|j| usize::from(j >= n / 2)).collect();
    let mut x0 = Vec::with_capacity(n);
    for &o in &owners {
        let lo = rng.gen_range(-3.0..0.0);
        let hi = rng.gen_range(0.5..3.0);
        let j = qp.add_var(lo, hi, o);
        qp.linear[j] = rng.gen_range(-3.0..3.0);
        qp.add_objective_term(j, j, rng.gen_range(0.5..2.0));
        x0.push(rng.gen_range(lo..hi));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if owners[i] == owners[j] && rng.gen_bool(0.5) {
                qp.add_objective_term(i, j, rng.gen_range(-0.2..0.2));
            }
        }
    }
    let row = |rng: &mut ChaCha8Rng| -> Vec<(usize, f64)> {
        (0..n).filter_map(|j| rng.gen_bool(0.6).then(|| (j, rng.gen_range(-1.5..1.5)))).collect()
    };
    let mut eq = row(&mut rng);
    if eq.is_empty() {
        eq.push((0, 1.0));
    }
    let b: f64 = eq.iter().map(|(j, a)| a * x0[*j]).sum();
    qp.add_equality(eq, b, rng.gen_range(0..2));
    let mut ineq = row(&mut rng);
    if ineq.is_empty() {
        ineq.push((n - 1, 1.0));
    }
    let b: f64 = ineq.iter().map(|(j, a)| a * x0[*j]).sum::<f64>() + rng.gen_range(0.0..0.5);
    qp.add_inequality(ineq, b, rng.gen_range(0..2));
    qp
}

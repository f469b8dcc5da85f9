//! Newton-Raphson power flow in rectangular coordinates, written against the
//! raw line data so it shares no code with the library solver.

use lem_guard::netmodel::{Network, Phase};
use lem_guard::powerflow::InjectionSet;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub struct NewtonSolution {
    /// Per bus and phase; absent phases are zero.
    pub voltages: Vec<[Complex64; 3]>,
    /// Real power entering the busbar from the transformer, kW per phase.
    pub pcc_kw: [f64; 3],
    pub iterations: usize,
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn source() -> [Complex64; 3] {
    [Phase::A.phasor(), Phase::B.phasor(), Phase::C.phasor()]
}

pub fn newton_power_flow(net: &Network, inj: &InjectionSet, tol: f64) -> NewtonSolution {
    let n = net.len();
    let slack = net.buses().iter().position(|b| b.is_slack).unwrap();
    let t = net.transformer();
    let y_tx = (t.short_circuit_pct > 0.0).then(|| {
        let zmag = t.short_circuit_pct / 100.0 * net.base_kva() / t.rating_kva;
        let r = zmag / (1.0 + t.x_over_r * t.x_over_r).sqrt();
        c(1.0, 0.0) / c(r, r * t.x_over_r)
    });

    // unknown slots; without a transformer the busbar is held at the source
    let mut slot = vec![[None; 3]; n];
    let mut slots = Vec::new();
    for (i, b) in net.buses().iter().enumerate() {
        for p in b.phases.iter() {
            if i == slack && y_tx.is_none() {
                continue;
            }
            slot[i][p.index()] = Some(slots.len());
            slots.push((i, p.index()));
        }
    }
    let m = slots.len();

    // Y over the unknown slots, plus the constant current from fixed voltages
    let mut y = DMatrix::<Complex64>::zeros(m, m);
    let mut i_fixed = DVector::<Complex64>::zeros(m);
    let fixed_v = |bus: usize, ph: usize| -> Complex64 {
        if bus == slack && y_tx.is_none() {
            source()[ph]
        } else {
            c(0.0, 0.0)
        }
    };
    for line in net.lines() {
        let a = net.bus_index(line.from).unwrap();
        let b = net.bus_index(line.to).unwrap();
        let pa = net.buses()[a].phases;
        let pb = net.buses()[b].phases;
        let ph: Vec<usize> = (0..3).filter(|k| pa.contains(Phase::ALL[*k]) && pb.contains(Phase::ALL[*k])).collect();
        let zs = DMatrix::from_fn(ph.len(), ph.len(), |r, q| line.z[ph[r]][ph[q]]);
        let ys = zs.try_inverse().unwrap();
        for (r, &pr) in ph.iter().enumerate() {
            for (q, &pq) in ph.iter().enumerate() {
                let v = ys[(r, q)];
                for (from, to, sign) in [(a, a, 1.0), (b, b, 1.0), (a, b, -1.0), (b, a, -1.0)] {
                    if let Some(row) = slot[from][pr] {
                        match slot[to][pq] {
                            Some(col) => y[(row, col)] += v * sign,
                            None => i_fixed[row] += v * sign * fixed_v(to, pq),
                        }
                    }
                }
            }
        }
    }
    if let Some(yt) = y_tx {
        for p in 0..3 {
            if let Some(k) = slot[slack][p] {
                y[(k, k)] += yt;
                i_fixed[k] -= yt * source()[p];
            }
        }
    }
    let s: Vec<Complex64> = slots.iter().map(|&(i, p)| inj.s[i][p]).collect();

    let mut v: DVector<Complex64> = DVector::from_iterator(m, slots.iter().map(|&(_, p)| source()[p]));
    let mut iterations = 0;
    loop {
        let cur = &y * &v + &i_fixed;
        let f: Vec<Complex64> = (0..m).map(|k| v[k] * cur[k].conj() - s[k]).collect();
        let worst = f.iter().map(|x| x.norm()).fold(0.0, f64::max);
        if worst < tol {
            break;
        }
        assert!(iterations < 50, "Newton oracle did not converge (mismatch {worst:e})");
        // dF = A dV + B dV̄ with A = diag(conj I), B_kj = V_k conj(Y_kj)
        let mut jac = DMatrix::<f64>::zeros(2 * m, 2 * m);
        for k in 0..m {
            for j in 0..m {
                let a = if k == j { cur[k].conj() } else { c(0.0, 0.0) };
                let b = v[k] * y[(k, j)].conj();
                let dx = a + b;
                let dy = c(0.0, 1.0) * (a - b);
                jac[(k, j)] = dx.re;
                jac[(k, m + j)] = dy.re;
                jac[(m + k, j)] = dx.im;
                jac[(m + k, m + j)] = dy.im;
            }
        }
        let rhs = DVector::from_iterator(2 * m, f.iter().map(|x| -x.re).chain(f.iter().map(|x| -x.im)));
        let step = jac.lu().solve(&rhs).expect("Newton Jacobian is singular");
        for k in 0..m {
            v[k] += c(step[k], step[m + k]);
        }
        iterations += 1;
    }

    let mut voltages = vec![[c(0.0, 0.0); 3]; n];
    for (i, b) in net.buses().iter().enumerate() {
        for p in b.phases.iter() {
            voltages[i][p.index()] = match slot[i][p.index()] {
                Some(k) => v[k],
                None => fixed_v(i, p.index()),
            };
        }
    }
    let base = net.phase_base_kw();
    let mut pcc_kw = [0.0; 3];
    for p in 0..3 {
        let vb = voltages[slack][p];
        pcc_kw[p] = match y_tx {
            Some(yt) => (vb * (yt * (source()[p] - vb)).conj()).re * base,
            None => {
                // busbar balance: everything leaving on lines minus the local injection
                let k_out: Complex64 = net
                    .lines()
                    .iter()
                    .filter(|l| net.bus_index(l.from) == Some(slack) || net.bus_index(l.to) == Some(slack))
                    .map(|l| {
                        let other = if net.bus_index(l.from) == Some(slack) { l.to } else { l.from };
                        let o = net.bus_index(other).unwrap();
                        let ph: Vec<usize> =
                            (0..3).filter(|k| net.buses()[o].phases.contains(Phase::ALL[*k])).collect();
                        let zs = DMatrix::from_fn(ph.len(), ph.len(), |r, q| l.z[ph[r]][ph[q]]);
                        let ys = zs.try_inverse().unwrap();
                        let mut i = c(0.0, 0.0);
                        if let Some(r) = ph.iter().position(|x| *x == p) {
                            for (q, &pq) in ph.iter().enumerate() {
                                i += ys[(r, q)] * (voltages[slack][pq] - voltages[o][pq]);
                            }
                        }
                        vb * i.conj()
                    })
                    .sum();
                (k_out - inj.s[slack][p]).re * base
            }
        };
    }
    NewtonSolution { voltages, pcc_kw, iterations }
}

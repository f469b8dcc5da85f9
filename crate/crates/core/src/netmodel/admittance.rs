use nalgebra::DMatrix;
use num_complex::Complex64;

use super::{Mat3, Network, NetworkError, PhaseSet, ZERO3};

/// Inverts the impedance block restricted to `phases`; other entries stay
/// zero. Returns `None` if the restricted block is singular.
pub fn primitive_admittance(z: &Mat3, phases: PhaseSet) -> Option<Mat3> {
    let idx: Vec<usize> = phases.iter().map(|p| p.index()).collect();
    if idx.is_empty() {
        return None;
    }
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |r, c| z[idx[r]][idx[c]]);
    let scale = sub.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    let inv = sub.try_inverse()?;
    // reject numerically singular blocks (condition number blow-up)
    let inv_scale = inv.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if !inv_scale.is_finite() || scale * inv_scale > 1e12 {
        return None;
    }
    let mut y = ZERO3;
    for r in 0..k {
        for c in 0..k {
            y[idx[r]][idx[c]] = inv[(r, c)];
        }
    }
    Some(y)
}

/// Assembles the 3n×3n bus admittance matrix; row `3*i + phase` belongs to
/// bus `i` in network order.
pub fn build_admittance(net: &Network) -> Result<DMatrix<Complex64>, NetworkError> {
    let n = net.len();
    let mut y = DMatrix::<Complex64>::zeros(3 * n, 3 * n);
    for (k, line) in net.lines().iter().enumerate() {
        let a = net.bus_index(line.from).expect("validated");
        let b = net.bus_index(line.to).expect("validated");
        let yl = primitive_admittance(&line.z, net.line_phases(k)).ok_or(NetworkError::SingularImpedance {
            line: k,
            from: line.from,
            to: line.to,
        })?;
        for r in 0..3 {
            for c in 0..3 {
                let v = yl[r][c];
                y[(3 * a + r, 3 * a + c)] += v;
                y[(3 * b + r, 3 * b + c)] += v;
                y[(3 * a + r, 3 * b + c)] -= v;
                y[(3 * b + r, 3 * a + c)] -= v;
            }
        }
    }
    Ok(y)
}

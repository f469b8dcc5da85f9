use serde::{Deserialize, Serialize};

use super::{Bid, MarketError};

/// Lower clamp on the update factor Z so scaled coefficients stay positive.
pub const Z_FLOOR: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeCoefficients {
    pub node_id: u32,
    /// Generation cost weight per phase (cost/kW²).
    pub alpha: [f64; 3],
    /// Load-curtailment disutility weight per phase (cost/kW²).
    pub beta: [f64; 3],
    /// Resilience score in (0, 1].
    pub rs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub nodes: Vec<NodeCoefficients>,
    /// Loss penalty per phase.
    pub xi: [f64; 3],
    /// Scale of the coefficient update (kW).
    pub mu_kw: f64,
}

impl Coefficients {
    pub fn uniform(node_ids: &[u32], alpha: f64, beta: f64, xi: f64, mu_kw: f64) -> Self {
        Coefficients {
            nodes: node_ids
                .iter()
                .map(|&node_id| NodeCoefficients { node_id, alpha: [alpha; 3], beta: [beta; 3], rs: 1.0 })
                .collect(),
            xi: [xi; 3],
            mu_kw,
        }
    }

    pub fn node(&self, node_id: u32) -> Option<&NodeCoefficients> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn validate(&self) -> Result<(), MarketError> {
        let bad = |m: String| Err(MarketError::Coefficients(m));
        if !(self.mu_kw > 0.0) {
            return bad(format!("μ must be > 0, got {}", self.mu_kw));
        }
        if !self.xi.iter().all(|x| *x > 0.0 && x.is_finite()) {
            return bad(format!("ξ must be positive, got {:?}", self.xi));
        }
        for n in &self.nodes {
            if !n.alpha.iter().chain(&n.beta).all(|x| *x > 0.0 && x.is_finite()) {
                return bad(format!("node {}: α and β must be positive", n.node_id));
            }
            if !(n.rs > 0.0 && n.rs <= 1.0) {
                return bad(format!("node {}: resilience score {} outside (0, 1]", n.node_id, n.rs));
            }
        }
        Ok(())
    }
}

/// PCC readings around an attack and each node's participation direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationContext {
    /// Forecast PCC import per phase (kW).
    pub forecast_pcc_kw: [f64; 3],
    /// Measured PCC import per phase under attack (kW).
    pub measured_pcc_kw: [f64; 3],
    /// measured − forecast, per phase (kW); positive when generation is lost.
    pub delta_kw: [f64; 3],
    /// Per node: its phase indicator scaled by its share of total flexibility.
    pub participation: Vec<(u32, [f64; 3])>,
}

impl MitigationContext {
    pub fn new(forecast_pcc_kw: [f64; 3], measured_pcc_kw: [f64; 3], bids: &[Bid]) -> Self {
        let total: f64 = bids.iter().map(|b| b.flexibility_kw).sum();
        let participation = bids
            .iter()
            .map(|b| {
                let mut d = [0.0; 3];
                if total > 0.0 {
                    d[b.phase.index()] = b.flexibility_kw / total;
                }
                (b.node_id, d)
            })
            .collect();
        let delta_kw = std::array::from_fn(|k| measured_pcc_kw[k] - forecast_pcc_kw[k]);
        MitigationContext { forecast_pcc_kw, measured_pcc_kw, delta_kw, participation }
    }

    fn direction(&self, node_id: u32) -> [f64; 3] {
        self.participation.iter().find(|(n, _)| *n == node_id).map(|(_, d)| *d).unwrap_or([0.0; 3])
    }
}

/// Per-node factors γ_i = 1 / max(1 + RS_i · Δᵀδ_i / (μ · Σ_j RS_j), Z_FLOOR).
pub fn update_factors(ctx: &MitigationContext, coeffs: &Coefficients) -> Result<Vec<f64>, MarketError> {
    if coeffs.nodes.is_empty() {
        return Err(MarketError::Coefficients("no nodes to update".into()));
    }
    if !(coeffs.mu_kw > 0.0) {
        return Err(MarketError::Coefficients(format!("μ must be > 0, got {}", coeffs.mu_kw)));
    }
    let rs_sum: f64 = coeffs.nodes.iter().map(|n| n.rs).sum();
    Ok(coeffs
        .nodes
        .iter()
        .map(|n| {
            let d = ctx.direction(n.node_id);
            let dot: f64 = (0..3).map(|k| ctx.delta_kw[k] * d[k]).sum();
            let z = (1.0 + n.rs * dot / (coeffs.mu_kw * rs_sum)).max(Z_FLOOR);
            1.0 / z
        })
        .collect())
}

/// Scales each node's α and β by γ_i and the loss penalty by the inverse
/// mean factor, so a generation loss makes curtailment cheaper and losses
/// dearer.
pub fn update_coefficients(ctx: &MitigationContext, coeffs: &Coefficients) -> Result<Coefficients, MarketError> {
    let gamma = update_factors(ctx, coeffs)?;
    let n = gamma.len() as f64;
    let mean = gamma.iter().sum::<f64>() / n;
    let mut out = coeffs.clone();
    for (node, g) in out.nodes.iter_mut().zip(&gamma) {
        for k in 0..3 {
            node.alpha[k] *= g;
            node.beta[k] *= g;
        }
    }
    for x in &mut out.xi {
        *x /= mean;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::Phase;

    #[test]
    fn two_node_arithmetic() {
        let coeffs = Coefficients::uniform(&[1, 2], 1.0, 1.0, 0.3, 1.0);
        let ctx = MitigationContext {
            forecast_pcc_kw: [0.0; 3],
            measured_pcc_kw: [10.0, 0.0, 0.0],
            delta_kw: [10.0, 0.0, 0.0],
            participation: vec![(1, [1.0, 0.0, 0.0]), (2, [0.0; 3])],
        };
        let g = update_factors(&ctx, &coeffs).unwrap();
        assert!((g[0] - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(g[1], 1.0);
        let out = update_coefficients(&ctx, &coeffs).unwrap();
        assert!((out.xi[0] - 0.3 * 12.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn context_direction_uses_flexibility_share() {
        let bids = vec![
            Bid { node_id: 1, phase: Phase::A, flexibility_kw: 1.0, pv_capacity_kw: 0.0 },
            Bid { node_id: 2, phase: Phase::C, flexibility_kw: 3.0, pv_capacity_kw: 0.0 },
        ];
        let ctx = MitigationContext::new([1.0, 2.0, 3.0], [4.0, 2.0, 1.0], &bids);
        assert_eq!(ctx.delta_kw, [3.0, 0.0, -2.0]);
        assert_eq!(ctx.participation[1], (2, [0.0, 0.0, 0.75]));
    }

    #[test]
    fn invalid_mu_and_empty_set() {
        let ctx = MitigationContext::new([0.0; 3], [0.0; 3], &[]);
        let mut c = Coefficients::uniform(&[1], 1.0, 1.0, 1.0, 0.0);
        assert!(update_coefficients(&ctx, &c).is_err());
        c.mu_kw = 1.0;
        c.nodes.clear();
        assert!(update_coefficients(&ctx, &c).is_err());
    }
}

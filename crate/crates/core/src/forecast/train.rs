use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{ForecastError, LocalDataset, ModelParams, QUANTILES};

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Initial step of each epoch's backtracking line search.
    pub lr: f64,
    /// Width (kW) of the quadratic zone of the smoothed pinball loss;
    /// zero gives the exact loss.
    pub smoothing: f64,
    pub armijo_c: f64,
    pub max_backtracks: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 5, lr: 1.0, smoothing: 0.05, armijo_c: 1e-4, max_backtracks: 40 }
    }
}

#[derive(Clone, Debug)]
pub struct FederatedConfig {
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub train: TrainOptions,
    pub seed: u64,
    /// Standard deviation of the random initial weights.
    pub init_scale: f64,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        FederatedConfig { rounds: 20, epochs_per_round: 5, train: TrainOptions::default(), seed: 0, init_scale: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundLog {
    pub round: usize,
    /// Sample-weighted training loss of the averaged model.
    pub global_loss: f64,
    pub client_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FederatedRun {
    pub params: ModelParams,
    pub log: Vec<RoundLog>,
}

fn smoothed(u: f64, q: f64, kappa: f64) -> (f64, f64) {
    // returns (loss, d loss / d u) with u = actual - pred
    if kappa <= 0.0 {
        return if u >= 0.0 { (q * u, q) } else { (-(1.0 - q) * u, -(1.0 - q)) };
    }
    if u > kappa {
        (q * (u - 0.5 * kappa), q)
    } else if u < -kappa {
        ((1.0 - q) * (-u - 0.5 * kappa), -(1.0 - q))
    } else {
        let w = if u >= 0.0 { q } else { 1.0 - q };
        (w * u * u / (2.0 * kappa), w * u / kappa)
    }
}

/// Mean smoothed pinball loss over samples and heads.
pub fn dataset_loss(params: &ModelParams, data: &LocalDataset, smoothing: f64) -> f64 {
    let nf = params.n_features;
    let nh = params.n_heads();
    let mut total = 0.0;
    for i in 0..data.sample_count() {
        let x = data.row(i);
        let y = data.targets[i];
        for h in 0..nh {
            let pred: f64 = params.weights[h * nf..(h + 1) * nf].iter().zip(x).map(|(w, v)| w * v).sum();
            total += smoothed(y - pred, params.quantiles[h], smoothing).0;
        }
    }
    total / (data.sample_count() * nh) as f64
}

/// Loss and its gradient with respect to the flat weight vector.
pub fn loss_gradient(params: &ModelParams, data: &LocalDataset, smoothing: f64) -> (f64, Vec<f64>) {
    let nf = params.n_features;
    let nh = params.n_heads();
    let mut grad = vec![0.0; params.weights.len()];
    let mut total = 0.0;
    for i in 0..data.sample_count() {
        let x = data.row(i);
        let y = data.targets[i];
        for h in 0..nh {
            let w = &params.weights[h * nf..(h + 1) * nf];
            let pred: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let (l, dl_du) = smoothed(y - pred, params.quantiles[h], smoothing);
            total += l;
            // d/dw of l(y - w·x) = -dl/du * x
            for (g, v) in grad[h * nf..(h + 1) * nf].iter_mut().zip(x) {
                *g -= dl_du * v;
            }
        }
    }
    let scale = 1.0 / (data.sample_count() * nh) as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (total * scale, grad)
}

/// Second-moment matrix of the features plus a small ridge, factored once
/// per client. Scaling the gradient by its inverse removes the effect of
/// feature scale and collinearity on the step.
fn feature_preconditioner(data: &LocalDataset) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let nf = data.n_features;
    let n = data.sample_count() as f64;
    let mut m = nalgebra::DMatrix::<f64>::zeros(nf, nf);
    for i in 0..data.sample_count() {
        let x = data.row(i);
        for a in 0..nf {
            for b in a..nf {
                m[(a, b)] += x[a] * x[b] / n;
            }
        }
    }
    for a in 0..nf {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    let ridge = 1e-6 * (m.trace() / nf as f64).max(1e-12);
    for a in 0..nf {
        m[(a, a)] += ridge;
    }
    m.cholesky()
}

/// Full-batch preconditioned gradient descent with backtracking; returns
/// the updated parameters and the training loss after each epoch.
pub fn local_train_with(
    params: &ModelParams,
    data: &LocalDataset,
    opts: &TrainOptions,
) -> Result<(ModelParams, Vec<f64>), ForecastError> {
    if data.sample_count() == 0 {
        return Err(ForecastError::EmptyDataset(data.client_id.clone()));
    }
    if data.n_features != params.n_features {
        return Err(ForecastError::Dimension { expected: params.n_features, got: data.n_features });
    }
    let nf = params.n_features;
    let precond = if opts.epochs > 0 { feature_preconditioner(data) } else { None };
    let mut cur = params.clone();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let (loss, grad) = loss_gradient(&cur, data, opts.smoothing);
        let g2: f64 = grad.iter().map(|g| g * g).sum();
        if !loss.is_finite() || !g2.is_finite() {
            return Err(ForecastError::NonFinite { client: data.client_id.clone(), epoch, loss, grad_norm: g2.sqrt() });
        }
        let mut dir = grad.clone();
        if let Some(ch) = &precond {
            for block in dir.chunks_mut(nf) {
                let v = ch.solve(&nalgebra::DVector::from_column_slice(block));
                block.copy_from_slice(v.as_slice());
            }
        }
        let decrease: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let mut step = opts.lr;
        let mut accepted = loss;
        for _ in 0..=opts.max_backtracks {
            let mut trial = cur.clone();
            for (w, d) in trial.weights.iter_mut().zip(&dir) {
                *w -= step * d;
            }
            let l = dataset_loss(&trial, data, opts.smoothing);
            if l.is_finite() && l <= loss - opts.armijo_c * step * decrease {
                cur = trial;
                accepted = l;
                break;
            }
            step *= 0.5;
        }
        history.push(accepted);
    }
    Ok((cur, history))
}

/// Gradient descent on the mean pinball loss with default smoothing.
pub fn local_train(
    params: &ModelParams,
    data: &LocalDataset,
    epochs: usize,
    lr: f64,
) -> Result<ModelParams, ForecastError> {
    let opts = TrainOptions { epochs, lr, ..TrainOptions::default() };
    local_train_with(params, data, &opts).map(|(p, _)| p)
}

/// Sample-count weighted elementwise mean of client parameters.
pub fn fed_avg(updates: &[(ModelParams, usize)]) -> Result<ModelParams, ForecastError> {
    let (first, _) = updates.first().ok_or(ForecastError::NoUpdates)?;
    let dim = first.weights.len();
    for (p, _) in updates {
        if p.weights.len() != dim || p.n_features != first.n_features {
            return Err(ForecastError::Dimension { expected: dim, got: p.weights.len() });
        }
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(ForecastError::NoUpdates);
    }
    let mut out = first.clone();
    out.weights.iter_mut().for_each(|w| *w = 0.0);
    for (p, n) in updates {
        let a = *n as f64 / total as f64;
        for (o, w) in out.weights.iter_mut().zip(&p.weights) {
            *o += a * w;
        }
    }
    Ok(out)
}

/// Broadcast → local training → averaging, for `rounds` rounds. Clients
/// train in parallel; results are combined in client order so the run is
/// deterministic for a given seed.
pub fn train_federated(clients: &[LocalDataset], cfg: &FederatedConfig) -> Result<FederatedRun, ForecastError> {
    let first = clients.first().ok_or(ForecastError::NoUpdates)?;
    let n_features = first.n_features;
    let mut global = ModelParams::zeros(n_features);
    if cfg.init_scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_scale).expect("positive scale");
        for w in &mut global.weights {
            *w = normal.sample(&mut rng);
        }
    }
    debug_assert_eq!(global.quantiles, QUANTILES.to_vec());
    let opts = TrainOptions { epochs: cfg.epochs_per_round, ..cfg.train.clone() };
    let mut log = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let results: Vec<Result<(ModelParams, Vec<f64>), ForecastError>> =
            clients.par_iter().map(|c| local_train_with(&global, c, &opts)).collect();
        let mut updates = Vec::with_capacity(clients.len());
        let mut client_losses = Vec::with_capacity(clients.len());
        for (c, r) in clients.iter().zip(results) {
            let (p, hist) =
                r.map_err(|e| ForecastError::Client { client: c.client_id.clone(), source: Box::new(e) })?;
            client_losses.push(hist.last().copied().unwrap_or(f64::NAN));
            updates.push((p, c.sample_count()));
        }
        global = fed_avg(&updates)?;
        let losses: Vec<f64> = clients.par_iter().map(|c| dataset_loss(&global, c, opts.smoothing)).collect();
        let total: usize = clients.iter().map(|c| c.sample_count()).sum();
        let global_loss =
            clients.iter().zip(&losses).map(|(c, l)| l * c.sample_count() as f64).sum::<f64>() / total as f64;
        log.push(RoundLog { round, global_loss, client_losses });
    }
    Ok(FederatedRun { params: global, log })
}

/// Expanding-window splits over `n` time-ordered items: fold k trains on
/// `[0, min_train + k·w)` and validates on the following `w` items.
pub fn expanding_window_splits(n: usize, folds: usize, min_train: usize) -> Vec<(Range<usize>, Range<usize>)> {
    if folds == 0 || min_train >= n {
        return Vec::new();
    }
    let w = (n - min_train) / folds;
    if w == 0 {
        return Vec::new();
    }
    (0..folds)
        .map(|k| {
            let end = min_train + k * w;
            (0..end, end..end + w)
        })
        .collect()
}

/// Writes one CSV row per round: round, global loss, then each client loss.
pub fn write_round_log(path: impl AsRef<Path>, log: &[RoundLog], client_ids: &[String]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["round".to_string(), "global_loss_kw".to_string()];
    header.extend(client_ids.iter().map(|c| format!("loss_{c}_kw")));
    w.write_record(&header)?;
    for r in log {
        let mut row = vec![r.round.to_string(), format!("{:.6e}", r.global_loss)];
        row.extend(r.client_losses.iter().map(|l| format!("{l:.6e}")));
        w.write_record(&row)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecast::pinball_loss;

    fn const_dataset(value: f64, n: usize) -> LocalDataset {
        LocalDataset::new("c", 1, vec![1.0; n], vec![value; n])
    }

    #[test]
    fn fed_avg_weighted_mean() {
        let mut a = ModelParams::zeros(1);
        a.quantiles = vec![0.5];
        a.weights = vec![2.0];
        let mut b = a.clone();
        b.weights = vec![4.0];
        let m = fed_avg(&[(a.clone(), 100), (b, 300)]).unwrap();
        assert_eq!(m.weights, vec![3.5]);
        assert_eq!(fed_avg(&[(a.clone(), 7)]).unwrap(), a);
        assert_eq!(fed_avg(&[(a.clone(), 1), (a.clone(), 5)]).unwrap(), a);
        let mut c = ModelParams::zeros(2);
        c.quantiles = vec![0.5];
        c.weights = vec![0.0, 0.0];
        assert!(matches!(fed_avg(&[(a, 1), (c, 1)]), Err(ForecastError::Dimension { .. })));
        assert!(matches!(fed_avg(&[]), Err(ForecastError::NoUpdates)));
    }

    #[test]
    fn zero_epochs_is_identity() {
        let p = ModelParams::zeros(1);
        assert_eq!(local_train(&p, &const_dataset(3.0, 10), 0, 1.0).unwrap(), p);
    }

    #[test]
    fn constant_target_median_converges() {
        let p = ModelParams::zeros(1);
        let (out, hist) =
            local_train_with(&p, &const_dataset(3.0, 50), &TrainOptions { epochs: 200, ..TrainOptions::default() })
                .unwrap();
        assert!((out.head(2)[0] - 3.0).abs() < 1e-3, "{}", out.head(2)[0]);
        assert!(hist.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn exact_loss_matches_pinball() {
        let mut p = ModelParams::zeros(1);
        p.weights = vec![0.5, 1.0, 1.5, 2.0, 2.5];
        let d = LocalDataset::new("c", 1, vec![1.0, 1.0], vec![1.2, 2.7]);
        let mut want = 0.0;
        for y in [1.2, 2.7] {
            for (h, q) in QUANTILES.iter().enumerate() {
                want += pinball_loss(p.weights[h], y, *q).unwrap();
            }
        }
        assert!((dataset_loss(&p, &d, 0.0) - want / 10.0).abs() < 1e-14);
    }

    #[test]
    fn nan_target_aborts() {
        let d = LocalDataset::new("bad", 1, vec![1.0; 3], vec![1.0, f64::NAN, 2.0]);
        assert!(matches!(local_train(&ModelParams::zeros(1), &d, 3, 1.0), Err(ForecastError::NonFinite { .. })));
    }

    #[test]
    fn expanding_windows_grow() {
        let s = expanding_window_splits(100, 4, 20);
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], (0..20, 20..40));
        assert_eq!(s[3], (0..80, 80..100));
        assert!(expanding_window_splits(10, 3, 10).is_empty());
    }
}

//! Binary-response GLMM with a single categorical random intercept: the
//! Gauss-Hermite quadrature NLL and its gradients, quadrature-based
//! random-effect prediction, probability prediction and AUC, plus a training
//! loop whose mini-batches are unions of whole clusters.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::nll::{DataView, EpochRecord, History, NetConfig, TrainConfig};
use crate::nn::{Mlp, Optimizer, Param};

const SQRT_PI: f64 = 1.7724538509055159;
const SQRT_2: f64 = std::f64::consts::SQRT_2;

/// Physicists' Gauss-Hermite rule: integrates h against exp(-x^2).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Nodes and weights by Newton iteration on the normalized Hermite
/// recurrence. Weights sum to sqrt(pi); nodes are symmetric about zero and
/// odd orders place a node exactly at zero.
pub fn hermite_rule(k: usize) -> Result<QuadratureRule> {
    if k == 0 || k > 50 {
        return Err(Error::QuadratureOrder(k));
    }
    let n = k;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = (n + 1) / 2;
    let pim4 = 1.0 / SQRT_PI.sqrt();
    let mut z = 0.0;
    for i in 1..=m {
        // Initial root guesses, largest first.
        z = match i {
            1 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            2 => z - 1.14 * (n as f64).powf(0.426) / z,
            3 => 1.86 * z - 0.86 * nodes[0],
            4 => 1.91 * z - 0.91 * nodes[1],
            _ => 2.0 * z - nodes[i - 3],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j as f64 - 1.0) / j as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 {
                break;
            }
        }
        if n % 2 == 1 && 2 * i - 1 == n {
            z = 0.0;
        }
        nodes[i - 1] = z;
        nodes[n - i] = -z;
        weights[i - 1] = 2.0 / (pp * pp);
        weights[n - i] = weights[i - 1];
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Row indices per cluster; a partition of 0..n with empty clusters allowed.
#[derive(Debug, Clone)]
pub struct ClusterIndex {
    pub groups: Vec<Vec<usize>>,
}

impl ClusterIndex {
    pub fn build(ids: &[usize], q: usize) -> Result<Self> {
        let mut groups = vec![Vec::new(); q];
        for (row, &id) in ids.iter().enumerate() {
            if id >= q {
                return Err(Error::IdOutOfRange {
                    feature: 0,
                    id,
                    max: q,
                });
            }
            groups[id].push(row);
        }
        Ok(ClusterIndex { groups })
    }

    pub fn q(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Debug, Clone)]
pub struct GlmmLoss {
    pub nll: f64,
    /// dNLL/d f_i.
    pub grad_f: Vec<f64>,
    /// dNLL/d ln(sig2b).
    pub grad_log_sig2b: f64,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Quadrature NLL: -sum_j log { sum_k exp[ sum_i y eta - log(1 + e^eta) ] w_k / sqrt(pi) }
/// with eta = f_i + sqrt(2) sigma_b x_k, inner sums shifted in log space.
pub fn nll_glmm(
    f: &[f64],
    y: &[f64],
    sigma_b: f64,
    clusters: &ClusterIndex,
    rule: &QuadratureRule,
) -> Result<GlmmLoss> {
    if f.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "nll_glmm",
            expected: y.len(),
            actual: f.len(),
        });
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("glmm f outputs"));
    }
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::InvalidSpec("glmm responses must be 0 or 1".into()));
    }
    if !(sigma_b >= 0.0) {
        return Err(Error::InvalidSpec("sigma_b must be >= 0".into()));
    }
    let kk = rule.nodes.len();
    let mut nll = 0.0;
    let mut grad_f = vec![0.0; f.len()];
    let mut grad_sigma_b = 0.0;

    let mut log_terms = vec![0.0; kk];
    let mut score_sums = vec![0.0; kk];
    for rows in &clusters.groups {
        if rows.is_empty() {
            continue;
        }
        for (k, (&xk, &wk)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
            let shift = SQRT_2 * sigma_b * xk;
            let mut loglik = 0.0;
            let mut score = 0.0;
            for &i in rows {
                let eta = f[i] + shift;
                loglik += y[i] * eta - softplus(eta);
                score += y[i] - sigmoid(eta);
            }
            log_terms[k] = loglik + (wk / SQRT_PI).ln();
            score_sums[k] = score;
        }
        let max = log_terms[..kk]
            .iter()
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = log_terms[..kk].iter().map(|t| (t - max).exp()).sum();
        let log_j = max + sum_exp.ln();
        nll -= log_j;

        // Softmax over nodes.
        for (k, (&xk, _)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
            let s = (log_terms[k] - log_j).exp();
            let shift = SQRT_2 * sigma_b * xk;
            for &i in rows {
                let eta = f[i] + shift;
                grad_f[i] -= s * (y[i] - sigmoid(eta));
            }
            grad_sigma_b -= s * score_sums[k] * SQRT_2 * xk;
        }
    }
    // Chain to u = ln(sig2b): d sigma_b / d u = sigma_b / 2.
    let grad_log_sig2b = grad_sigma_b * sigma_b / 2.0;
    Ok(GlmmLoss {
        nll,
        grad_f,
        grad_log_sig2b,
    })
}

/// Posterior-mean random effect per cluster by the quadrature node ratio:
/// b_j = sqrt(2) sigma_b * (sum_k x_k h_j w_k) / (sum_k h_j w_k), evaluated
/// with a log-space shift. Clusters with no rows get the prior mean zero.
pub fn predict_b_quadrature(
    f: &[f64],
    y: &[f64],
    sigma_b: f64,
    clusters: &ClusterIndex,
    rule: &QuadratureRule,
) -> Result<Vec<f64>> {
    if f.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "predict_b_quadrature",
            expected: y.len(),
            actual: f.len(),
        });
    }
    let kk = rule.nodes.len();
    let mut bhat = vec![0.0; clusters.q()];
    if sigma_b == 0.0 {
        return Ok(bhat);
    }
    let mut log_terms = vec![0.0; kk];
    for (j, rows) in clusters.groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        for (k, (&xk, &wk)) in rule.nodes.iter().zip(&rule.weights).enumerate() {
            let shift = SQRT_2 * sigma_b * xk;
            let mut loglik = 0.0;
            for &i in rows {
                let eta = f[i] + shift;
                loglik += y[i] * eta - softplus(eta);
            }
            log_terms[k] = loglik + wk.ln();
        }
        let max = log_terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, &xk) in rule.nodes.iter().enumerate() {
            let s = (log_terms[k] - max).exp();
            num += s * SQRT_2 * sigma_b * xk;
            den += s;
        }
        let b = num / den;
        if !b.is_finite() {
            return Err(Error::NonFinite("quadrature posterior mean"));
        }
        bhat[j] = b;
    }
    Ok(bhat)
}

/// sigmoid(f + b), with logits clipped at +-30 before the sigmoid.
pub fn predict_prob(f: &[f64], bhat_by_row: &[f64]) -> Vec<f64> {
    f.iter()
        .zip(bhat_by_row)
        .map(|(fi, bi)| sigmoid((fi + bi).clamp(-30.0, 30.0)))
        .collect()
}

/// AUC as the normalized Mann-Whitney U statistic with midranks for ties.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "auc",
            expected: labels.len(),
            actual: scores.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Average 1-based rank of the tie group [i, j].
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1.0 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// A fitted binary GLMM: network logits plus one variance component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlmmModel {
    pub f_net: Mlp,
    pub sig2b: f64,
    pub q: usize,
    pub quad_k: usize,
    pub history: History,
    pub epochs_run: usize,
}

impl GlmmModel {
    pub fn sigma_b(&self) -> f64 {
        self.sig2b.sqrt()
    }

    /// Posterior-mean random effects from the training rows.
    pub fn predict_b(&self, data: DataView<'_>) -> Result<Vec<f64>> {
        let rule = hermite_rule(self.quad_k)?;
        let f = forward_rows(&self.f_net, data.x, data.rows)?;
        let y: Vec<f64> = data.rows.iter().map(|&r| data.y[r]).collect();
        let ids: Vec<usize> = data.rows.iter().map(|&r| data.re.ids[0][r]).collect();
        let clusters = ClusterIndex::build(&ids, self.q)?;
        predict_b_quadrature(&f, &y, self.sigma_b(), &clusters, &rule)
    }

    /// Test-row probabilities sigmoid(f + b_hat); unseen levels get b = 0.
    pub fn predict_prob_rows(
        &self,
        x: &DenseMatrix,
        ids: &[usize],
        rows: &[usize],
        bhat: &[f64],
    ) -> Result<Vec<f64>> {
        let f = forward_rows(&self.f_net, x, rows)?;
        let b_by_row: Vec<f64> = rows
            .iter()
            .map(|&r| {
                let id = ids[r];
                if id < bhat.len() {
                    bhat[id]
                } else {
                    0.0
                }
            })
            .collect();
        Ok(predict_prob(&f, &b_by_row))
    }
}

fn forward_rows(net: &Mlp, x: &DenseMatrix, rows: &[usize]) -> Result<Vec<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(4096) {
        let mut xb = DenseMatrix::zeros(chunk.len(), x.cols());
        for (local, &r) in chunk.iter().enumerate() {
            xb.row_mut(local).copy_from_slice(x.row(r));
        }
        let (f, _) = net.forward_vec(&xb, false, &mut rng)?;
        out.extend(f);
    }
    Ok(out)
}

/// Group whole clusters greedily into batches of roughly `budget` rows. A
/// cluster larger than the budget becomes its own batch.
pub fn cluster_batches(groups: &[Vec<usize>], budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for rows in groups {
        if rows.is_empty() {
            continue;
        }
        if !current.is_empty() && current.len() + rows.len() > budget {
            batches.push(std::mem::take(&mut current));
        }
        current.extend_from_slice(rows);
        if current.len() >= budget {
            batches.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Train the logits network and sig2b under the quadrature NLL. Mini-batches
/// are unions of whole clusters, which keeps the per-cluster decomposition
/// exact; early stopping follows the Gaussian trainer.
pub fn train_glmm(
    data: DataView<'_>,
    q: usize,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    quad_k: usize,
) -> Result<GlmmModel> {
    cfg.validate()?;
    let rule = hermite_rule(quad_k)?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut f_net = Mlp::regression(data.x.cols(), &net_cfg.hidden, net_cfg.dropout, &mut rng)?;
    let mut log_sig2b = vec![0.0f64];

    let mut history = History {
        theta_names: vec!["sig2b".into()],
        records: Vec::new(),
    };
    if cfg.max_epochs == 0 {
        return Ok(GlmmModel {
            f_net,
            sig2b: 1.0,
            q,
            quad_k,
            history,
            epochs_run: 0,
        });
    }

    let mut shuffled: Vec<usize> = data.rows.to_vec();
    shuffled.shuffle(&mut rng);
    let n_val = ((shuffled.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, shuffled.len().saturating_sub(2));
    let (train_rows, val_rows) = {
        let (t, v) = shuffled.split_at(shuffled.len() - n_val);
        (t.to_vec(), v.to_vec())
    };

    // Global (dataset-row) cluster groups over the inner training rows.
    let mut group_of: Vec<Vec<usize>> = vec![Vec::new(); q];
    for &r in &train_rows {
        let id = data.re.ids[0][r];
        if id >= q {
            return Err(Error::IdOutOfRange {
                feature: 0,
                id,
                max: q,
            });
        }
        group_of[id].push(r);
    }
    let mut cluster_order: Vec<usize> = (0..q).filter(|&j| !group_of[j].is_empty()).collect();

    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut best_val = f64::INFINITY;
    let mut best_state: Option<(Mlp, f64)> = None;
    let mut since_improve = 0usize;
    let mut epochs_run = 0;

    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        cluster_order.shuffle(&mut rng);
        let ordered: Vec<Vec<usize>> = cluster_order
            .iter()
            .map(|&j| group_of[j].clone())
            .collect();
        let mut epoch_nll = 0.0;
        for (bi, batch) in cluster_batches(&ordered, cfg.batch_size).iter().enumerate() {
            let mut xb = DenseMatrix::zeros(batch.len(), data.x.cols());
            for (local, &r) in batch.iter().enumerate() {
                xb.row_mut(local).copy_from_slice(data.x.row(r));
            }
            let (f_out, cache) = f_net.forward_vec(&xb, true, &mut rng)?;
            let yb: Vec<f64> = batch.iter().map(|&r| data.y[r]).collect();
            let local_ids: Vec<usize> = batch.iter().map(|&r| data.re.ids[0][r]).collect();
            let clusters = ClusterIndex::build(&local_ids, q)?;
            let sigma_b = (log_sig2b[0].exp()).sqrt();
            let loss = nll_glmm(&f_out, &yb, sigma_b, &clusters, &rule)?;
            if !loss.nll.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_nll += loss.nll;

            let grad_out = DenseMatrix::from_vec(batch.len(), 1, loss.grad_f.clone());
            let (grads, _) = f_net.backward(&cache, &grad_out)?;
            let theta_grad = [loss.grad_log_sig2b];
            let mut params = f_net.params_with_grads(&grads, "f");
            params.push(Param {
                name: "sig2b".into(),
                value: &mut log_sig2b,
                grad: &theta_grad,
            });
            opt.step(&mut params)?;
        }

        let sigma_b = (log_sig2b[0].exp()).sqrt();
        let val_nll = {
            let f = forward_rows(&f_net, data.x, &val_rows)?;
            let yv: Vec<f64> = val_rows.iter().map(|&r| data.y[r]).collect();
            let ids: Vec<usize> = val_rows.iter().map(|&r| data.re.ids[0][r]).collect();
            let clusters = ClusterIndex::build(&ids, q)?;
            nll_glmm(&f, &yv, sigma_b, &clusters, &rule)?.nll / val_rows.len() as f64
        };
        history.records.push(EpochRecord {
            epoch,
            train_nll: epoch_nll / train_rows.len() as f64,
            val_nll,
            theta: vec![log_sig2b[0].exp()],
        });
        if val_nll < best_val {
            best_val = val_nll;
            best_state = Some((f_net.clone(), log_sig2b[0]));
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= cfg.patience {
                break;
            }
        }
    }

    let (net, raw) = best_state.unwrap_or((f_net, log_sig2b[0]));
    Ok(GlmmModel {
        f_net: net,
        sig2b: raw.exp(),
        q,
        quad_k,
        history,
        epochs_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn bce(f: &[f64], y: &[f64]) -> f64 {
        f.iter()
            .zip(y)
            .map(|(fi, yi)| softplus(*fi) - yi * fi)
            .sum()
    }

    /// Dense-grid oracle for one cluster's negative log marginal likelihood.
    fn nll_cluster_grid(f: &[f64], y: &[f64], sigma_b: f64) -> f64 {
        let half_width = 14.0 * sigma_b + 1.0;
        let n_grid = 400_001;
        let db = 2.0 * half_width / (n_grid - 1) as f64;
        let mut terms = Vec::with_capacity(n_grid);
        for g in 0..n_grid {
            let b = -half_width + g as f64 * db;
            let mut loglik = 0.0;
            for (fi, yi) in f.iter().zip(y) {
                let eta = fi + b;
                loglik += yi * eta - softplus(eta);
            }
            let logprior =
                -b * b / (2.0 * sigma_b * sigma_b) - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    - sigma_b.ln();
            terms.push(loglik + logprior);
        }
        let max = terms.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        -(max + sum.ln() + db.ln())
    }

    #[test]
    fn hermite_small_orders() {
        let r = hermite_rule(1).unwrap();
        assert!((r.nodes[0]).abs() == 0.0);
        assert!((r.weights[0] - SQRT_PI).abs() < 1e-12);

        let r = hermite_rule(2).unwrap();
        let expect = 1.0 / SQRT_2;
        assert!((r.nodes[0].abs() - expect).abs() < 1e-12);
        assert!((r.nodes[0] + r.nodes[1]).abs() < 1e-14);
        for w in &r.weights {
            assert!((w - SQRT_PI / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hermite_moment_identities() {
        for k in [3usize, 5, 10, 25, 50] {
            let r = hermite_rule(k).unwrap();
            let w_sum: f64 = r.weights.iter().sum();
            assert!((w_sum - SQRT_PI).abs() < 1e-10, "K={k} sum {w_sum}");
            let x2: f64 = r
                .nodes
                .iter()
                .zip(&r.weights)
                .map(|(x, w)| w * x * x)
                .sum();
            assert!((x2 - SQRT_PI / 2.0).abs() < 1e-10, "K={k} moment {x2}");
            // Odd moments vanish by symmetry.
            let x1: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x).sum();
            assert!(x1.abs() < 1e-12);
            if k % 2 == 1 {
                assert!(r.nodes.iter().any(|&x| x == 0.0));
            }
        }
        assert!(hermite_rule(0).is_err());
        assert!(hermite_rule(51).is_err());
    }

    #[test]
    fn sigma_zero_reduces_to_cross_entropy() {
        let mut r = rng(3);
        for k in [1usize, 5, 20] {
            let rule = hermite_rule(k).unwrap();
            let n = 12;
            let f: Vec<f64> = (0..n).map(|_| r.gen_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n)
                .map(|_| if r.gen::<f64>() < 0.5 { 0.0 } else { 1.0 })
                .collect();
            let ids: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let clusters = ClusterIndex::build(&ids, 3).unwrap();
            let loss = nll_glmm(&f, &y, 0.0, &clusters, &rule).unwrap();
            assert!(
                (loss.nll - bce(&f, &y)).abs() <= 1e-10,
                "K={k}: {} vs {}",
                loss.nll,
                bce(&f, &y)
            );
        }
    }

    #[test]
    fn single_observation_matches_closed_form_and_grid() {
        let rule = hermite_rule(5).unwrap();
        let sigma_b = 0.8;
        let clusters = ClusterIndex::build(&[0], 1).unwrap();
        let loss = nll_glmm(&[0.0], &[1.0], sigma_b, &clusters, &rule).unwrap();
        // Direct formula: -log sum_k (w_k/sqrt(pi)) sigmoid(sqrt2 sigma_b x_k).
        let direct: f64 = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(x, w)| w / SQRT_PI * sigmoid(SQRT_2 * sigma_b * x))
            .sum();
        assert!((loss.nll + direct.ln()).abs() < 1e-12);
        // By symmetry this integral is exactly 1/2, so even K=5 meets 1e-6.
        let grid = nll_cluster_grid(&[0.0], &[1.0], sigma_b);
        assert!((loss.nll - grid).abs() <= 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(7);
        let rule = hermite_rule(7).unwrap();
        let n = 9;
        let f: Vec<f64> = (0..n).map(|_| r.gen_range(-1.5..1.5)).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| if r.gen::<f64>() < 0.5 { 0.0 } else { 1.0 })
            .collect();
        let ids: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let clusters = ClusterIndex::build(&ids, 4).unwrap();
        let sig2b = 1.3f64;
        let sigma_b = sig2b.sqrt();
        let loss = nll_glmm(&f, &y, sigma_b, &clusters, &rule).unwrap();

        let h = 1e-6;
        for i in 0..n {
            let mut fu = f.clone();
            fu[i] += h;
            let up = nll_glmm(&fu, &y, sigma_b, &clusters, &rule).unwrap().nll;
            let mut fd_ = f.clone();
            fd_[i] -= h;
            let dn = nll_glmm(&fd_, &y, sigma_b, &clusters, &rule).unwrap().nll;
            let fd = (up - dn) / (2.0 * h);
            let a = loss.grad_f[i];
            assert!(
                (a - fd).abs() / (a.abs() + fd.abs() + 1e-8) <= 1e-5,
                "f[{i}]: {a} vs {fd}"
            );
        }
        // ln sig2b direction.
        let u = sig2b.ln();
        let up = nll_glmm(&f, &y, ((u + h).exp()).sqrt(), &clusters, &rule)
            .unwrap()
            .nll;
        let dn = nll_glmm(&f, &y, ((u - h).exp()).sqrt(), &clusters, &rule)
            .unwrap()
            .nll;
        let fd = (up - dn) / (2.0 * h);
        let a = loss.grad_log_sig2b;
        assert!(
            (a - fd).abs() / (a.abs() + fd.abs() + 1e-8) <= 1e-5,
            "sig2b: {a} vs {fd}"
        );
    }

    #[test]
    fn per_cluster_decomposition_is_exact() {
        let mut r = rng(11);
        let rule = hermite_rule(5).unwrap();
        let n = 20;
        let q = 5;
        let f: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|_| if r.gen::<f64>() < 0.4 { 0.0 } else { 1.0 })
            .collect();
        let ids: Vec<usize> = (0..n).map(|_| r.gen_range(0..q)).collect();
        let clusters = ClusterIndex::build(&ids, q).unwrap();
        let total = nll_glmm(&f, &y, 0.9, &clusters, &rule).unwrap().nll;
        let mut sum = 0.0;
        for j in 0..q {
            let rows = &clusters.groups[j];
            let fj: Vec<f64> = rows.iter().map(|&i| f[i]).collect();
            let yj: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
            let single = ClusterIndex {
                groups: vec![(0..rows.len()).collect()],
            };
            sum += nll_glmm(&fj, &yj, 0.9, &single, &rule).unwrap().nll;
        }
        assert!((total - sum).abs() <= 1e-12);
    }

    #[test]
    fn quadrature_error_decreases_with_more_nodes() {
        let mut r = rng(13);
        for trial in 0..5 {
            let nj = 1 + trial % 4;
            let f: Vec<f64> = (0..nj).map(|_| r.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..nj)
                .map(|_| if r.gen::<f64>() < 0.5 { 0.0 } else { 1.0 })
                .collect();
            let sigma_b = 0.5 + r.gen::<f64>() * 1.5;
            let clusters = ClusterIndex::build(&vec![0; nj], 1).unwrap();
            let diffs: Vec<f64> = [3usize, 5, 15, 25]
                .iter()
                .map(|&k| {
                    let a = nll_glmm(&f, &y, sigma_b, &clusters, &hermite_rule(k).unwrap())
                        .unwrap()
                        .nll;
                    let b = nll_glmm(&f, &y, sigma_b, &clusters, &hermite_rule(k + 10).unwrap())
                        .unwrap()
                        .nll;
                    (a - b).abs()
                })
                .collect();
            for w in diffs.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-12,
                    "trial {trial}: diffs not decreasing {diffs:?}"
                );
            }
        }
    }

    #[test]
    fn predict_b_cases() {
        let rule = hermite_rule(15).unwrap();
        // sigma_b = 0 forces zero.
        let clusters = ClusterIndex::build(&[0, 0, 1], 2).unwrap();
        let b = predict_b_quadrature(&[0.5, -0.5, 1.0], &[1.0, 0.0, 1.0], 0.0, &clusters, &rule)
            .unwrap();
        assert_eq!(b, vec![0.0, 0.0]);

        // Empty cluster keeps the prior mean.
        let clusters = ClusterIndex::build(&[0, 0], 3).unwrap();
        let b = predict_b_quadrature(&[0.2, -0.2], &[1.0, 0.0], 1.0, &clusters, &rule).unwrap();
        assert_eq!(b[1], 0.0);
        assert_eq!(b[2], 0.0);

        // Single observation, y=1, f=0, sigma_b=1 against a dense grid.
        let clusters = ClusterIndex::build(&[0], 1).unwrap();
        let b = predict_b_quadrature(&[0.0], &[1.0], 1.0, &clusters, &rule).unwrap();
        let grid = {
            let half = 14.0;
            let n_grid = 400_001;
            let db = 2.0 * half / (n_grid - 1) as f64;
            let mut num = 0.0;
            let mut den = 0.0;
            for g in 0..n_grid {
                let bb = -half + g as f64 * db;
                let w = (1.0f64 * (bb - softplus(bb)) - bb * bb / 2.0).exp();
                num += bb * w;
                den += w;
            }
            num / den
        };
        assert!((b[0] - grid).abs() <= 1e-4, "{} vs {grid}", b[0]);
    }

    #[test]
    fn predict_prob_cases() {
        let p = predict_prob(&[0.0], &[0.0]);
        assert_eq!(p[0], 0.5);
        let p = predict_prob(&[1e9], &[0.0]);
        assert!((p[0] - 1.0).abs() < 1e-13);
        let p = predict_prob(&[1.0], &[-1.0]);
        assert_eq!(p[0], 0.5);
    }

    #[test]
    fn auc_cases() {
        // Perfect separation.
        assert_eq!(
            auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            1.0
        );
        // All ties.
        assert_eq!(auc(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.5);
        // Worked example: 3 of 4 pairs concordant.
        let a = auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((a - 0.75).abs() < 1e-12);
        assert!(matches!(
            auc(&[0.1, 0.2], &[1.0, 1.0]),
            Err(Error::SingleClass)
        ));
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut r = rng(17);
        let scores: Vec<f64> = (0..50).map(|_| r.gen_range(-3.0..3.0)).collect();
        let labels: Vec<f64> = (0..50)
            .map(|_| if r.gen::<f64>() < 0.5 { 0.0 } else { 1.0 })
            .collect();
        let base = auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.3).exp()).collect();
        assert_eq!(base, auc(&transformed, &labels).unwrap());
    }

    #[test]
    fn cluster_batches_respect_budget_and_oversize() {
        let groups = vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7, 8, 9, 10], vec![11]];
        let batches = cluster_batches(&groups, 5);
        // Every cluster stays whole.
        for batch in &batches {
            for g in &groups {
                let inside = g.iter().filter(|i| batch.contains(i)).count();
                assert!(inside == 0 || inside == g.len());
            }
        }
        let total: usize = batches.iter().map(|b| b.len()).sum();
        assert_eq!(total, 12);
        // The oversized cluster is alone in its batch.
        assert!(batches.iter().any(|b| b.len() == 6 && b.contains(&5)));
    }
}

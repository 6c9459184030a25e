//! The Gaussian NLL training objective: full and mini-batch losses, analytic
//! gradients with respect to the network outputs, g(Z) and the unconstrained
//! variance components, the training loop with early stopping, and the exact
//! per-cluster gradient decomposition check for block-diagonal covariance.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    self, CovarianceSpec, GMode, GzMatrix, ReDesignData, VarianceComponents,
};
use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor, DenseMatrix};
use crate::nn::{EmbeddingTable, Mlp, OptimAlgo, Optimizer, Param};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone)]
pub struct BatchLossResult {
    pub nll: f64,
    /// dNLL/d f-outputs = -(V^-1 e).
    pub grad_f: Vec<f64>,
    /// dNLL/d unconstrained theta.
    pub grad_theta: Vec<f64>,
    /// V^-1 e, cached for reuse.
    pub solved_residual: Vec<f64>,
    /// dNLL/d g(Z) entries when g is learned.
    pub grad_gz: Option<DenseMatrix>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub optimizer: OptimAlgo,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            max_epochs: 500,
            patience: 10,
            val_fraction: 0.10,
            seed: 0,
            optimizer: OptimAlgo::Adam,
            lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidSpec("batch size must be >= 2".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidSpec("val_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![100, 50, 25, 12],
            dropout: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_nll: f64,
    /// Constrained-scale theta after the epoch.
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct History {
    pub theta_names: Vec<String>,
    pub records: Vec<EpochRecord>,
}

impl History {
    /// Columns: epoch, train_nll, val_nll, then one column per theta entry.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        write!(w, "epoch,train_nll,val_nll")?;
        for name in &self.theta_names {
            write!(w, ",{name}")?;
        }
        writeln!(w)?;
        for r in &self.records {
            write!(w, "{},{},{}", r.epoch, r.train_nll, r.val_nll)?;
            for t in &r.theta {
                write!(w, ",{t}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub f_net: Mlp,
    pub g_tables: Vec<EmbeddingTable>,
    pub theta: VarianceComponents,
    pub history: History,
    pub epochs_run: usize,
}

/// Training inputs: the full feature matrix plus the rows to train on.
#[derive(Clone, Copy)]
pub struct DataView<'a> {
    pub x: &'a DenseMatrix,
    pub y: &'a [f64],
    pub re: &'a ReDesignData,
    pub rows: &'a [usize],
}

/// Full-data Gaussian NLL: 1/2 e'V^-1 e + 1/2 log|V| + n/2 log 2pi.
pub fn nll_full(e: &[f64], v: &DenseMatrix) -> Result<f64> {
    if v.rows() != e.len() {
        return Err(Error::DimensionMismatch {
            context: "nll_full",
            expected: v.rows(),
            actual: e.len(),
        });
    }
    let factor = linalg::cholesky(v)?;
    let x = linalg::solve_vec(&factor, e)?;
    Ok(0.5 * linalg::dot(e, &x) + 0.5 * linalg::logdet(&factor) + e.len() as f64 / 2.0 * LN_2PI)
}

/// Eq.-style variance-component gradient from a factored batch covariance:
/// -1/2 x' dV x + 1/2 tr(V^-1 dV) per derivative matrix, with x = V^-1 e.
/// The trace is accumulated as an elementwise product since both factors are
/// symmetric.
pub fn grad_theta(
    e: &[f64],
    factor: &CholeskyFactor,
    dvs: &[DenseMatrix],
) -> Result<Vec<f64>> {
    let x = linalg::solve_vec(factor, e)?;
    let vinv = linalg::inverse(factor);
    let mut out = Vec::with_capacity(dvs.len());
    for dv in dvs {
        let dvx = dv.matvec(&x);
        let quad = -0.5 * linalg::dot(&x, &dvx);
        let tr: f64 = 0.5
            * vinv
                .data()
                .iter()
                .zip(dv.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        out.push(quad + tr);
    }
    Ok(out)
}

/// Mini-batch NLL over the batch's own m x m covariance, with gradients.
pub fn nll_batch(
    e: &[f64],
    spec: &CovarianceSpec,
    theta: &VarianceComponents,
    gz: &GzMatrix,
    want_gz_grad: bool,
) -> Result<BatchLossResult> {
    let m = e.len();
    if gz.rows() != m {
        return Err(Error::DimensionMismatch {
            context: "nll_batch",
            expected: gz.rows(),
            actual: m,
        });
    }
    let v = covariance::marginal_v(spec, theta, gz, true)?;
    let factor = linalg::cholesky(&v)?;
    let x = linalg::solve_vec(&factor, e)?;
    let nll = 0.5 * linalg::dot(e, &x) + 0.5 * linalg::logdet(&factor) + m as f64 / 2.0 * LN_2PI;

    let vinv = linalg::inverse(&factor);
    let n_params = spec.n_params();
    let mut g_theta = Vec::with_capacity(n_params);
    for idx in 0..n_params {
        let dv = covariance::dv_dtheta(spec, theta, gz, idx)?;
        let dvx = dv.matvec(&x);
        let quad = -0.5 * linalg::dot(&x, &dvx);
        let tr: f64 = 0.5
            * vinv
                .data()
                .iter()
                .zip(dv.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        g_theta.push(quad + tr);
    }

    let grad_gz = if want_gz_grad {
        let g = match gz {
            GzMatrix::Dense(g) => g,
            GzMatrix::Sparse(_) => {
                return Err(Error::InvalidSpec(
                    "g(Z) gradient requested for a raw sparse design".into(),
                ))
            }
        };
        // dNLL/dG = (V^-1 - x x') G D.
        let mut s = vinv.clone();
        for i in 0..m {
            for j in 0..m {
                *s.at_mut(i, j) -= x[i] * x[j];
            }
        }
        let d = covariance::build_d(spec, theta)?;
        Some(s.matmul(g).matmul(&d))
    } else {
        None
    };

    Ok(BatchLossResult {
        nll,
        grad_f: x.iter().map(|v| -v).collect(),
        grad_theta: g_theta,
        solved_residual: x,
        grad_gz,
    })
}

/// Assemble g(Z) for a row subset: the sparse design when g is the identity,
/// or concatenated embedding rows when g is learned. Returns flagged local
/// row indices whose level was unseen (test time only).
pub fn build_gz(
    spec: &CovarianceSpec,
    re: &ReDesignData,
    rows: &[usize],
    tables: &[EmbeddingTable],
    train: bool,
) -> Result<(GzMatrix, Vec<usize>)> {
    match spec.g_mode {
        GMode::Identity => {
            let (z, unknown) = covariance::build_z(spec, re, rows, train)?;
            Ok((GzMatrix::Sparse(z), unknown))
        }
        GMode::LearnedEmbedding { dim } => {
            if tables.len() != re.ids.len() {
                return Err(Error::DimensionMismatch {
                    context: "embedding tables",
                    expected: re.ids.len(),
                    actual: tables.len(),
                });
            }
            let mut g = DenseMatrix::zeros(rows.len(), tables.len() * dim);
            let mut unknown = Vec::new();
            for (k, table) in tables.iter().enumerate() {
                for (local, &r) in rows.iter().enumerate() {
                    let id = re.ids[k][r];
                    if id < table.vocab() {
                        let dst =
                            &mut g.row_mut(local)[k * dim..(k + 1) * dim];
                        dst.copy_from_slice(table.weights.row(id));
                    } else if train {
                        return Err(Error::IdOutOfRange {
                            feature: k,
                            id,
                            max: table.vocab(),
                        });
                    } else {
                        unknown.push(local);
                    }
                }
            }
            unknown.sort_unstable();
            unknown.dedup();
            Ok((GzMatrix::Dense(g), unknown))
        }
    }
}

fn gather_rows(x: &DenseMatrix, rows: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), x.cols());
    for (local, &r) in rows.iter().enumerate() {
        out.row_mut(local).copy_from_slice(x.row(r));
    }
    out
}

/// Batch starts/ends over a shuffled index list; a trailing remainder of one
/// row is folded into the final batch so every batch has at least two rows.
fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + batch_size).min(n);
        if n - end == 1 {
            end = n;
        }
        out.push((start, end));
        start = end;
    }
    out
}

struct ModelState {
    f_net: Mlp,
    g_tables: Vec<EmbeddingTable>,
    theta_raw: Vec<f64>,
}

fn embedding_dims(spec: &CovarianceSpec) -> Result<Vec<(usize, usize)>> {
    // (vocab, dim) per id feature, only for learned g.
    match spec.g_mode {
        GMode::Identity => Ok(Vec::new()),
        GMode::LearnedEmbedding { dim } => match &spec.kind {
            covariance::CovKind::RandomIntercepts { q } => Ok(vec![(*q, dim)]),
            covariance::CovKind::MultipleCategorical { qs, .. } => {
                Ok(qs.iter().map(|&q| (q, dim)).collect())
            }
            _ => Err(Error::InvalidSpec(
                "learned-embedding g is supported for categorical structures only".into(),
            )),
        },
    }
}

/// Train f (and g when learned) together with theta under the mini-batch NLL,
/// stopping early on the held-out validation NLL. Returns the parameters from
/// the best-validation epoch.
pub fn train(
    data: DataView<'_>,
    spec: &CovarianceSpec,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    spec.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    let mut f_net = Mlp::regression(data.x.cols(), &net_cfg.hidden, net_cfg.dropout, &mut rng)?;
    let mut g_tables: Vec<EmbeddingTable> = embedding_dims(spec)?
        .into_iter()
        .map(|(vocab, dim)| EmbeddingTable::new(vocab, dim, &mut rng))
        .collect();
    // Variances start at 1.0 (raw zeros), correlations at 0.
    let mut theta_raw = vec![0.0; spec.n_params()];

    let mut history = History {
        theta_names: spec.param_names(),
        records: Vec::new(),
    };

    if cfg.max_epochs == 0 {
        return Ok(TrainedModel {
            f_net,
            g_tables,
            theta: VarianceComponents::from_unconstrained(spec, &theta_raw)?,
            history,
            epochs_run: 0,
        });
    }

    // Held-out validation split of the training rows.
    let mut shuffled: Vec<usize> = data.rows.to_vec();
    shuffled.shuffle(&mut rng);
    let n_val = ((shuffled.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, shuffled.len().saturating_sub(2));
    let (train_rows, val_rows) = {
        let (t, v) = shuffled.split_at(shuffled.len() - n_val);
        (t.to_vec(), v.to_vec())
    };

    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let want_gz = !g_tables.is_empty();

    let mut best_val = f64::INFINITY;
    let mut best_state: Option<ModelState> = None;
    let mut since_improve = 0usize;
    let mut epochs_run = 0usize;

    let mut order = train_rows.clone();
    for epoch in 0..cfg.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        for (bi, &(s, t)) in batch_ranges(order.len(), cfg.batch_size).iter().enumerate() {
            let batch = &order[s..t];
            let xb = gather_rows(data.x, batch);
            let (f_out, cache) = f_net.forward_vec(&xb, true, &mut rng)?;
            let e: Vec<f64> = batch
                .iter()
                .zip(&f_out)
                .map(|(&r, f)| data.y[r] - f)
                .collect();
            let theta = VarianceComponents::from_unconstrained(spec, &theta_raw)?;
            let (gz, _) = build_gz(spec, data.re, batch, &g_tables, true)?;
            let res = nll_batch(&e, spec, &theta, &gz, want_gz)?;
            if !res.nll.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_nll += res.nll;

            let grad_out = DenseMatrix::from_vec(batch.len(), 1, res.grad_f.clone());
            let (f_grads, _) = f_net.backward(&cache, &grad_out)?;

            let table_grads: Vec<DenseMatrix> = if want_gz {
                let gg = res.grad_gz.as_ref().expect("grad_gz requested");
                let dim = gg.cols() / g_tables.len();
                g_tables
                    .iter()
                    .enumerate()
                    .map(|(k, table)| {
                        let ids: Vec<usize> =
                            batch.iter().map(|&r| data.re.ids[k][r]).collect();
                        let cols = DenseMatrix::from_fn(batch.len(), dim, |i, j| {
                            gg.at(i, k * dim + j)
                        });
                        table.backward(&ids, &cols)
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };

            let mut params = f_net.params_with_grads(&f_grads, "f");
            for (k, (table, grad)) in g_tables.iter_mut().zip(&table_grads).enumerate() {
                params.push(Param {
                    name: format!("g.table{k}"),
                    value: table.weights.data_mut(),
                    grad: grad.data(),
                });
            }
            params.push(Param {
                name: "theta".into(),
                value: &mut theta_raw,
                grad: &res.grad_theta,
            });
            opt.step(&mut params)?;
        }

        let theta = VarianceComponents::from_unconstrained(spec, &theta_raw)?;
        let val_nll = evaluate_nll(
            &f_net,
            &g_tables,
            &theta,
            spec,
            data,
            &val_rows,
            cfg.batch_size,
        )?;
        history.records.push(EpochRecord {
            epoch,
            train_nll: epoch_nll / order.len() as f64,
            val_nll,
            theta: theta.to_vec(),
        });

        if val_nll < best_val {
            best_val = val_nll;
            best_state = Some(ModelState {
                f_net: f_net.clone(),
                g_tables: g_tables.clone(),
                theta_raw: theta_raw.clone(),
            });
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= cfg.patience {
                break;
            }
        }
    }

    let state = best_state.unwrap_or(ModelState {
        f_net,
        g_tables,
        theta_raw,
    });
    Ok(TrainedModel {
        f_net: state.f_net,
        g_tables: state.g_tables,
        theta: VarianceComponents::from_unconstrained(spec, &state.theta_raw)?,
        history,
        epochs_run,
    })
}

/// Mean per-observation mini-batch NLL over a row set, evaluation mode.
pub fn evaluate_nll(
    f_net: &Mlp,
    g_tables: &[EmbeddingTable],
    theta: &VarianceComponents,
    spec: &CovarianceSpec,
    data: DataView<'_>,
    rows: &[usize],
    batch_size: usize,
) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("evaluate_nll"));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut total = 0.0;
    for (s, t) in batch_ranges(rows.len(), batch_size) {
        let batch = &rows[s..t];
        let xb = gather_rows(data.x, batch);
        let (f_out, _) = f_net.forward_vec(&xb, false, &mut rng)?;
        let e: Vec<f64> = batch
            .iter()
            .zip(&f_out)
            .map(|(&r, f)| data.y[r] - f)
            .collect();
        let (gz, _) = build_gz(spec, data.re, batch, g_tables, true)?;
        let v = covariance::marginal_v(spec, theta, &gz, true)?;
        total += nll_full(&e, &v)?;
    }
    Ok(total / rows.len() as f64)
}

/// Compare the full-data theta gradient against the sum of per-cluster
/// gradients with clusters as batches; exact for block-diagonal V. Residuals
/// `e` align with `rows`, which must be sorted by the primary cluster id.
pub fn gradient_decomposition_check(
    e: &[f64],
    spec: &CovarianceSpec,
    theta: &VarianceComponents,
    re: &ReDesignData,
    rows: &[usize],
) -> Result<f64> {
    if e.len() != rows.len() {
        return Err(Error::DimensionMismatch {
            context: "gradient_decomposition_check",
            expected: rows.len(),
            actual: e.len(),
        });
    }
    let restricted = ReDesignData {
        ids: re
            .ids
            .iter()
            .map(|col| rows.iter().map(|&r| col[r]).collect())
            .collect(),
        times: re
            .times
            .as_ref()
            .map(|t| rows.iter().map(|&r| t[r]).collect()),
    };
    let blocks = covariance::is_block_diagonal(spec, &restricted).ok_or(Error::NoBlockStructure)?;

    let full = {
        let (z, _) = covariance::build_z(spec, re, rows, true)?;
        let res = nll_batch(e, spec, theta, &GzMatrix::Sparse(z), false)?;
        res.grad_theta
    };

    let mut summed = vec![0.0; spec.n_params()];
    let mut offset = 0;
    for size in blocks {
        let cluster_rows = &rows[offset..offset + size];
        let (z, _) = covariance::build_z(spec, re, cluster_rows, true)?;
        let res = nll_batch(
            &e[offset..offset + size],
            spec,
            theta,
            &GzMatrix::Sparse(z),
            false,
        )?;
        for (s, g) in summed.iter_mut().zip(&res.grad_theta) {
            *s += g;
        }
        offset += size;
    }

    Ok(full
        .iter()
        .zip(&summed)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

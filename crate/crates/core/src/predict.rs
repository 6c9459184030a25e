//! Random-effect prediction and test-set response prediction: the general
//! D g(Z)' V^-1 e route with block solves where the covariance is
//! block-diagonal, the closed-form random-intercepts shortcut, a seeded
//! subsampling fallback for dense V, and MSE aggregation.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    self, CovKind, CovarianceSpec, GMode, ReDesignData, VarianceComponents,
};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::nll::{self, DataView, TrainedModel};
use crate::nn::{EmbeddingTable, Mlp};

/// Policy for the BLUP solve: full dense factorization up to `dense_cap`
/// training rows, otherwise a uniform subsample of `subsample` rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlupConfig {
    pub dense_cap: usize,
    pub subsample: usize,
    pub seed: u64,
}

impl Default for BlupConfig {
    fn default() -> Self {
        BlupConfig {
            dense_cap: 20_000,
            subsample: 10_000,
            seed: 0,
        }
    }
}

/// Everything needed to predict: the fitted networks, variance components,
/// and the training-side design with residuals y_tr - f(X_tr).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: CovarianceSpec,
    pub theta: VarianceComponents,
    pub f_net: Mlp,
    pub g_tables: Vec<EmbeddingTable>,
    /// Training random-effects info, re-indexed to local rows 0..n_train.
    pub train_re: ReDesignData,
    pub residuals: Vec<f64>,
}

impl FittedModel {
    /// Assemble from a trained model: evaluates f on the training rows and
    /// stores the residuals plus a locally re-indexed copy of the design.
    pub fn from_trained(
        trained: &TrainedModel,
        spec: &CovarianceSpec,
        data: DataView<'_>,
    ) -> Result<Self> {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut residuals = Vec::with_capacity(data.rows.len());
        // Evaluate in chunks to bound memory.
        for chunk in data.rows.chunks(4096) {
            let mut xb = DenseMatrix::zeros(chunk.len(), data.x.cols());
            for (local, &r) in chunk.iter().enumerate() {
                xb.row_mut(local).copy_from_slice(data.x.row(r));
            }
            let (f_out, _) = trained.f_net.forward_vec(&xb, false, &mut rng)?;
            for (&r, f) in chunk.iter().zip(&f_out) {
                residuals.push(data.y[r] - f);
            }
        }
        let train_re = restrict_re(data.re, data.rows);
        Ok(FittedModel {
            spec: spec.clone(),
            theta: trained.theta.clone(),
            f_net: trained.f_net.clone(),
            g_tables: trained.g_tables.clone(),
            train_re,
            residuals,
        })
    }

    pub fn n_train(&self) -> usize {
        self.residuals.len()
    }

    /// f(X) on a row subset, evaluation mode.
    pub fn fixed_effects(&self, x: &DenseMatrix, rows: &[usize]) -> Result<Vec<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(4096) {
            let mut xb = DenseMatrix::zeros(chunk.len(), x.cols());
            for (local, &r) in chunk.iter().enumerate() {
                xb.row_mut(local).copy_from_slice(x.row(r));
            }
            let (f_out, _) = self.f_net.forward_vec(&xb, false, &mut rng)?;
            out.extend(f_out);
        }
        Ok(out)
    }

    /// b_hat = D g(Z)' V^-1 e over the training rows, choosing between the
    /// block-diagonal path, a dense factorization, and subsampling.
    pub fn blup(&self, cfg: &BlupConfig) -> Result<Vec<f64>> {
        let n = self.n_train();
        if n == 0 {
            return Err(Error::EmptyInput("blup"));
        }
        if let Some(perm) = self.block_permutation() {
            let sorted = restrict_re(&self.train_re, &perm);
            if let Some(blocks) = covariance::is_block_diagonal(&self.spec, &sorted) {
                let e_sorted: Vec<f64> = perm.iter().map(|&i| self.residuals[i]).collect();
                let mut x_sorted = Vec::with_capacity(n);
                let mut off = 0;
                for size in blocks {
                    let rows = &perm[off..off + size];
                    let (gz, _) =
                        nll::build_gz(&self.spec, &self.train_re, rows, &self.g_tables, true)?;
                    let v = covariance::marginal_v(&self.spec, &self.theta, &gz, true)?;
                    let factor = linalg::cholesky(&v)?;
                    x_sorted.extend(linalg::solve_vec(&factor, &e_sorted[off..off + size])?);
                    off += size;
                }
                return self.bhat_from_solution(&perm, &x_sorted);
            }
        }
        if n <= cfg.dense_cap {
            let all: Vec<usize> = (0..n).collect();
            self.blup_on_rows(&all)
        } else {
            self.subsample_blup(cfg.subsample.min(n), cfg.seed)
        }
    }

    /// Eq.-7-style closed form for random intercepts with identity g:
    /// b_j = n_j sig2b / (sig2e + n_j sig2b) * mean cluster residual.
    pub fn blup_intercepts_fast(&self) -> Result<Vec<f64>> {
        let q = match (&self.spec.kind, self.spec.g_mode) {
            (CovKind::RandomIntercepts { q }, GMode::Identity) => *q,
            _ => {
                return Err(Error::InvalidSpec(
                    "fast shortcut requires random intercepts with identity g".into(),
                ))
            }
        };
        let sig2b = self.theta.psi[0];
        let sig2e = self.theta.sig2e;
        let mut count = vec![0usize; q];
        let mut sum = vec![0.0; q];
        for (i, &id) in self.train_re.ids[0].iter().enumerate() {
            count[id] += 1;
            sum[id] += self.residuals[i];
        }
        Ok((0..q)
            .map(|j| {
                if count[j] == 0 {
                    0.0
                } else {
                    let nj = count[j] as f64;
                    let shrink = nj * sig2b / (sig2e + nj * sig2b);
                    shrink * (sum[j] / nj)
                }
            })
            .collect())
    }

    /// Eq.-17 restricted to a uniform sample of training rows.
    pub fn subsample_blup(&self, sample: usize, seed: u64) -> Result<Vec<f64>> {
        let n = self.n_train();
        if sample < 2 {
            return Err(Error::InvalidSpec("subsample size must be >= 2".into()));
        }
        if sample > n {
            return Err(Error::DimensionMismatch {
                context: "subsample_blup",
                expected: n,
                actual: sample,
            });
        }
        if sample == n {
            let all: Vec<usize> = (0..n).collect();
            return self.blup_on_rows(&all);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut pool: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates; the prefix is the sample.
        for i in 0..sample {
            let j = rng.gen_range(i..n);
            pool.swap(i, j);
        }
        let mut rows = pool[..sample].to_vec();
        rows.sort_unstable();
        self.blup_on_rows(&rows)
    }

    fn blup_on_rows(&self, rows: &[usize]) -> Result<Vec<f64>> {
        let (gz, _) = nll::build_gz(&self.spec, &self.train_re, rows, &self.g_tables, true)?;
        let v = covariance::marginal_v(&self.spec, &self.theta, &gz, true)?;
        let factor = linalg::cholesky(&v)?;
        let e: Vec<f64> = rows.iter().map(|&r| self.residuals[r]).collect();
        let x = linalg::solve_vec(&factor, &e)?;
        let ztx = gz.t_matvec(&x);
        let d = covariance::build_d(&self.spec, &self.theta)?;
        Ok(d.matvec(&ztx))
    }

    fn bhat_from_solution(&self, rows: &[usize], x: &[f64]) -> Result<Vec<f64>> {
        let (gz, _) = nll::build_gz(&self.spec, &self.train_re, rows, &self.g_tables, true)?;
        let ztx = gz.t_matvec(x);
        let d = covariance::build_d(&self.spec, &self.theta)?;
        Ok(d.matvec(&ztx))
    }

    /// Stable ordering by the primary cluster id when the structure can be
    /// block-diagonalized by sorting; None otherwise.
    fn block_permutation(&self) -> Option<Vec<usize>> {
        if !matches!(self.spec.g_mode, GMode::Identity) {
            return None;
        }
        match &self.spec.kind {
            CovKind::RandomIntercepts { .. } | CovKind::Longitudinal { .. } => {}
            CovKind::MultipleCategorical { qs, nested } => {
                if !(*nested || qs.len() == 1) {
                    return None;
                }
            }
            _ => return None,
        }
        let ids = &self.train_re.ids[0];
        let mut perm: Vec<usize> = (0..ids.len()).collect();
        perm.sort_by_key(|&i| ids[i]);
        Some(perm)
    }

    /// y_hat = f(X_te) + g(Z_te) b_hat. Rows whose levels were never seen in
    /// training contribute no random part.
    pub fn predict(
        &self,
        x: &DenseMatrix,
        re: &ReDesignData,
        rows: &[usize],
        bhat: &[f64],
    ) -> Result<Vec<f64>> {
        if bhat.len() != self.spec.d_dim() {
            return Err(Error::DimensionMismatch {
                context: "predict bhat",
                expected: self.spec.d_dim(),
                actual: bhat.len(),
            });
        }
        let fixed = self.fixed_effects(x, rows)?;
        let (gz, _) = nll::build_gz(&self.spec, re, rows, &self.g_tables, false)?;
        let re_part = gz.matvec(bhat);
        Ok(fixed
            .iter()
            .zip(&re_part)
            .map(|(f, r)| f + r)
            .collect())
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let file =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn load_json(path: &std::path::Path) -> Result<Self> {
        let file =
            std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }
}

/// Re-index a design to local rows 0..rows.len().
pub fn restrict_re(re: &ReDesignData, rows: &[usize]) -> ReDesignData {
    ReDesignData {
        ids: re
            .ids
            .iter()
            .map(|col| rows.iter().map(|&r| col[r]).collect())
            .collect(),
        times: re
            .times
            .as_ref()
            .map(|t| rows.iter().map(|&r| t[r]).collect()),
    }
}

/// Mean squared prediction error.
pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::EmptyInput("mse"));
    }
    if y.len() != yhat.len() {
        return Err(Error::DimensionMismatch {
            context: "mse",
            expected: y.len(),
            actual: yhat.len(),
        });
    }
    Ok(y.iter()
        .zip(yhat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y.len() as f64)
}

/// Mean and standard error over replication-level metrics.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput("aggregate"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Columns: row_id, y_true, y_pred.
pub fn write_predictions_csv(
    w: &mut impl Write,
    y_true: &[f64],
    y_pred: &[f64],
) -> std::io::Result<()> {
    writeln!(w, "row_id,y_true,y_pred")?;
    for (i, (t, p)) in y_true.iter().zip(y_pred).enumerate() {
        writeln!(w, "{i},{t},{p}")?;
    }
    Ok(())
}

/// Columns: level_id, b_hat.
pub fn write_blup_csv(w: &mut impl Write, bhat: &[f64]) -> std::io::Result<()> {
    writeln!(w, "level_id,b_hat")?;
    for (i, b) in bhat.iter().enumerate() {
        writeln!(w, "{i},{b}")?;
    }
    Ok(())
}

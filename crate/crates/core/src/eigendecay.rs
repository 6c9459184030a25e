//! Eigenvalue-decay diagnostics for categorical kernel matrices: the
//! closed-form spectrum of sig2 * Z Z' from cluster sizes, dense spectra of
//! summed kernels, and a log-log least-squares fit of the C * i^-p decay
//! model.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};

/// Dense eigensolves are a diagnostic, not a scalability demonstration.
pub const DENSE_CAP: usize = 2000;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Sorted descending.
    pub eigenvalues: Vec<f64>,
    pub fit_c: f64,
    pub fit_p: f64,
    /// Max abs deviation from a dense eigensolve, when one was run.
    pub max_dense_deviation: Option<f64>,
}

impl SpectrumReport {
    /// Columns: index (1-based rank), eigenvalue, fitted_value.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "index,eigenvalue,fitted_value")?;
        for (i, ev) in self.eigenvalues.iter().enumerate() {
            let rank = (i + 1) as f64;
            let fitted = self.fit_c * rank.powf(-self.fit_p);
            writeln!(w, "{},{ev},{fitted}", i + 1)?;
        }
        Ok(())
    }
}

/// Block-diagonal sig2 * J matrix for contiguous clusters of the given sizes.
fn categorical_kernel(sizes: &[usize], sigma2: f64) -> DenseMatrix {
    let n: usize = sizes.iter().sum();
    let mut m = DenseMatrix::zeros(n, n);
    let mut off = 0;
    for &s in sizes {
        for i in 0..s {
            for j in 0..s {
                *m.at_mut(off + i, off + j) = sigma2;
            }
        }
        off += s;
    }
    m
}

/// Spectrum of sig2 * Z Z' for a single categorical feature: each cluster
/// block is rank one with eigenvalue sig2 * n_j, so the spectrum is those q
/// values plus n - q zeros, never forming the matrix. Cross-checked against
/// a dense eigensolve up to n = 200.
pub fn categorical_spectrum(cluster_sizes: &[usize], sigma2: f64) -> Result<SpectrumReport> {
    if cluster_sizes.is_empty() || cluster_sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidSpec("cluster sizes must be positive".into()));
    }
    let n: usize = cluster_sizes.iter().sum();
    let mut eig: Vec<f64> = cluster_sizes
        .iter()
        .map(|&s| sigma2 * s as f64)
        .collect();
    eig.resize(n, 0.0);
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let max_dense_deviation = if n <= 200 {
        let dense = linalg::symmetric_eigenvalues(&categorical_kernel(cluster_sizes, sigma2))?;
        Some(
            eig.iter()
                .zip(&dense)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    } else {
        None
    };

    // Fewer than 3 positive eigenvalues leave no decay model to fit.
    let (fit_c, fit_p) = fit_decay(&eig, None).unwrap_or((f64::NAN, f64::NAN));
    Ok(SpectrumReport {
        eigenvalues: eig,
        fit_c,
        fit_p,
        max_dense_deviation,
    })
}

/// Least-squares fit of log lambda_i = log C - p log i over a 0-based rank
/// window; defaults to the strictly positive prefix of the spectrum.
pub fn fit_decay(
    eigenvalues: &[f64],
    window: Option<std::ops::Range<usize>>,
) -> Result<(f64, f64)> {
    let window = window.unwrap_or_else(|| {
        let positive = eigenvalues.iter().take_while(|&&v| v > 0.0).count();
        0..positive
    });
    let ranks: Vec<f64> = window.clone().map(|i| (i + 1) as f64).collect();
    let vals: Vec<f64> = eigenvalues[window].to_vec();
    if vals.len() < 3 || vals.iter().any(|&v| v <= 0.0) {
        return Err(Error::InvalidSpec(
            "decay fit needs at least 3 positive eigenvalues".into(),
        ));
    }
    let xs: Vec<f64> = ranks.iter().map(|r| r.ln()).collect();
    let ys: Vec<f64> = vals.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    Ok((intercept.exp(), -slope))
}

/// Dense spectrum of sum_l sig2_l Z_l Z_l' + sig2e I, each kernel given by
/// its cluster-size list over the same contiguous row layout.
pub fn summed_spectrum(
    kernels: &[(Vec<usize>, f64)],
    sigma2e: f64,
) -> Result<SpectrumReport> {
    if kernels.is_empty() {
        return Err(Error::EmptyInput("summed_spectrum"));
    }
    let n: usize = kernels[0].0.iter().sum();
    for (sizes, _) in kernels {
        let total: usize = sizes.iter().sum();
        if total != n {
            return Err(Error::DimensionMismatch {
                context: "summed_spectrum",
                expected: n,
                actual: total,
            });
        }
    }
    if n > DENSE_CAP {
        return Err(Error::InvalidSpec(format!(
            "n = {n} exceeds the dense eigensolve cap of {DENSE_CAP}"
        )));
    }
    let mut v = DenseMatrix::zeros(n, n);
    for (sizes, sigma2) in kernels {
        let k = categorical_kernel(sizes, *sigma2);
        for (acc, add) in v.data_mut().iter_mut().zip(k.data()) {
            *acc += add;
        }
    }
    v.add_diagonal(sigma2e);
    let eig = linalg::symmetric_eigenvalues(&v)?;
    let (fit_c, fit_p) = fit_decay(&eig, None).unwrap_or((f64::NAN, f64::NAN));
    Ok(SpectrumReport {
        eigenvalues: eig,
        fit_c,
        fit_p,
        max_dense_deviation: None,
    })
}

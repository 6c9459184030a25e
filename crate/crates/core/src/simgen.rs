//! Seeded synthetic data generators for every simulation scenario: clustered
//! categorical features with Poisson-multinomial level sizes, longitudinal
//! polynomials on an equally spaced time grid, spatial RBF fields on random
//! 2-D sites, additive combinations, and a binary-response variant. Each
//! random component draws from its own named RNG stream so changing one
//! component's draw count does not shift the others.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::covariance::{self, CovKind, CovarianceSpec, GMode, GzMatrix, ReDesignData, VarianceComponents};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, SparseDesign};

// RNG stream ids per component.
const STREAM_X: u64 = 0;
const STREAM_EPS: u64 = 3;
const STREAM_TIMES: u64 = 5;
const STREAM_SPLIT: u64 = 6;
const STREAM_BERNOULLI: u64 = 7;
const STREAM_LOCATIONS: u64 = 8;
const STREAM_SIZES_BASE: u64 = 10;
const STREAM_B_BASE: u64 = 20;
const STREAM_W_BASE: u64 = 40;

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scenario {
    SingleCategorical {
        q: usize,
        sig2b: f64,
    },
    MultipleCategorical {
        qs: Vec<usize>,
        sig2bs: Vec<f64>,
    },
    Longitudinal {
        q: usize,
        sig2bs: Vec<f64>,
        #[serde(default)]
        correlated_pairs: Vec<(usize, usize)>,
        #[serde(default)]
        rhos: Vec<f64>,
    },
    Spatial {
        q: usize,
        sig2b0: f64,
        sig2b1: f64,
    },
    Combined {
        q1: usize,
        q2: usize,
        q_loc: usize,
        sig2b: f64,
        sig2c: f64,
        sig2d0: f64,
        sig2d1: f64,
    },
    GlmmBinary {
        q: usize,
        sig2b: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimGMode {
    Identity,
    LinearW,
    NonlinearW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    Random,
    Future,
}

fn default_p() -> usize {
    10
}

fn default_sig2e() -> f64 {
    1.0
}

fn default_g_mode() -> SimGMode {
    SimGMode::Identity
}

fn default_split() -> SplitMode {
    SplitMode::Random
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub scenario: Scenario,
    pub n: usize,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_sig2e")]
    pub sig2e: f64,
    #[serde(default = "default_g_mode")]
    pub g_mode: SimGMode,
    #[serde(default = "default_split")]
    pub split: SplitMode,
    #[serde(default)]
    pub seed: u64,
}

/// Generated data plus the train/test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedDataset {
    pub x: DenseMatrix,
    pub re: ReDesignData,
    pub y: Vec<f64>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Everything drawn while generating, enough to reconstruct y exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Canonical constrained theta [sig2e, psi.., rho..] of the model spec.
    pub theta: Vec<f64>,
    /// Random-effect coefficient vector per component (embedding-width for
    /// the W modes).
    pub b: Vec<Vec<f64>>,
    /// W matrix per component; empty matrices for identity g.
    pub w: Vec<DenseMatrix>,
    /// Per-row g(Z)b contribution.
    pub re_contrib: Vec<f64>,
    /// Per-row Gaussian noise; empty for the binary scenario.
    pub eps: Vec<f64>,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidSpec("n must be >= 2".into()));
        }
        if self.p < 2 {
            return Err(Error::InvalidSpec("p must be >= 2".into()));
        }
        if self.split == SplitMode::Future && !matches!(self.scenario, Scenario::Longitudinal { .. })
        {
            return Err(Error::InvalidSpec(
                "future split applies to longitudinal scenarios only".into(),
            ));
        }
        if self.g_mode != SimGMode::Identity {
            match &self.scenario {
                Scenario::SingleCategorical { q, .. } => {
                    if *q < 10 {
                        return Err(Error::InvalidSpec(
                            "W modes need q >= 10 so the output width is at least 1".into(),
                        ));
                    }
                }
                Scenario::MultipleCategorical { qs, .. } => {
                    if qs.iter().any(|&q| q < 10) {
                        return Err(Error::InvalidSpec(
                            "W modes need q >= 10 so the output width is at least 1".into(),
                        ));
                    }
                }
                _ => {
                    return Err(Error::InvalidSpec(
                        "W modes apply to categorical scenarios".into(),
                    ))
                }
            }
        }
        match &self.scenario {
            Scenario::SingleCategorical { q, .. } | Scenario::GlmmBinary { q, .. } => {
                if self.n < *q {
                    return Err(Error::InvalidSpec("n must be >= q".into()));
                }
            }
            Scenario::MultipleCategorical { qs, sig2bs } => {
                if qs.len() != sig2bs.len() || qs.is_empty() {
                    return Err(Error::InvalidSpec(
                        "qs and sig2bs must have equal nonzero length".into(),
                    ));
                }
                if qs.iter().any(|&q| self.n < q) {
                    return Err(Error::InvalidSpec("n must be >= every q".into()));
                }
            }
            Scenario::Longitudinal {
                q,
                sig2bs,
                correlated_pairs,
                rhos,
            } => {
                if sig2bs.is_empty() {
                    return Err(Error::InvalidSpec("at least one time term".into()));
                }
                if correlated_pairs.len() != rhos.len() {
                    return Err(Error::InvalidSpec(
                        "correlated_pairs and rhos must align".into(),
                    ));
                }
                if self.n < *q {
                    return Err(Error::InvalidSpec("n must be >= q".into()));
                }
            }
            Scenario::Spatial { q, .. } => {
                if self.n < *q {
                    return Err(Error::InvalidSpec("n must be >= q".into()));
                }
            }
            Scenario::Combined { q1, q2, q_loc, .. } => {
                if self.n < *q1.max(q2).max(q_loc) {
                    return Err(Error::InvalidSpec("n must be >= every q".into()));
                }
            }
        }
        Ok(())
    }

    /// True variance components in the canonical [sig2e, psi.., rho..] order.
    pub fn true_theta(&self) -> Vec<f64> {
        let mut t = vec![self.sig2e];
        match &self.scenario {
            Scenario::SingleCategorical { sig2b, .. } | Scenario::GlmmBinary { sig2b, .. } => {
                t.push(*sig2b)
            }
            Scenario::MultipleCategorical { sig2bs, .. } => t.extend(sig2bs),
            Scenario::Longitudinal { sig2bs, rhos, .. } => {
                t.extend(sig2bs);
                t.extend(rhos);
            }
            Scenario::Spatial { sig2b0, sig2b1, .. } => {
                t.push(*sig2b0);
                t.push(*sig2b1);
            }
            Scenario::Combined {
                sig2b,
                sig2c,
                sig2d0,
                sig2d1,
                ..
            } => {
                t.push(*sig2b);
                t.push(*sig2c);
                t.push(*sig2d0);
                t.push(*sig2d1);
            }
        }
        t
    }
}

/// RNG stream used for cluster-size draws, for callers that feed
/// `sample_cluster_sizes` directly.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    stream_rng(seed, STREAM_SIZES_BASE)
}

/// The fixed-effect surface: (sum x_j) * cos(sum x_j) + 2 x_0 x_1.
pub fn f_true(x: &DenseMatrix) -> Vec<f64> {
    assert!(x.cols() >= 2, "f_true needs at least two columns");
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            let s: f64 = row.iter().sum();
            s * s.cos() + 2.0 * row[0] * row[1]
        })
        .collect()
}

/// Assign n rows to q levels with multinomial probabilities proportional to
/// q Poisson(30) draws. All-zero draws are resampled once, then rejected.
pub fn sample_cluster_sizes(n: usize, q: usize, rng: &mut ChaCha12Rng) -> Result<Vec<usize>> {
    if q == 0 {
        return Err(Error::InvalidSpec("q must be >= 1".into()));
    }
    let pois = Poisson::new(30.0).expect("valid Poisson rate");
    let mut draws: Vec<f64> = (0..q).map(|_| pois.sample(rng)).collect();
    if draws.iter().sum::<f64>() == 0.0 {
        draws = (0..q).map(|_| pois.sample(rng)).collect();
        if draws.iter().sum::<f64>() == 0.0 {
            return Err(Error::InvalidSpec(
                "Poisson level-size draws were all zero twice".into(),
            ));
        }
    }
    let total: f64 = draws.iter().sum();
    // Cumulative probabilities for inverse-CDF sampling.
    let mut cum = Vec::with_capacity(q);
    let mut acc = 0.0;
    for d in &draws {
        acc += d / total;
        cum.push(acc);
    }
    let assignment = (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            match cum.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                Ok(idx) => (idx + 1).min(q - 1),
                Err(idx) => idx.min(q - 1),
            }
        })
        .collect();
    Ok(assignment)
}

/// Width of the learned/linear transformation for the W modes: 0.1 * q.
pub fn w_output_dim(q: usize) -> Result<usize> {
    let d = q / 10;
    if d == 0 {
        return Err(Error::InvalidSpec(
            "W modes need q >= 10 so the output width is at least 1".into(),
        ));
    }
    Ok(d)
}

/// Draw the q x d transformation with U(-1, 1) entries.
pub fn sample_w(q: usize, rng: &mut ChaCha12Rng) -> Result<DenseMatrix> {
    let d = w_output_dim(q)?;
    Ok(DenseMatrix::from_fn(q, d, |_, _| rng.gen_range(-1.0..1.0)))
}

/// Transform a raw design: identity passes it through, linear maps rows by W,
/// nonlinear applies (ZW) .* cos(ZW) rowwise.
pub fn apply_g(z: &SparseDesign, mode: SimGMode, w: Option<&DenseMatrix>) -> Result<GzMatrix> {
    match mode {
        SimGMode::Identity => Ok(GzMatrix::Sparse(z.clone())),
        SimGMode::LinearW | SimGMode::NonlinearW => {
            let w = w.ok_or_else(|| Error::InvalidSpec("W modes need a W matrix".into()))?;
            if w.rows() != z.cols() {
                return Err(Error::DimensionMismatch {
                    context: "apply_g",
                    expected: z.cols(),
                    actual: w.rows(),
                });
            }
            let mut out = DenseMatrix::zeros(z.rows(), w.cols());
            for i in 0..z.rows() {
                let row = out.row_mut(i);
                for &(c, v) in z.row(i) {
                    for (o, wv) in row.iter_mut().zip(w.row(c)) {
                        *o += v * wv;
                    }
                }
                if mode == SimGMode::NonlinearW {
                    for o in row.iter_mut() {
                        *o *= o.cos();
                    }
                }
            }
            Ok(GzMatrix::Dense(out))
        }
    }
}

/// Zero-mean spatial effects with the RBF covariance at the given sites,
/// drawn through the Cholesky factor of D + 1e-10 I.
pub fn draw_spatial_b(
    locations: &[[f64; 2]],
    sig2b0: f64,
    sig2b1: f64,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    let mut d = covariance::rbf_kernel(locations, sig2b0, sig2b1)?;
    d.add_diagonal(1e-10);
    let factor = linalg::cholesky(&d)?;
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let zvec: Vec<f64> = (0..locations.len()).map(|_| normal.sample(rng)).collect();
    let l = factor.lower();
    Ok((0..locations.len())
        .map(|i| linalg::dot(&l.row(i)[..=i], &zvec[..=i]))
        .collect())
}

struct ComponentDraw {
    b: Vec<f64>,
    w: DenseMatrix,
}

/// Generate a dataset: returns the data with its split, the covariance spec a
/// model should fit (identity-g view of the truth), and the ground truth.
pub fn gen(spec: &SimSpec) -> Result<(MixedDataset, CovarianceSpec, GroundTruth)> {
    spec.validate()?;
    let n = spec.n;
    let mut x_rng = stream_rng(spec.seed, STREAM_X);
    let x = DenseMatrix::from_fn(n, spec.p, |_, _| x_rng.gen_range(-1.0..1.0));
    let f = f_true(&x);

    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let mut re = ReDesignData::default();
    let mut components: Vec<ComponentDraw> = Vec::new();
    let mut re_contrib = vec![0.0; n];
    let mut locations_out: Option<Vec<[f64; 2]>> = None;

    // Per-component categorical contribution, either raw or through W.
    let add_categorical =
        |ids: &[usize], q: usize, sig2: f64, comp_idx: u64, re_contrib: &mut [f64]| -> Result<ComponentDraw> {
            let mut b_rng = stream_rng(spec.seed, STREAM_B_BASE + comp_idx);
            match spec.g_mode {
                SimGMode::Identity => {
                    let b: Vec<f64> =
                        (0..q).map(|_| normal.sample(&mut b_rng) * sig2.sqrt()).collect();
                    for (row, &id) in ids.iter().enumerate() {
                        re_contrib[row] += b[id];
                    }
                    Ok(ComponentDraw {
                        b,
                        w: DenseMatrix::zeros(0, 0),
                    })
                }
                SimGMode::LinearW | SimGMode::NonlinearW => {
                    let mut w_rng = stream_rng(spec.seed, STREAM_W_BASE + comp_idx);
                    let w = sample_w(q, &mut w_rng)?;
                    let d = w.cols();
                    let b: Vec<f64> =
                        (0..d).map(|_| normal.sample(&mut b_rng) * sig2.sqrt()).collect();
                    for (row, &id) in ids.iter().enumerate() {
                        let wrow = w.row(id);
                        let mut acc = 0.0;
                        for (wv, bv) in wrow.iter().zip(&b) {
                            let g = if spec.g_mode == SimGMode::NonlinearW {
                                wv * wv.cos()
                            } else {
                                *wv
                            };
                            acc += g * bv;
                        }
                        re_contrib[row] += acc;
                    }
                    Ok(ComponentDraw { b, w })
                }
            }
        };

    match &spec.scenario {
        Scenario::SingleCategorical { q, sig2b } | Scenario::GlmmBinary { q, sig2b } => {
            let mut size_rng = stream_rng(spec.seed, STREAM_SIZES_BASE);
            let ids = sample_cluster_sizes(n, *q, &mut size_rng)?;
            components.push(add_categorical(&ids, *q, *sig2b, 0, &mut re_contrib)?);
            re.ids.push(ids);
        }
        Scenario::MultipleCategorical { qs, sig2bs } => {
            for (k, (&q, &sig2)) in qs.iter().zip(sig2bs).enumerate() {
                let mut size_rng = stream_rng(spec.seed, STREAM_SIZES_BASE + k as u64);
                let ids = sample_cluster_sizes(n, q, &mut size_rng)?;
                components.push(add_categorical(&ids, q, sig2, k as u64, &mut re_contrib)?);
                re.ids.push(ids);
            }
        }
        Scenario::Longitudinal {
            q,
            sig2bs,
            correlated_pairs,
            rhos,
        } => {
            let order = sig2bs.len();
            let mut t_rng = stream_rng(spec.seed, STREAM_TIMES);
            let (ids, times) = longitudinal_design(n, *q, &mut t_rng)?;
            // Per-subject coefficient vectors through the term covariance.
            let c = covariance::longitudinal_term_cov(order, sig2bs, correlated_pairs, rhos)?;
            let cfac = linalg::cholesky(&c)?;
            let l = cfac.lower();
            let mut b_rng = stream_rng(spec.seed, STREAM_B_BASE);
            // Layout matches build_z: order blocks of q subjects.
            let mut b = vec![0.0; order * q];
            for j in 0..*q {
                let zs: Vec<f64> = (0..order).map(|_| normal.sample(&mut b_rng)).collect();
                for k in 0..order {
                    b[k * q + j] = linalg::dot(&l.row(k)[..=k], &zs[..=k]);
                }
            }
            for (row, (&id, &t)) in ids.iter().zip(&times).enumerate() {
                let mut tk = 1.0;
                for k in 0..order {
                    re_contrib[row] += b[k * q + id] * tk;
                    tk *= t;
                }
            }
            components.push(ComponentDraw {
                b,
                w: DenseMatrix::zeros(0, 0),
            });
            re.ids.push(ids);
            re.times = Some(times);
        }
        Scenario::Spatial { q, sig2b0, sig2b1 } => {
            let mut loc_rng = stream_rng(spec.seed, STREAM_LOCATIONS);
            let locations: Vec<[f64; 2]> = (0..*q)
                .map(|_| {
                    [
                        loc_rng.gen_range(-10.0..10.0),
                        loc_rng.gen_range(-10.0..10.0),
                    ]
                })
                .collect();
            let mut size_rng = stream_rng(spec.seed, STREAM_SIZES_BASE);
            let ids = sample_cluster_sizes(n, *q, &mut size_rng)?;
            let mut b_rng = stream_rng(spec.seed, STREAM_B_BASE);
            let b = draw_spatial_b(&locations, *sig2b0, *sig2b1, &mut b_rng)?;
            for (row, &id) in ids.iter().enumerate() {
                re_contrib[row] += b[id];
            }
            components.push(ComponentDraw {
                b,
                w: DenseMatrix::zeros(0, 0),
            });
            re.ids.push(ids);
            locations_out = Some(locations);
        }
        Scenario::Combined {
            q1,
            q2,
            q_loc,
            sig2b,
            sig2c,
            sig2d0,
            sig2d1,
        } => {
            for (k, (q, sig2)) in [(*q1, *sig2b), (*q2, *sig2c)].into_iter().enumerate() {
                let mut size_rng = stream_rng(spec.seed, STREAM_SIZES_BASE + k as u64);
                let ids = sample_cluster_sizes(n, q, &mut size_rng)?;
                components.push(add_categorical(&ids, q, sig2, k as u64, &mut re_contrib)?);
                re.ids.push(ids);
            }
            let mut loc_rng = stream_rng(spec.seed, STREAM_LOCATIONS);
            let locations: Vec<[f64; 2]> = (0..*q_loc)
                .map(|_| {
                    [
                        loc_rng.gen_range(-10.0..10.0),
                        loc_rng.gen_range(-10.0..10.0),
                    ]
                })
                .collect();
            let mut size_rng = stream_rng(spec.seed, STREAM_SIZES_BASE + 2);
            let ids = sample_cluster_sizes(n, *q_loc, &mut size_rng)?;
            let mut b_rng = stream_rng(spec.seed, STREAM_B_BASE + 2);
            let b = draw_spatial_b(&locations, *sig2d0, *sig2d1, &mut b_rng)?;
            for (row, &id) in ids.iter().enumerate() {
                re_contrib[row] += b[id];
            }
            components.push(ComponentDraw {
                b,
                w: DenseMatrix::zeros(0, 0),
            });
            re.ids.push(ids);
            locations_out = Some(locations);
        }
    }

    // Response.
    let mut eps = Vec::new();
    let y: Vec<f64> = match &spec.scenario {
        Scenario::GlmmBinary { .. } => {
            let mut u_rng = stream_rng(spec.seed, STREAM_BERNOULLI);
            (0..n)
                .map(|i| {
                    let eta: f64 = f[i] + re_contrib[i];
                    let p = 1.0 / (1.0 + (-eta).exp());
                    if u_rng.gen::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        _ => {
            let mut e_rng = stream_rng(spec.seed, STREAM_EPS);
            eps = (0..n)
                .map(|_| normal.sample(&mut e_rng) * spec.sig2e.sqrt())
                .collect();
            (0..n).map(|i| f[i] + re_contrib[i] + eps[i]).collect()
        }
    };

    // Split.
    let n_test = ((n as f64) * 0.2).round().max(1.0) as usize;
    let (train_rows, test_rows) = match spec.split {
        SplitMode::Random => {
            let mut rows: Vec<usize> = (0..n).collect();
            let mut s_rng = stream_rng(spec.seed, STREAM_SPLIT);
            rows.shuffle(&mut s_rng);
            let test = rows[..n_test].to_vec();
            let train = rows[n_test..].to_vec();
            (train, test)
        }
        SplitMode::Future => {
            let times = re.times.as_ref().expect("longitudinal has times");
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| times[a].partial_cmp(&times[b]).unwrap().then(a.cmp(&b)));
            let split_at = n - n_test;
            (order[..split_at].to_vec(), order[split_at..].to_vec())
        }
    };

    let cov_spec = CovarianceSpec {
        kind: match &spec.scenario {
            Scenario::SingleCategorical { q, .. } | Scenario::GlmmBinary { q, .. } => {
                CovKind::RandomIntercepts { q: *q }
            }
            Scenario::MultipleCategorical { qs, .. } => CovKind::MultipleCategorical {
                qs: qs.clone(),
                nested: false,
            },
            Scenario::Longitudinal {
                q,
                sig2bs,
                correlated_pairs,
                ..
            } => CovKind::Longitudinal {
                q: *q,
                order: sig2bs.len(),
                correlated_pairs: correlated_pairs.clone(),
            },
            Scenario::Spatial { .. } => CovKind::SpatialRbf {
                locations: locations_out.clone().unwrap(),
            },
            Scenario::Combined { q1, q2, .. } => CovKind::Combined(vec![
                CovKind::RandomIntercepts { q: *q1 },
                CovKind::RandomIntercepts { q: *q2 },
                CovKind::SpatialRbf {
                    locations: locations_out.clone().unwrap(),
                },
            ]),
        },
        g_mode: GMode::Identity,
    };

    let truth = GroundTruth {
        theta: spec.true_theta(),
        b: components.iter().map(|c| c.b.clone()).collect(),
        w: components.into_iter().map(|c| c.w).collect(),
        re_contrib,
        eps,
    };
    Ok((
        MixedDataset {
            x,
            re,
            y,
            train_rows,
            test_rows,
        },
        cov_spec,
        truth,
    ))
}

/// Subjects get n_j ~ U{1..max_nj} measurements at the first n_j points of an
/// equally spaced grid on [0, 1]; totals are nudged to hit n exactly.
fn longitudinal_design(
    n: usize,
    q: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let max_nj = ((2.0 * n as f64 / q as f64 - 1.0).round() as usize).max(1);
    let mut nj: Vec<usize> = (0..q).map(|_| rng.gen_range(1..=max_nj)).collect();
    let mut total: usize = nj.iter().sum();
    while total != n {
        let j = rng.gen_range(0..q);
        if total < n && nj[j] < max_nj {
            nj[j] += 1;
            total += 1;
        } else if total > n && nj[j] > 1 {
            nj[j] -= 1;
            total -= 1;
        }
    }
    let step = if max_nj > 1 {
        1.0 / (max_nj - 1) as f64
    } else {
        0.0
    };
    let mut ids = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    for (j, &count) in nj.iter().enumerate() {
        for k in 0..count {
            ids.push(j);
            times.push(k as f64 * step);
        }
    }
    Ok((ids, times))
}

/// Reconstruct y from the recorded pieces; the generators must satisfy
/// max |y - rebuilt| <= 1e-12 for Gaussian scenarios.
pub fn reconstruction_error(spec: &SimSpec, ds: &MixedDataset, truth: &GroundTruth) -> f64 {
    let f = f_true(&ds.x);
    (0..ds.y.len())
        .map(|i| {
            let rebuilt = f[i]
                + truth.re_contrib[i]
                + if truth.eps.is_empty() {
                    return 0.0;
                } else {
                    truth.eps[i]
                };
            let _ = spec;
            (ds.y[i] - rebuilt).abs()
        })
        .fold(0.0, f64::max)
}

/// Scenario-specific design column headers for the interchange CSV.
fn design_headers(scenario: &Scenario) -> Vec<String> {
    match scenario {
        Scenario::SingleCategorical { .. } | Scenario::GlmmBinary { .. } => vec!["z_id".into()],
        Scenario::MultipleCategorical { qs, .. } => {
            (0..qs.len()).map(|k| format!("z_id_{k}")).collect()
        }
        Scenario::Longitudinal { .. } => vec!["z_id".into(), "t".into()],
        Scenario::Spatial { .. } => vec!["lat".into(), "lon".into()],
        Scenario::Combined { .. } => {
            vec!["z_id_0".into(), "z_id_1".into(), "lat".into(), "lon".into()]
        }
    }
}

/// Sidecar manifest holding whatever the CSV cannot carry: the generating
/// spec, the true theta, the split, and spatial site coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub sim_spec: SimSpec,
    pub theta_true: Vec<f64>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub locations: Option<Vec<[f64; 2]>>,
}

/// Write the dataset CSV (X_0.., design columns, y) and its JSON sidecar.
pub fn export(
    spec: &SimSpec,
    ds: &MixedDataset,
    cov: &CovarianceSpec,
    csv_path: &Path,
    sidecar_path: &Path,
) -> Result<()> {
    let locations = spatial_locations(cov);
    let mut file = std::fs::File::create(csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let io_err = |e: std::io::Error| Error::io(csv_path.display().to_string(), e);
    let mut header: Vec<String> = (0..ds.x.cols()).map(|j| format!("X_{j}")).collect();
    header.extend(design_headers(&spec.scenario));
    header.push("y".into());
    writeln!(file, "{}", header.join(",")).map_err(io_err)?;
    for i in 0..ds.y.len() {
        let mut fields: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        match &spec.scenario {
            Scenario::SingleCategorical { .. } | Scenario::GlmmBinary { .. } => {
                fields.push(ds.re.ids[0][i].to_string());
            }
            Scenario::MultipleCategorical { qs, .. } => {
                for k in 0..qs.len() {
                    fields.push(ds.re.ids[k][i].to_string());
                }
            }
            Scenario::Longitudinal { .. } => {
                fields.push(ds.re.ids[0][i].to_string());
                fields.push(ds.re.times.as_ref().unwrap()[i].to_string());
            }
            Scenario::Spatial { .. } => {
                let loc = locations.as_ref().expect("spatial locations")[ds.re.ids[0][i]];
                fields.push(loc[0].to_string());
                fields.push(loc[1].to_string());
            }
            Scenario::Combined { .. } => {
                fields.push(ds.re.ids[0][i].to_string());
                fields.push(ds.re.ids[1][i].to_string());
                let loc = locations.as_ref().expect("spatial locations")[ds.re.ids[2][i]];
                fields.push(loc[0].to_string());
                fields.push(loc[1].to_string());
            }
        }
        fields.push(ds.y[i].to_string());
        writeln!(file, "{}", fields.join(",")).map_err(io_err)?;
    }

    let manifest = DatasetManifest {
        sim_spec: spec.clone(),
        theta_true: spec.true_theta(),
        train_rows: ds.train_rows.clone(),
        test_rows: ds.test_rows.clone(),
        locations,
    };
    let side = std::fs::File::create(sidecar_path)
        .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(side), &manifest).map_err(|e| {
        Error::Parse {
            path: sidecar_path.display().to_string(),
            msg: e.to_string(),
        }
    })?;
    Ok(())
}

fn spatial_locations(cov: &CovarianceSpec) -> Option<Vec<[f64; 2]>> {
    match &cov.kind {
        CovKind::SpatialRbf { locations } => Some(locations.clone()),
        CovKind::Combined(parts) => parts.iter().find_map(|p| match p {
            CovKind::SpatialRbf { locations } => Some(locations.clone()),
            _ => None,
        }),
        _ => None,
    }
}

/// Read a dataset CSV plus its sidecar back into memory.
pub fn import(csv_path: &Path, sidecar_path: &Path) -> Result<(SimSpec, MixedDataset, CovarianceSpec)> {
    let side = std::fs::File::open(sidecar_path)
        .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_reader(std::io::BufReader::new(side))
        .map_err(|e| Error::Parse {
            path: sidecar_path.display().to_string(),
            msg: e.to_string(),
        })?;
    let spec = manifest.sim_spec.clone();

    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| Error::Parse {
        path: csv_path.display().to_string(),
        msg: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            path: csv_path.display().to_string(),
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                path: csv_path.display().to_string(),
                msg: format!("missing column {name}"),
            })
    };

    let p = spec.p;
    let x_cols: Vec<usize> = (0..p)
        .map(|j| col(&format!("X_{j}")))
        .collect::<Result<_>>()?;
    let y_col = col("y")?;
    let design = design_headers(&spec.scenario);
    let design_cols: Vec<usize> = design
        .iter()
        .map(|h| col(h))
        .collect::<Result<_>>()?;

    // Location coordinates map back to indices via the sidecar list.
    let loc_index: Option<std::collections::HashMap<(u64, u64), usize>> =
        manifest.locations.as_ref().map(|locs| {
            locs.iter()
                .enumerate()
                .map(|(i, l)| ((l[0].to_bits(), l[1].to_bits()), i))
                .collect()
        });

    let mut x_data: Vec<f64> = Vec::new();
    let mut y = Vec::new();
    let n_id_features = match &spec.scenario {
        Scenario::MultipleCategorical { qs, .. } => qs.len(),
        Scenario::Combined { .. } => 3,
        _ => 1,
    };
    let mut ids: Vec<Vec<usize>> = vec![Vec::new(); n_id_features];
    let mut times: Vec<f64> = Vec::new();

    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            path: csv_path.display().to_string(),
            msg: e.to_string(),
        })?;
        let parse = |idx: usize| -> Result<f64> {
            record[idx].parse::<f64>().map_err(|e| Error::Parse {
                path: csv_path.display().to_string(),
                msg: format!("bad number '{}': {e}", &record[idx]),
            })
        };
        for &c in &x_cols {
            x_data.push(parse(c)?);
        }
        y.push(parse(y_col)?);
        match &spec.scenario {
            Scenario::SingleCategorical { .. } | Scenario::GlmmBinary { .. } => {
                ids[0].push(parse(design_cols[0])? as usize);
            }
            Scenario::MultipleCategorical { qs, .. } => {
                for k in 0..qs.len() {
                    ids[k].push(parse(design_cols[k])? as usize);
                }
            }
            Scenario::Longitudinal { .. } => {
                ids[0].push(parse(design_cols[0])? as usize);
                times.push(parse(design_cols[1])?);
            }
            Scenario::Spatial { .. } => {
                let lat = parse(design_cols[0])?;
                let lon = parse(design_cols[1])?;
                let map = loc_index.as_ref().ok_or_else(|| Error::Parse {
                    path: sidecar_path.display().to_string(),
                    msg: "sidecar lacks spatial locations".into(),
                })?;
                let idx = map
                    .get(&(lat.to_bits(), lon.to_bits()))
                    .ok_or_else(|| Error::Parse {
                        path: csv_path.display().to_string(),
                        msg: format!("unknown location ({lat}, {lon})"),
                    })?;
                ids[0].push(*idx);
            }
            Scenario::Combined { .. } => {
                ids[0].push(parse(design_cols[0])? as usize);
                ids[1].push(parse(design_cols[1])? as usize);
                let lat = parse(design_cols[2])?;
                let lon = parse(design_cols[3])?;
                let map = loc_index.as_ref().ok_or_else(|| Error::Parse {
                    path: sidecar_path.display().to_string(),
                    msg: "sidecar lacks spatial locations".into(),
                })?;
                let idx = map
                    .get(&(lat.to_bits(), lon.to_bits()))
                    .ok_or_else(|| Error::Parse {
                        path: csv_path.display().to_string(),
                        msg: format!("unknown location ({lat}, {lon})"),
                    })?;
                ids[2].push(*idx);
            }
        }
    }

    let n = y.len();
    let x = DenseMatrix::from_vec(n, p, x_data);
    let re = ReDesignData {
        ids,
        times: if times.is_empty() { None } else { Some(times) },
    };
    let cov = CovarianceSpec {
        kind: match &spec.scenario {
            Scenario::SingleCategorical { q, .. } | Scenario::GlmmBinary { q, .. } => {
                CovKind::RandomIntercepts { q: *q }
            }
            Scenario::MultipleCategorical { qs, .. } => CovKind::MultipleCategorical {
                qs: qs.clone(),
                nested: false,
            },
            Scenario::Longitudinal {
                q,
                sig2bs,
                correlated_pairs,
                ..
            } => CovKind::Longitudinal {
                q: *q,
                order: sig2bs.len(),
                correlated_pairs: correlated_pairs.clone(),
            },
            Scenario::Spatial { .. } => CovKind::SpatialRbf {
                locations: manifest.locations.clone().ok_or_else(|| Error::Parse {
                    path: sidecar_path.display().to_string(),
                    msg: "sidecar lacks spatial locations".into(),
                })?,
            },
            Scenario::Combined { q1, q2, .. } => CovKind::Combined(vec![
                CovKind::RandomIntercepts { q: *q1 },
                CovKind::RandomIntercepts { q: *q2 },
                CovKind::SpatialRbf {
                    locations: manifest.locations.clone().ok_or_else(|| Error::Parse {
                        path: sidecar_path.display().to_string(),
                        msg: "sidecar lacks spatial locations".into(),
                    })?,
                },
            ]),
        },
        g_mode: GMode::Identity,
    };
    Ok((
        spec,
        MixedDataset {
            x,
            re,
            y,
            train_rows: manifest.train_rows,
            test_rows: manifest.test_rows,
        },
        cov,
    ))
}

/// Make the variance-component vector for this dataset's covariance spec.
pub fn theta_from_true(spec: &SimSpec, cov: &CovarianceSpec) -> VarianceComponents {
    let t = spec.true_theta();
    let n_psi = cov.n_psi();
    VarianceComponents::new(
        t[0],
        t[1..1 + n_psi].to_vec(),
        t[1 + n_psi..].to_vec(),
    )
}

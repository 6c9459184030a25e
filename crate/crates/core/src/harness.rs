//! Experiment runner: generates or loads datasets, trains the NLL-based
//! mixed-effects methods next to plain-loss baselines (ignore / one-hot /
//! entity embeddings) on identical splits, aggregates replications, and
//! writes report tables.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovKind, CovarianceSpec, GMode, ReDesignData};
use crate::error::{Error, Result};
use crate::glmm;
use crate::linalg::DenseMatrix;
use crate::nll::{self, DataView, NetConfig, TrainConfig};
use crate::nn::{EmbeddingTable, Mlp, Optimizer, Param};
use crate::predict::{self, BlupConfig, FittedModel};
use crate::simgen::{self, MixedDataset, Scenario, SimSpec};

pub const ENV_OUTPUT_DIR: &str = "LMMNN_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Lmmnn,
    Ignore,
    Ohe,
    Embeddings,
    LmmnnE,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Lmmnn => "lmmnn",
            Method::Ignore => "ignore",
            Method::Ohe => "ohe",
            Method::Embeddings => "embeddings",
            Method::LmmnnE => "lmmnn-e",
        }
    }

    /// Stable id used for seed derivation, independent of list position.
    fn stable_id(&self) -> u64 {
        match self {
            Method::Lmmnn => 1,
            Method::Ignore => 2,
            Method::Ohe => 3,
            Method::Embeddings => 4,
            Method::LmmnnE => 5,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lmmnn" => Ok(Method::Lmmnn),
            "ignore" => Ok(Method::Ignore),
            "ohe" => Ok(Method::Ohe),
            "embeddings" => Ok(Method::Embeddings),
            "lmmnn-e" => Ok(Method::LmmnnE),
            other => Err(Error::InvalidSpec(format!("unknown method '{other}'"))),
        }
    }
}

fn default_replications() -> usize {
    5
}

fn default_ohe_cap() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Generate fresh data per replication.
    #[serde(default)]
    pub sim: Option<SimSpec>,
    /// Or load a fixed dataset (CSV path; sidecar is <path>.json) and
    /// re-split it per replication.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub methods: Vec<Method>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    #[serde(default = "default_ohe_cap")]
    pub ohe_cap: usize,
    #[serde(default)]
    pub save_models: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidSpec("method list must be non-empty".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidSpec("replications must be >= 1".into()));
        }
        match (&self.sim, &self.dataset) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(Error::InvalidSpec(
                "exactly one of `sim` and `dataset` must be set".into(),
            )),
        }
    }

    /// Output directory, honoring the environment override.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var(ENV_OUTPUT_DIR) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub replication: usize,
    pub metric: Option<f64>,
    pub theta: Option<Vec<f64>>,
    pub epochs: Option<usize>,
    pub wall_secs: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// "mse" for regression scenarios, "auc" for the binary scenario.
    pub metric_name: String,
    pub theta_names: Vec<String>,
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.error.is_none())
    }

    pub fn metrics_for(&self, method: Method) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.method == method)
            .filter_map(|c| c.metric)
            .collect()
    }

    /// (method, mean, standard error, successful replications) per method,
    /// in first-appearance order.
    pub fn summary(&self) -> Vec<(Method, f64, f64, usize)> {
        let mut seen = Vec::new();
        for c in &self.cells {
            if !seen.contains(&c.method) {
                seen.push(c.method);
            }
        }
        seen.into_iter()
            .map(|m| {
                let vals = self.metrics_for(m);
                let (mean, se) = predict::aggregate(&vals).unwrap_or((f64::NAN, f64::NAN));
                (m, mean, se, vals.len())
            })
            .collect()
    }
}

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One replication's materialized data and fitting spec.
struct RepData {
    ds: MixedDataset,
    cov: CovarianceSpec,
    scenario: Scenario,
}

fn prepare_replication(
    config: &ExperimentConfig,
    fixed: Option<&(SimSpec, MixedDataset, CovarianceSpec)>,
    rep: usize,
) -> Result<RepData> {
    let master = config.train.seed;
    let rep_seed = mix_seed(master, 1000 + rep as u64);
    if let Some(sim) = &config.sim {
        let mut spec = sim.clone();
        spec.seed = mix_seed(rep_seed, 0);
        let (ds, cov, _) = simgen::gen(&spec)?;
        Ok(RepData {
            ds,
            cov,
            scenario: spec.scenario,
        })
    } else {
        let (spec, ds, cov) = fixed.expect("fixed dataset loaded").clone();
        // Fresh 80/20 split of all rows for this replication.
        let n = ds.y.len();
        let mut rows: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(rep_seed, 0));
        rows.shuffle(&mut rng);
        let n_test = ((n as f64) * 0.2).round().max(1.0) as usize;
        let mut ds = ds;
        ds.test_rows = rows[..n_test].to_vec();
        ds.train_rows = rows[n_test..].to_vec();
        Ok(RepData {
            ds,
            cov,
            scenario: spec.scenario,
        })
    }
}

/// Entity-embedding output width: min(100, ceil(q / 10)).
pub fn embedding_dim(q: usize) -> usize {
    q.div_ceil(10).min(100).max(1)
}

pub fn run(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let out_dir = config.resolved_output_dir();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let fixed = match &config.dataset {
        Some(path) => {
            let sidecar = sidecar_path(path);
            Some(simgen::import(path, &sidecar)?)
        }
        None => None,
    };

    // Theta naming follows the identity-g covariance spec of the scenario.
    let probe = prepare_replication(config, fixed.as_ref(), 0)?;
    let is_binary = matches!(probe.scenario, Scenario::GlmmBinary { .. });
    let metric_name = if is_binary { "auc" } else { "mse" };
    let theta_names = if is_binary {
        vec!["sig2b".to_string()]
    } else {
        probe.cov.param_names()
    };

    let mut cells = Vec::new();
    for rep in 0..config.replications {
        let data = prepare_replication(config, fixed.as_ref(), rep)?;
        let rep_seed = mix_seed(config.train.seed, 1000 + rep as u64);
        for &method in &config.methods {
            let method_seed = mix_seed(rep_seed, method.stable_id());
            let started = Instant::now();
            let outcome = run_cell(config, &data, method, method_seed, rep, &out_dir);
            let wall_secs = started.elapsed().as_secs_f64();
            let cell = match outcome {
                Ok(mut cell) => {
                    cell.wall_secs = wall_secs;
                    cell
                }
                Err(err) => CellResult {
                    method,
                    replication: rep,
                    metric: None,
                    theta: None,
                    epochs: None,
                    wall_secs,
                    error: Some(err.to_string()),
                },
            };
            cells.push(cell);
        }
    }

    let report = ExperimentReport {
        metric_name: metric_name.to_string(),
        theta_names,
        cells,
    };
    report_write(&report, &out_dir)?;
    Ok(report)
}

fn sidecar_path(csv: &Path) -> PathBuf {
    let mut p = csv.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn run_cell(
    config: &ExperimentConfig,
    data: &RepData,
    method: Method,
    seed: u64,
    rep: usize,
    out_dir: &Path,
) -> Result<CellResult> {
    let ds = &data.ds;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = seed;
    let view = DataView {
        x: &ds.x,
        y: &ds.y,
        re: &ds.re,
        rows: &ds.train_rows,
    };
    let is_binary = matches!(data.scenario, Scenario::GlmmBinary { .. });

    let (metric, theta, epochs, history): (f64, Option<Vec<f64>>, usize, Option<nll::History>) =
        if is_binary {
            let q = match data.scenario {
                Scenario::GlmmBinary { q, .. } => q,
                _ => unreachable!(),
            };
            match method {
                Method::Lmmnn => {
                    let model = glmm::train_glmm(view, q, &config.net, &train_cfg, 5)?;
                    let bhat = model.predict_b(view)?;
                    let probs =
                        model.predict_prob_rows(&ds.x, &ds.re.ids[0], &ds.test_rows, &bhat)?;
                    let labels: Vec<f64> = ds.test_rows.iter().map(|&r| ds.y[r]).collect();
                    let auc = glmm::auc(&probs, &labels)?;
                    (
                        auc,
                        Some(vec![model.sig2b]),
                        model.epochs_run,
                        Some(model.history.clone()),
                    )
                }
                Method::LmmnnE => {
                    return Err(Error::InvalidSpec(
                        "lmmnn-e is not available for the binary scenario".into(),
                    ))
                }
                _ => {
                    let (model, epochs) = fit_baseline(
                        method,
                        LossKind::Logistic,
                        view,
                        data,
                        &config.net,
                        &train_cfg,
                        config.ohe_cap,
                    )?;
                    let scores = model.predict(&ds.x, &ds.re, &ds.test_rows)?;
                    let labels: Vec<f64> = ds.test_rows.iter().map(|&r| ds.y[r]).collect();
                    (glmm::auc(&scores, &labels)?, None, epochs, None)
                }
            }
        } else {
            match method {
                Method::Lmmnn | Method::LmmnnE => {
                    let spec = match method {
                        Method::Lmmnn => data.cov.clone(),
                        Method::LmmnnE => embedding_view_spec(&data.cov)?,
                        _ => unreachable!(),
                    };
                    let trained = nll::train(view, &spec, &config.net, &train_cfg)?;
                    let fitted = FittedModel::from_trained(&trained, &spec, view)?;
                    let blup_cfg = BlupConfig {
                        seed,
                        ..BlupConfig::default()
                    };
                    let bhat = fitted.blup(&blup_cfg)?;
                    let pred = fitted.predict(&ds.x, &ds.re, &ds.test_rows, &bhat)?;
                    let truth: Vec<f64> = ds.test_rows.iter().map(|&r| ds.y[r]).collect();
                    let mse = predict::mse(&truth, &pred)?;
                    if config.save_models && method == Method::Lmmnn {
                        fitted.save_json(&out_dir.join(format!("model_rep{rep}.json")))?;
                    }
                    (
                        mse,
                        Some(trained.theta.to_vec()),
                        trained.epochs_run,
                        Some(trained.history.clone()),
                    )
                }
                _ => {
                    let (model, epochs) = fit_baseline(
                        method,
                        LossKind::Squared,
                        view,
                        data,
                        &config.net,
                        &train_cfg,
                        config.ohe_cap,
                    )?;
                    let pred = model.predict(&ds.x, &ds.re, &ds.test_rows)?;
                    let truth: Vec<f64> = ds.test_rows.iter().map(|&r| ds.y[r]).collect();
                    (predict::mse(&truth, &pred)?, None, epochs, None)
                }
            }
        };

    if let Some(history) = &history {
        let path = out_dir.join(format!("history_{}_rep{rep}.csv", method.name()));
        let mut file =
            std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        history
            .write_csv(&mut file)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }

    Ok(CellResult {
        method,
        replication: rep,
        metric: Some(metric),
        theta,
        epochs: Some(epochs),
        wall_secs: 0.0,
        error: None,
    })
}

/// The lmmnn-e view of a scenario: levels of the (single) categorical or
/// spatial feature pass through a learned embedding with one shared variance,
/// dropping any kernel assumption.
fn embedding_view_spec(cov: &CovarianceSpec) -> Result<CovarianceSpec> {
    let q = match &cov.kind {
        CovKind::RandomIntercepts { q } => *q,
        CovKind::SpatialRbf { locations } => locations.len(),
        _ => {
            return Err(Error::InvalidSpec(
                "lmmnn-e supports single categorical or spatial structures".into(),
            ))
        }
    };
    Ok(CovarianceSpec {
        kind: CovKind::RandomIntercepts { q },
        g_mode: GMode::LearnedEmbedding {
            dim: embedding_dim(q),
        },
    })
}

#[derive(Clone, Copy, PartialEq)]
enum LossKind {
    Squared,
    Logistic,
}

/// Input assembly for the baseline nets.
enum FeatureMap {
    /// X alone.
    Plain,
    /// X plus one-hot columns per RE feature.
    OneHot { qs: Vec<usize> },
    /// X plus learned embedding rows per RE feature.
    Embedded,
}

struct BaselineModel {
    net: Mlp,
    tables: Vec<EmbeddingTable>,
    feature: FeatureMap,
}

/// RE feature cardinalities in id-column order.
fn feature_cardinalities(cov: &CovarianceSpec) -> Vec<usize> {
    fn kind_qs(kind: &CovKind) -> Vec<usize> {
        match kind {
            CovKind::RandomIntercepts { q } => vec![*q],
            CovKind::MultipleCategorical { qs, .. } => qs.clone(),
            CovKind::Longitudinal { q, .. } => vec![*q],
            CovKind::SpatialRbf { locations } => vec![locations.len()],
            CovKind::Combined(parts) => parts.iter().flat_map(kind_qs).collect(),
        }
    }
    kind_qs(&cov.kind)
}

impl BaselineModel {
    fn input_width(&self, p: usize) -> usize {
        match &self.feature {
            FeatureMap::Plain => p,
            FeatureMap::OneHot { qs } => p + qs.iter().sum::<usize>(),
            FeatureMap::Embedded => p + self.tables.iter().map(|t| t.dim()).sum::<usize>(),
        }
    }

    fn assemble(&self, x: &DenseMatrix, re: &ReDesignData, rows: &[usize]) -> DenseMatrix {
        let p = x.cols();
        let width = self.input_width(p);
        let mut input = DenseMatrix::zeros(rows.len(), width);
        for (local, &r) in rows.iter().enumerate() {
            input.row_mut(local)[..p].copy_from_slice(x.row(r));
            match &self.feature {
                FeatureMap::Plain => {}
                FeatureMap::OneHot { qs } => {
                    let mut off = p;
                    for (k, &q) in qs.iter().enumerate() {
                        let id = re.ids[k][r];
                        if id < q {
                            *input.at_mut(local, off + id) = 1.0;
                        }
                        off += q;
                    }
                }
                FeatureMap::Embedded => {
                    let mut off = p;
                    for (k, table) in self.tables.iter().enumerate() {
                        let id = re.ids[k][r];
                        if id < table.vocab() {
                            input.row_mut(local)[off..off + table.dim()]
                                .copy_from_slice(table.weights.row(id));
                        }
                        off += table.dim();
                    }
                }
            }
        }
        input
    }

    fn predict(&self, x: &DenseMatrix, re: &ReDesignData, rows: &[usize]) -> Result<Vec<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(4096) {
            let input = self.assemble(x, re, chunk);
            let (f, _) = self.net.forward_vec(&input, false, &mut rng)?;
            out.extend(f);
        }
        Ok(out)
    }
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

fn batch_loss(kind: LossKind, f: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    let m = f.len() as f64;
    match kind {
        LossKind::Squared => {
            let loss = f
                .iter()
                .zip(y)
                .map(|(fi, yi)| (fi - yi) * (fi - yi))
                .sum::<f64>()
                / m;
            let grad = f.iter().zip(y).map(|(fi, yi)| 2.0 * (fi - yi) / m).collect();
            (loss, grad)
        }
        LossKind::Logistic => {
            let loss = f
                .iter()
                .zip(y)
                .map(|(fi, yi)| fi.max(0.0) + (-fi.abs()).exp().ln_1p() - yi * fi)
                .sum::<f64>()
                / m;
            let grad = f
                .iter()
                .zip(y)
                .map(|(fi, yi)| (sigmoid(*fi) - yi) / m)
                .collect();
            (loss, grad)
        }
    }
}

/// Train a baseline net under a per-row loss with the shared early-stopping
/// rule. Returns the best-validation model and the epochs run.
fn fit_baseline(
    method: Method,
    loss_kind: LossKind,
    data: DataView<'_>,
    rep: &RepData,
    net_cfg: &NetConfig,
    cfg: &TrainConfig,
    ohe_cap: usize,
) -> Result<(BaselineModel, usize)> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let qs = feature_cardinalities(&rep.cov);
    let (feature, tables) = match method {
        Method::Ignore => (FeatureMap::Plain, Vec::new()),
        Method::Ohe => {
            let total: usize = qs.iter().sum();
            if total > ohe_cap {
                return Err(Error::OheTooWide { q: total, cap: ohe_cap });
            }
            (FeatureMap::OneHot { qs: qs.clone() }, Vec::new())
        }
        Method::Embeddings => {
            let tables: Vec<EmbeddingTable> = qs
                .iter()
                .map(|&q| EmbeddingTable::new(q, embedding_dim(q), &mut rng))
                .collect();
            (FeatureMap::Embedded, tables)
        }
        _ => {
            return Err(Error::InvalidSpec(
                "fit_baseline handles ignore/ohe/embeddings".into(),
            ))
        }
    };
    let width = match &feature {
        FeatureMap::Plain => data.x.cols(),
        FeatureMap::OneHot { qs } => data.x.cols() + qs.iter().sum::<usize>(),
        FeatureMap::Embedded => data.x.cols() + tables.iter().map(|t| t.dim()).sum::<usize>(),
    };
    let mut model = BaselineModel {
        net: Mlp::regression(width, &net_cfg.hidden, net_cfg.dropout, &mut rng)?,
        tables,
        feature,
    };

    let mut shuffled: Vec<usize> = data.rows.to_vec();
    shuffled.shuffle(&mut rng);
    let n_val = ((shuffled.len() as f64 * cfg.val_fraction).round() as usize)
        .clamp(1, shuffled.len().saturating_sub(2));
    let (train_rows, val_rows) = {
        let (t, v) = shuffled.split_at(shuffled.len() - n_val);
        (t.to_vec(), v.to_vec())
    };

    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut best_val = f64::INFINITY;
    let mut best: Option<(Mlp, Vec<EmbeddingTable>)> = None;
    let mut since_improve = 0;
    let mut epochs_run = 0;
    let mut order = train_rows.clone();
    let p = data.x.cols();

    for _epoch in 0..cfg.max_epochs {
        epochs_run += 1;
        order.shuffle(&mut rng);
        let mut start = 0;
        while start < order.len() {
            let mut end = (start + cfg.batch_size).min(order.len());
            if order.len() - end == 1 {
                end = order.len();
            }
            let batch = &order[start..end];
            start = end;

            let input = model.assemble(data.x, data.re, batch);
            let (f, cache) = model.net.forward_vec(&input, true, &mut rng)?;
            let yb: Vec<f64> = batch.iter().map(|&r| data.y[r]).collect();
            let (_, grad) = batch_loss(loss_kind, &f, &yb);
            let grad_out = DenseMatrix::from_vec(batch.len(), 1, grad);
            let (grads, grad_in) = model.net.backward(&cache, &grad_out)?;

            let table_grads: Vec<DenseMatrix> = if matches!(model.feature, FeatureMap::Embedded) {
                let mut off = p;
                model
                    .tables
                    .iter()
                    .enumerate()
                    .map(|(k, table)| {
                        let d = table.dim();
                        let ids: Vec<usize> =
                            batch.iter().map(|&r| data.re.ids[k][r]).collect();
                        let cols =
                            DenseMatrix::from_fn(batch.len(), d, |i, j| grad_in.at(i, off + j));
                        off += d;
                        table.backward(&ids, &cols)
                    })
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };

            let mut params = model.net.params_with_grads(&grads, "f");
            for (k, (table, grad)) in model.tables.iter_mut().zip(&table_grads).enumerate() {
                params.push(Param {
                    name: format!("emb.table{k}"),
                    value: table.weights.data_mut(),
                    grad: grad.data(),
                });
            }
            opt.step(&mut params)?;
        }

        // Validation loss under the same objective, evaluation mode.
        let fv = model.predict(data.x, data.re, &val_rows)?;
        let yv: Vec<f64> = val_rows.iter().map(|&r| data.y[r]).collect();
        let (val_loss, _) = batch_loss(loss_kind, &fv, &yv);
        if val_loss < best_val {
            best_val = val_loss;
            best = Some((model.net.clone(), model.tables.clone()));
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= cfg.patience {
                break;
            }
        }
    }

    if let Some((net, tables)) = best {
        model.net = net;
        model.tables = tables;
    }
    Ok((model, epochs_run))
}

/// Write results.csv, times.csv, summary.csv and theta.csv. Wall times go to
/// their own file so results.csv is bit-identical across reruns of the same
/// seed.
pub fn report_write(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let open = |name: &str| -> Result<std::fs::File> {
        let path = dir.join(name);
        std::fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))
    };
    let io_err = |e: std::io::Error| Error::io(dir.display().to_string(), e);

    let mut f = open("results.csv")?;
    writeln!(f, "method,replication,{},epochs,error", report.metric_name).map_err(io_err)?;
    for c in &report.cells {
        writeln!(
            f,
            "{},{},{},{},{}",
            c.method.name(),
            c.replication,
            c.metric.map(|m| m.to_string()).unwrap_or_default(),
            c.epochs.map(|e| e.to_string()).unwrap_or_default(),
            c.error.as_deref().unwrap_or("").replace(',', ";"),
        )
        .map_err(io_err)?;
    }

    let mut f = open("times.csv")?;
    writeln!(f, "method,replication,wall_secs").map_err(io_err)?;
    for c in &report.cells {
        writeln!(f, "{},{},{}", c.method.name(), c.replication, c.wall_secs).map_err(io_err)?;
    }

    let mut f = open("summary.csv")?;
    writeln!(
        f,
        "method,mean_{m},se_{m},replications_ok",
        m = report.metric_name
    )
    .map_err(io_err)?;
    for (method, mean, se, n_ok) in report.summary() {
        writeln!(f, "{},{mean},{se},{n_ok}", method.name()).map_err(io_err)?;
    }

    let mut f = open("theta.csv")?;
    writeln!(f, "method,replication,{}", report.theta_names.join(",")).map_err(io_err)?;
    for c in &report.cells {
        if let Some(theta) = &c.theta {
            let vals: Vec<String> = theta.iter().map(|v| v.to_string()).collect();
            writeln!(
                f,
                "{},{},{}",
                c.method.name(),
                c.replication,
                vals.join(",")
            )
            .map_err(io_err)?;
        }
    }
    Ok(())
}

//! Command-line front end: simulate datasets, run experiments from a JSON
//! config, dump eigenvalue spectra, and apply saved models.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use lmmnn_core::harness::{self, ExperimentConfig};
use lmmnn_core::predict::{write_blup_csv, write_predictions_csv, BlupConfig, FittedModel};
use lmmnn_core::simgen::{self, Scenario, SimGMode, SimSpec, SplitMode};
use lmmnn_core::eigendecay;

#[derive(Parser)]
#[command(
    name = "lmmnn",
    about = "Mixed-effects deep learning: NLL training with structured covariance, BLUP prediction, GLMM classification, and a simulation harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset CSV plus its JSON sidecar.
    Simulate(SimulateArgs),
    /// Run an experiment described by a JSON config file.
    Run(RunArgs),
    /// Emit the eigenvalue spectrum of a categorical kernel as CSV.
    Eigendecay(EigendecayArgs),
    /// Apply a saved model to a dataset and write predictions.
    Predict(PredictArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Full SimSpec as JSON (overrides the inline flags).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Inline scenario: single-categorical | glmm-binary | spatial.
    /// Longitudinal, multiple-categorical and combined need --spec.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 100)]
    q: usize,
    #[arg(long, default_value_t = 1.0)]
    sig2b: f64,
    #[arg(long, default_value_t = 1.0)]
    sig2b0: f64,
    #[arg(long, default_value_t = 1.0)]
    sig2b1: f64,
    #[arg(long, default_value_t = 1.0)]
    sig2e: f64,
    /// identity | linear-w | nonlinear-w
    #[arg(long, default_value = "identity")]
    g_mode: String,
    /// random | future
    #[arg(long, default_value = "random")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; the sidecar is written next to it as <out>.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON (fields: sim or dataset, methods, replications,
    /// net, train, output_dir, ohe_cap, save_models).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct EigendecayArgs {
    /// Explicit cluster sizes, e.g. --sizes 5,3,2.
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Or draw Poisson-multinomial sizes for n rows over q levels.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    /// When set, adds sigma2e * I and eigensolves the summed matrix densely.
    #[arg(long)]
    sigma2e: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Saved model JSON (written by `run` with save_models = true).
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV with sidecar <data>.json next to it.
    #[arg(long)]
    data: PathBuf,
    /// Predictions CSV: row_id, y_true, y_pred.
    #[arg(long)]
    out: PathBuf,
    /// Optional random-effect export: level_id, b_hat.
    #[arg(long)]
    blup_out: Option<PathBuf>,
    /// Predict only the sidecar's test rows instead of every row.
    #[arg(long, default_value_t = false)]
    test_only: bool,
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Simulate(args) => simulate(args),
        Cmd::Run(args) => run(args),
        Cmd::Eigendecay(args) => eigendecay_cmd(args),
        Cmd::Predict(args) => predict(args),
    };
    match code {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

fn parse_g_mode(s: &str) -> anyhow::Result<SimGMode> {
    Ok(match s {
        "identity" => SimGMode::Identity,
        "linear-w" => SimGMode::LinearW,
        "nonlinear-w" => SimGMode::NonlinearW,
        other => bail!("unknown g-mode '{other}'"),
    })
}

fn simulate(args: SimulateArgs) -> anyhow::Result<i32> {
    let spec: SimSpec = if let Some(path) = &args.spec {
        let file = std::fs::File::open(path)
            .with_context(|| format!("opening spec {}", path.display()))?;
        serde_json::from_reader(file).with_context(|| format!("parsing {}", path.display()))?
    } else {
        let scenario = match args.scenario.as_deref() {
            Some("single-categorical") => Scenario::SingleCategorical {
                q: args.q,
                sig2b: args.sig2b,
            },
            Some("glmm-binary") => Scenario::GlmmBinary {
                q: args.q,
                sig2b: args.sig2b,
            },
            Some("spatial") => Scenario::Spatial {
                q: args.q,
                sig2b0: args.sig2b0,
                sig2b1: args.sig2b1,
            },
            Some(other) => bail!("scenario '{other}' needs a --spec file"),
            None => bail!("pass --scenario or --spec"),
        };
        SimSpec {
            scenario,
            n: args.n,
            p: args.p,
            sig2e: args.sig2e,
            g_mode: parse_g_mode(&args.g_mode)?,
            split: match args.split.as_str() {
                "random" => SplitMode::Random,
                "future" => SplitMode::Future,
                other => bail!("unknown split '{other}'"),
            },
            seed: args.seed,
        }
    };
    let (ds, cov, _) = simgen::gen(&spec)?;
    let sidecar = sidecar_of(&args.out);
    simgen::export(&spec, &ds, &cov, &args.out, &sidecar)?;
    println!(
        "wrote {} rows to {} (sidecar {})",
        ds.y.len(),
        args.out.display(),
        sidecar.display()
    );
    Ok(0)
}

fn sidecar_of(csv: &PathBuf) -> PathBuf {
    let mut p = csv.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn run(args: RunArgs) -> anyhow::Result<i32> {
    let file = std::fs::File::open(&args.config)
        .with_context(|| format!("opening config {}", args.config.display()))?;
    let config: ExperimentConfig = serde_json::from_reader(file)
        .with_context(|| format!("parsing {}", args.config.display()))?;
    let report = harness::run(&config)?;
    println!("metric: {}", report.metric_name);
    for (method, mean, se, n_ok) in report.summary() {
        println!(
            "  {:<12} mean {:.4}  se {:.4}  ({n_ok}/{} ok)",
            method.name(),
            mean,
            se,
            config.replications
        );
    }
    for cell in report.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "cell failed: {} rep {}: {}",
            cell.method.name(),
            cell.replication,
            cell.error.as_deref().unwrap_or("")
        );
    }
    println!(
        "reports in {}",
        config.resolved_output_dir().display()
    );
    Ok(if report.all_ok() { 0 } else { 1 })
}

fn eigendecay_cmd(args: EigendecayArgs) -> anyhow::Result<i32> {
    let sizes: Vec<usize> = if let Some(sizes) = args.sizes {
        sizes
    } else {
        let (n, q) = match (args.n, args.q) {
            (Some(n), Some(q)) => (n, q),
            _ => bail!("pass --sizes or both --n and --q"),
        };
        let mut rng = lmmnn_core::simgen::seeded_rng(args.seed);
        let ids = simgen::sample_cluster_sizes(n, q, &mut rng)?;
        let mut counts = vec![0usize; q];
        for id in ids {
            counts[id] += 1;
        }
        counts.into_iter().filter(|&c| c > 0).collect()
    };
    let report = match args.sigma2e {
        Some(sig2e) => eigendecay::summed_spectrum(&[(sizes, args.sigma2)], sig2e)?,
        None => eigendecay::categorical_spectrum(&sizes, args.sigma2)?,
    };
    match args.out {
        Some(path) => {
            let mut file = std::fs::File::create(&path)
                .with_context(|| format!("creating {}", path.display()))?;
            report.write_csv(&mut file)?;
            println!(
                "wrote {} eigenvalues to {} (fit C = {:.4}, p = {:.4})",
                report.eigenvalues.len(),
                path.display(),
                report.fit_c,
                report.fit_p
            );
        }
        None => {
            if let Err(e) = report.write_csv(&mut std::io::stdout()) {
                // A closed pipe (e.g. piping into head) is not a failure.
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(0)
}

fn predict(args: PredictArgs) -> anyhow::Result<i32> {
    let model = FittedModel::load_json(&args.model)?;
    let sidecar = sidecar_of(&args.data);
    let (_, ds, _) = simgen::import(&args.data, &sidecar)?;
    let rows: Vec<usize> = if args.test_only {
        ds.test_rows.clone()
    } else {
        (0..ds.y.len()).collect()
    };
    let bhat = model.blup(&BlupConfig::default())?;
    let pred = model.predict(&ds.x, &ds.re, &rows, &bhat)?;
    let truth: Vec<f64> = rows.iter().map(|&r| ds.y[r]).collect();
    let mut file = std::fs::File::create(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    write_predictions_csv(&mut file, &truth, &pred)?;
    println!("wrote {} predictions to {}", pred.len(), args.out.display());
    if let Some(path) = args.blup_out {
        let mut file = std::fs::File::create(&path)
            .with_context(|| format!("creating {}", path.display()))?;
        write_blup_csv(&mut file, &bhat)?;
        println!("wrote {} random effects to {}", bhat.len(), path.display());
    }
    Ok(0)
}

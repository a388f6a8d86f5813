//! Command-line surface.
//!
//! Exit codes: 0 success, 1 domain error (bad data, failed check), 2 usage
//! error. Every subcommand is bitwise reproducible for a fixed `--seed`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::diagnose::{run_suite, Suite};
use crate::embedding::{
    estimate_fisher_info, per_example_gradients, train_logistic, Dataset, FisherMetric,
    GradientMatrix, MetricMode, ParamVector, TrainConfig,
};
use crate::error::{Error, Result};
use crate::io;
use crate::kernel::KernelOracle;
use crate::select::{SelectParams, SelectionMethod, VariantConfig};
use crate::workflows::{run_experiment, ExperimentConfig};

pub const THREADS_ENV: &str = "PROTOQUAD_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "protoquad",
    version,
    about = "Prototype selection over gradient embeddings",
    max_term_width = 100
)]
struct Cli {
    /// Worker-thread cap (falls back to the PROTOQUAD_THREADS env var).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the built-in logistic model on a CSV dataset.
    Train(TrainArgs),
    /// Write per-example gradient embeddings for a dataset under a model.
    Embed(EmbedArgs),
    /// Select weighted training prototypes that explain a test set.
    Select(SelectArgs),
    /// Run a verification suite and print a pass/fail table.
    Diagnose(DiagnoseArgs),
    /// Run an end-to-end experiment described by a JSON config.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training CSV (header row; a `label` column with 0/1 values).
    #[arg(long)]
    data: PathBuf,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Fit without an intercept term.
    #[arg(long)]
    no_intercept: bool,
    /// Accepted for interface uniformity; training is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model JSON produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Output embedding file.
    #[arg(long)]
    out: PathBuf,
    /// Embed under the model's own predictions instead of the label column
    /// (for test-side embeddings, which must not consume labels).
    #[arg(long)]
    predicted_labels: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Full,
    Practical,
}

impl From<ModeArg> for MetricMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => MetricMode::Full,
            ModeArg::Practical => MetricMode::Practical,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Sbq,
    Mp,
    Stochastic,
    Distributed,
}

impl From<MethodArg> for SelectionMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Sbq => SelectionMethod::Sbq,
            MethodArg::Mp => SelectionMethod::Mp,
            MethodArg::Stochastic => SelectionMethod::Stochastic,
            MethodArg::Distributed => SelectionMethod::Distributed,
        }
    }
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Training CSV; the built-in model is fitted on it first.
    #[arg(long, conflicts_with = "train_grads", requires = "test")]
    train: Option<PathBuf>,
    /// Test CSV; embedded under the fitted model's own predictions (its
    /// label column, if any, is never consumed).
    #[arg(long)]
    test: Option<PathBuf>,
    /// Precomputed training embeddings (external black-box models).
    #[arg(long, requires = "test_grads")]
    train_grads: Option<PathBuf>,
    /// Precomputed test embeddings.
    #[arg(long)]
    test_grads: Option<PathBuf>,
    /// Number of prototypes to select.
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    /// Relative ridge added to the estimated information matrix.
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    #[arg(long, value_enum, default_value_t = MethodArg::Sbq)]
    method: MethodArg,
    /// Failure probability for --method stochastic.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Shard count for --method distributed.
    #[arg(long, default_value_t = 1)]
    partitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also dump the train x train kernel matrix as CSV (diagnostic).
    #[arg(long)]
    dump_kernel: Option<PathBuf>,
    // Trainer options, used when the inputs are CSVs.
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long)]
    no_intercept: bool,
    // Numeric guard overrides.
    #[arg(long)]
    tol_d: Option<f64>,
    #[arg(long)]
    fidelity_tol: Option<f64>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long, value_enum, default_value_t = SuiteArg::All)]
    suite: SuiteArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SuiteArg {
    Appendix,
    Gradients,
    Hessian,
    Influence,
    All,
}

impl From<SuiteArg> for Suite {
    fn from(s: SuiteArg) -> Self {
        match s {
            SuiteArg::Appendix => Suite::Appendix,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::Hessian => Suite::Hessian,
            SuiteArg::Influence => Suite::Influence,
            SuiteArg::All => Suite::All,
        }
    }
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Optional plot-ready CSV (method,budget,metric,seed).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Override the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn init_threads(cap: Option<usize>) {
    let n = cap.or_else(|| {
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
    });
    if let Some(n) = n {
        if n >= 1 {
            // Ignore failure: the global pool can only be set once.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let data: Dataset<f64> = io::load_dataset(&args.data)?;
    let cfg = TrainConfig {
        l2: args.l2,
        tol: args.tol,
        max_iter: args.max_iter,
        intercept: !args.no_intercept,
    };
    let outcome = train_logistic(&data, &cfg)?;
    if !outcome.converged {
        eprintln!(
            "warning: stopped after {} iterations with |grad|_inf = {:.3e} > {:.3e}",
            outcome.iterations, outcome.grad_inf_norm, args.tol
        );
    }
    let model = io::ModelFile::from_outcome(&outcome, cfg.intercept, args.l2);
    io::write_json(&model, &args.out)?;
    println!(
        "trained on {} examples ({} features): converged={} iterations={} -> {}",
        data.len(),
        data.dim(),
        outcome.converged,
        outcome.iterations,
        args.out.display()
    );
    Ok(())
}

/// Gradient embeddings with labels replaced by the model's own predictions.
fn predicted_label_gradients(
    params: &ParamVector<f64>,
    data: &Dataset<f64>,
) -> Result<GradientMatrix<f64>> {
    let proba = crate::embedding::predict_proba(params, data)?;
    let mut relabeled = data.clone();
    for (i, &p) in proba.iter().enumerate() {
        relabeled.set_label(i, u8::from(p >= 0.5));
    }
    per_example_gradients(params, &relabeled)
}

fn cmd_embed(args: &EmbedArgs) -> Result<()> {
    let data: Dataset<f64> = io::load_dataset(&args.data)?;
    let model: io::ModelFile = io::read_json(&args.model)?;
    let params = model.param_vector()?;
    let grads = if args.predicted_labels {
        predicted_label_gradients(&params, &data)?
    } else {
        per_example_gradients(&params, &data)?
    };
    io::save_embeddings(&grads, &args.out)?;
    println!(
        "wrote {} x {} embeddings -> {}",
        grads.len(),
        grads.param_dim(),
        args.out.display()
    );
    Ok(())
}

fn load_select_inputs(args: &SelectArgs) -> Result<(GradientMatrix<f64>, GradientMatrix<f64>)> {
    match (&args.train, &args.test, &args.train_grads, &args.test_grads) {
        (Some(train_csv), Some(test_csv), None, None) => {
            let train: Dataset<f64> = io::load_dataset(train_csv)?;
            let test: Dataset<f64> = io::load_dataset(test_csv)?;
            let cfg = TrainConfig {
                l2: args.l2,
                tol: args.tol,
                max_iter: args.max_iter,
                intercept: !args.no_intercept,
            };
            let outcome = train_logistic(&train, &cfg)?;
            if !outcome.converged {
                eprintln!(
                    "warning: model fit stopped at |grad|_inf = {:.3e}",
                    outcome.grad_inf_norm
                );
            }
            let train_grads = per_example_gradients(&outcome.params, &train)?;
            // Test labels are never consumed: embed under predictions.
            let test_grads = predicted_label_gradients(&outcome.params, &test)?;
            Ok((train_grads, test_grads))
        }
        (None, None, Some(tg), Some(vg)) => {
            Ok((io::load_embeddings(tg)?, io::load_embeddings(vg)?))
        }
        _ => Err(Error::invalid(
            "provide either --train/--test CSVs or --train-grads/--test-grads embeddings",
        )),
    }
}

fn cmd_select(args: &SelectArgs) -> Result<()> {
    if args.k == 0 {
        return Err(Error::invalid("--k must be at least 1"));
    }
    let (train_grads, test_grads) = load_select_inputs(args)?;
    let metric = match MetricMode::from(args.mode) {
        MetricMode::Full => estimate_fisher_info(&train_grads, args.ridge)?,
        MetricMode::Practical => FisherMetric::practical(train_grads.param_dim()),
    };
    let mut oracle = KernelOracle::new(&train_grads, &test_grads, &metric)?;
    if let Some(path) = &args.dump_kernel {
        io::dump_kernel_matrix(&mut oracle, path)?;
    }
    let affinity = oracle.affinity_vector()?;
    let mut params = SelectParams::default();
    if let Some(t) = args.tol_d {
        params.tol_d_rel = t;
    }
    if let Some(t) = args.fidelity_tol {
        params.fidelity_tol = t;
    }
    let variant = VariantConfig {
        method: args.method.into(),
        k: args.k,
        delta: args.delta,
        partitions: args.partitions,
        seed: args.seed,
    };
    let report = variant.run(&oracle, &affinity, &params)?;
    io::write_json(&report, &args.out)?;
    println!(
        "selected {}/{} prototypes (method {}, {} kernel evals{}) -> {}",
        report.selections.len(),
        args.k,
        report.method,
        report.kernel_evals,
        if report.truncated { ", truncated" } else { "" },
        args.out.display()
    );
    Ok(())
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<bool> {
    let report = run_suite(args.suite.into(), args.seed)?;
    print!("{}", report.table());
    if let Some(path) = &args.out {
        io::write_json(&report, path)?;
    }
    Ok(report.all_passed)
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let mut config: ExperimentConfig = io::read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let report = run_experiment(&config)?;
    io::write_json(&report, &args.out)?;
    if let Some(csv) = &args.csv {
        std::fs::write(csv, report.csv_rows())
            .map_err(|e| Error::io(&csv.display().to_string(), e))?;
    }
    println!(
        "ran {:?} task over {} replicate(s) -> {}",
        report.task,
        report.replicates.len(),
        args.out.display()
    );
    Ok(())
}

/// Entry point shared by `main` and the tests. Returns the process exit
/// code: 0 success, 1 domain error, 2 usage error.
pub fn run_cli<S: AsRef<str>>(argv: &[S]) -> u8 {
    let argv: Vec<&str> = argv.iter().map(AsRef::as_ref).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    init_threads(cli.threads);
    let outcome = match &cli.command {
        Command::Train(args) => cmd_train(args).map(|()| true),
        Command::Embed(args) => cmd_embed(args).map(|()| true),
        Command::Select(args) => cmd_select(args).map(|()| true),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Experiment(args) => cmd_experiment(args).map(|()| true),
    };
    match outcome {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Re-exported for integration tests that need a path-independent way to
/// name the binary's interface.
pub fn command_names() -> &'static [&'static str] {
    &["train", "embed", "select", "diagnose", "experiment"]
}

mod config;
mod manifest;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ebsurv_core::baselines::{train_baseline, BaselineKind, DiscreteTimeModel};
use ebsurv_core::data::{Dataset, SurvivalRecord};
use ebsurv_core::datagen::{gen_fleet_like, gen_sim_dataset, split_dataset, FleetConfig, SimConfig, DEFAULT_SPLIT};
use ebsurv_core::ebm::{self, censor_beyond, EnergyModel, IntegrationSpec, DEFAULT_GAMMA};
use ebsurv_core::evaluation::{
    integration_convergence_report, ks_grid, mean_ks, roc_curve, write_convergence, write_curves,
    write_ks_report, write_loss_histories, write_roc, CurveSeries, KS_GRID_POINTS,
};
use ebsurv_core::io::{load_model_file, read_dataset_file, save_model_file, write_dataset_file, SavedModel};
use ebsurv_core::maintenance::{decide_batch, write_decisions, DecisionConfig};
use ebsurv_core::model::{SurvivalModel, WeibullOracle};
use ebsurv_core::training::TrainConfig;

use config::{Resolver, RunFile};
use manifest::Manifest;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] ebsurv_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use ebsurv_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidConfig(_) => 1,
                E::NonFinite { .. } | E::NonFiniteGradient => 3,
                _ => 2,
            },
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ebsurv", version, about = "Energy-based survival models for predictive maintenance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset split into train/val/test CSVs.
    Simulate(SimulateArgs),
    /// Train an energy-based or discrete-time model.
    Train(TrainArgs),
    /// Mean KS against Weibull ground truth, validation loss and integration convergence.
    Evaluate(EvaluateArgs),
    /// ROC curves of the replacement decision at one or more horizons.
    Roc(RocArgs),
    /// Replace-or-keep decisions for every record of a dataset.
    Decide(DecideArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// key = value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum DataKind {
    Weibull,
    Fleet,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    kind: Option<DataKind>,
    /// Number of subjects before splitting.
    #[arg(long)]
    n: Option<usize>,
    /// Fleet only: target censoring rate.
    #[arg(long)]
    censor_rate: Option<f64>,
    /// Fleet only: number of features.
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum ModelKind {
    Ebm,
    Pch,
    Pmf,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ebm => "ebm",
            ModelKind::Pch => "pch",
            ModelKind::Pmf => "pmf",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <ModelKind as ValueEnum>::from_str(s, true)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Training CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation CSV used for early stopping.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Monte Carlo samples per record in the training loss (ebm).
    #[arg(long)]
    n_samples: Option<usize>,
    /// Number of intervals (pch, pmf).
    #[arg(long)]
    n_grid: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Trapezoid points for the validation loss (ebm).
    #[arg(long)]
    validation_points: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum Method {
    Trapezoid,
    Mc,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Trapezoid => "trapezoid",
            Method::Mc => "mc",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        <Method as ValueEnum>::from_str(s, true)
    }
}

#[derive(Args, Debug)]
struct Prediction {
    /// Model file written by `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Integration rule for energy-model predictions.
    #[arg(long, value_enum)]
    integration: Option<Method>,
    /// Points or samples for energy-model predictions.
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    prediction: Prediction,
    /// Score the true Weibull survival instead of a model.
    #[arg(long)]
    oracle: bool,
    /// Data for the validation loss.
    #[arg(long)]
    data: Option<PathBuf>,
    /// End of the KS grid; defaults to the model's t_m.
    #[arg(long)]
    t_m: Option<f64>,
    /// Comma-separated point counts for the integration convergence table.
    #[arg(long, value_delimiter = ',')]
    convergence: Option<Vec<usize>>,
    #[arg(long)]
    repetitions: Option<usize>,
}

#[derive(Args, Debug)]
struct RocArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    prediction: Prediction,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Prediction horizon; repeat for several curves.
    #[arg(long)]
    horizon: Vec<f64>,
}

#[derive(Args, Debug)]
struct DecideArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    prediction: Prediction,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Replace when the horizon survival falls below this.
    #[arg(long)]
    threshold: Option<f64>,
    /// Information cutoff the durations are measured from.
    #[arg(long)]
    t0: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a, &argv),
        Command::Train(a) => train(a, &argv),
        Command::Evaluate(a) => evaluate(a, &argv),
        Command::Roc(a) => roc(a, &argv),
        Command::Decide(a) => decide(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ebsurv: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run `ebsurv --help` for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run_file(common: &Common, allowed: &[&str]) -> CliResult<RunFile> {
    match &common.config {
        Some(p) => {
            let f = RunFile::load(p)?;
            f.check_keys(allowed)?;
            Ok(f)
        }
        None => Ok(RunFile::default()),
    }
}

fn out_dir(common: &Common) -> CliResult<&Path> {
    std::fs::create_dir_all(&common.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", common.out.display())))?;
    Ok(&common.out)
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn simulate(a: SimulateArgs, argv: &[String]) -> CliResult<()> {
    let file = run_file(&a.common, &["kind", "n", "censor-rate", "dim", "seed"])?;
    let mut r = Resolver::new(&file);
    let kind = match r.pick_opt("kind", a.kind.map(|k| format!("{k:?}").to_lowercase()))? {
        Some(k) => <DataKind as ValueEnum>::from_str(&k, true).map_err(CliError::Usage)?,
        None => return Err(CliError::Usage("--kind is required".into())),
    };
    let n = required(r.pick_opt("n", a.n)?, "n")?;
    let seed = r.seed(a.common.seed)?;
    let full = match kind {
        DataKind::Weibull => gen_sim_dataset(&SimConfig::new(n, seed))?,
        DataKind::Fleet => {
            let mut cfg = FleetConfig::new(n, seed);
            cfg.target_censor_rate = r.pick("censor-rate", a.censor_rate, cfg.target_censor_rate)?;
            cfg.covariate_dim = r.pick("dim", a.dim, cfg.covariate_dim)?;
            gen_fleet_like(&cfg)?
        }
    };
    let (train, val, test) = split_dataset(&full, DEFAULT_SPLIT, seed)?;
    let dir = out_dir(&a.common)?;
    let mut m = Manifest::new("simulate", argv, seed, r.resolved.clone());
    for (name, ds) in [("train.csv", &train), ("val.csv", &val), ("test.csv", &test)] {
        let path = dir.join(name);
        write_dataset_file(ds, &path)?;
        m.output(&path);
    }
    m.extra("censor_rate", full.censoring_rate());
    m.extra(
        "split_censor_rates",
        [train.censoring_rate(), val.censoring_rate(), test.censoring_rate()],
    );
    m.extra("sizes", [train.len(), val.len(), test.len()]);
    m.write(dir)?;
    println!(
        "wrote {} / {} / {} records, censoring rate {:.4}",
        train.len(),
        val.len(),
        test.len(),
        full.censoring_rate()
    );
    Ok(())
}

const TRAIN_KEYS: &[&str] = &[
    "data",
    "val",
    "model",
    "nodes",
    "layers",
    "dropout",
    "learning-rate",
    "n-samples",
    "n-grid",
    "gamma",
    "batch-size",
    "max-epochs",
    "patience",
    "validation-points",
    "seed",
];

fn load_data(path: &Path, m: &mut Manifest) -> CliResult<Dataset> {
    let ds = read_dataset_file(path)?;
    m.input(path)?;
    Ok(ds)
}

fn train(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    let file = run_file(&a.common, TRAIN_KEYS)?;
    let mut r = Resolver::new(&file);
    let data: PathBuf = required(r.pick_opt("data", a.data.map(|p| p.display().to_string()))?, "data")?.into();
    let val: PathBuf = required(r.pick_opt("val", a.val.map(|p| p.display().to_string()))?, "val")?.into();
    let kind = r.pick("model", a.model, ModelKind::Ebm)?;
    let (nodes_default, dropout_default, lr_default) = match kind {
        ModelKind::Ebm => (64, 0.0, 0.02),
        _ => (32, 0.2, 0.005),
    };
    let nodes = r.pick("nodes", a.nodes, nodes_default)?;
    let layers = r.pick("layers", a.layers, 2)?;
    let dropout = r.pick("dropout", a.dropout, dropout_default)?;
    let defaults = TrainConfig::default();
    let seed = r.seed(a.common.seed)?;
    let mut cfg = TrainConfig {
        learning_rate: r.pick("learning-rate", a.learning_rate, lr_default)?,
        batch_size: r.pick("batch-size", a.batch_size, defaults.batch_size)?,
        max_epochs: r.pick("max-epochs", a.max_epochs, defaults.max_epochs)?,
        patience: r.pick("patience", a.patience, defaults.patience)?,
        seed,
        ..defaults
    };

    let mut m = Manifest::new("train", argv, seed, r.resolved.clone());
    let train_set = load_data(&data, &mut m)?;
    let val_set = load_data(&val, &mut m)?;
    let (saved, history) = match kind {
        ModelKind::Ebm => {
            cfg.n_samples = r.pick("n-samples", a.n_samples, defaults.n_samples)?;
            cfg.validation_points = r.pick("validation-points", a.validation_points, defaults.validation_points)?;
            let gamma = r.pick("gamma", a.gamma, DEFAULT_GAMMA)?;
            let init = EnergyModel::for_dataset(&train_set, layers, nodes, dropout, gamma, seed)?;
            let (model, h) = ebm::train(&train_set, &val_set, init, &cfg)?;
            (SavedModel::Ebm(model), h)
        }
        ModelKind::Pch | ModelKind::Pmf => {
            let n_grid = r.pick("n-grid", a.n_grid, 15)?;
            let bk = if kind == ModelKind::Pch { BaselineKind::Pch } else { BaselineKind::Pmf };
            let init = DiscreteTimeModel::for_dataset(bk, &train_set, n_grid, layers, nodes, dropout, seed)?;
            let (model, h) = train_baseline(&train_set, &val_set, init, &cfg)?;
            (SavedModel::Baseline(model), h)
        }
    };
    m.flags = r.resolved.clone();

    let dir = out_dir(&a.common)?;
    let model_path = dir.join("model.json");
    save_model_file(&saved, &model_path)?;
    m.output(&model_path);
    let hist_path = dir.join("fig3_valloss.csv");
    write_loss_histories(&[(kind.to_string(), history.clone())], create(&hist_path)?)?;
    m.output(&hist_path);
    m.extra("epochs", history.epochs());
    m.extra("best_epoch", history.best_epoch);
    m.extra("best_val_loss", history.best_val_loss());
    m.write(dir)?;
    println!(
        "trained {kind} for {} epochs, best validation loss {:.6} at epoch {}",
        history.epochs(),
        history.best_val_loss(),
        history.best_epoch
    );
    Ok(())
}

fn integration(r: &mut Resolver, p: &Prediction, seed: u64) -> CliResult<IntegrationSpec> {
    let method = r.pick("integration", p.integration, Method::Trapezoid)?;
    Ok(match method {
        Method::Trapezoid => IntegrationSpec::Trapezoid {
            points: r.pick("points", p.points, 20)?,
        },
        Method::Mc => IntegrationSpec::MonteCarlo {
            samples: r.pick("points", p.points, 1000)?,
            seed,
        },
    })
}

fn load_model(r: &mut Resolver, p: &Prediction, m: &mut Manifest) -> CliResult<SavedModel> {
    let path: PathBuf = required(r.pick_opt("model", p.model.as_ref().map(|p| p.display().to_string()))?, "model")?.into();
    let model = load_model_file(&path)?;
    m.input(&path)?;
    Ok(model)
}

fn check_dim(model: &SavedModel, data: &Dataset) -> CliResult<()> {
    match data.covariate_dim() {
        Some(d) if d != model.covariate_dim() => Err(CliError::Data(format!(
            "model expects {} covariates, data has {d}",
            model.covariate_dim()
        ))),
        _ => Ok(()),
    }
}

fn validation_loss(model: &SavedModel, data: &Dataset, points: usize) -> CliResult<f64> {
    let held = censor_beyond(data, model.t_m());
    let refs: Vec<&SurvivalRecord> = held.records.iter().collect();
    let total = match model {
        SavedModel::Ebm(e) => e.nll_trapezoid(&refs, points)?,
        SavedModel::Baseline(b) => b.nll(&refs)?,
    };
    Ok(total / refs.len().max(1) as f64)
}

fn evaluate(a: EvaluateArgs, argv: &[String]) -> CliResult<()> {
    let file = run_file(
        &a.common,
        &["model", "integration", "points", "data", "t-m", "repetitions", "seed"],
    )?;
    let mut r = Resolver::new(&file);
    let seed = r.seed(a.common.seed)?;
    let spec = integration(&mut r, &a.prediction, seed)?;
    let mut m = Manifest::new("evaluate", argv, seed, r.resolved.clone());
    let model = if a.oracle { None } else { Some(load_model(&mut r, &a.prediction, &mut m)?) };
    let data = match r.pick_opt("data", a.data.map(|p| p.display().to_string()))? {
        Some(p) => Some(load_data(Path::new(&p), &mut m)?),
        None => None,
    };
    let t_m = match (r.pick_opt("t-m", a.t_m)?, &model, &data) {
        (Some(t), _, _) => t,
        (None, Some(model), _) => model.t_m(),
        (None, None, Some(d)) => d.max_time().unwrap_or(0.0),
        (None, None, None) => return Err(CliError::Usage("--oracle needs --t-m or --data".into())),
    };
    let dir = out_dir(&a.common)?;

    let predictor: Box<dyn SurvivalModel + '_> = match &model {
        Some(model) => {
            if model.covariate_dim() != 2 {
                return Err(CliError::Data(format!(
                    "mean KS needs a model of [lambda, k]; this one takes {} covariates",
                    model.covariate_dim()
                )));
            }
            model.predictor(spec)
        }
        None => Box::new(WeibullOracle),
    };
    let report = mean_ks(predictor.as_ref(), t_m)?;
    let ks_path = dir.join("ks_report.csv");
    write_ks_report(&report, create(&ks_path)?)?;
    m.output(&ks_path);
    m.extra("mean_ks", report.mean);
    m.extra("t_m", t_m);
    println!("mean KS {:.6} over {} cells on [0, {t_m}]", report.mean, report.cells.len());

    let grid = ks_grid(t_m, KS_GRID_POINTS);
    let truth = WeibullOracle.survival_curve(&[2.0, 3.0], &grid)?;
    let predicted = predictor.survival_curve(&[2.0, 3.0], &grid)?;
    let label = model.as_ref().map_or("oracle", |m| m.kind());
    let curves_path = dir.join("fig5_curves.csv");
    write_curves(
        &[
            CurveSeries { label: label.into(), times: grid.clone(), survival: predicted },
            CurveSeries { label: "true".into(), times: grid, survival: truth },
        ],
        create(&curves_path)?,
    )?;
    m.output(&curves_path);

    if let (Some(model), Some(data)) = (&model, &data) {
        check_dim(model, data)?;
        let points = match spec {
            IntegrationSpec::Trapezoid { points } => points,
            IntegrationSpec::MonteCarlo { .. } => 20,
        };
        let loss = validation_loss(model, data, points)?;
        m.extra("validation_loss", loss);
        println!("validation loss {loss:.6}");
    }

    if let Some(counts) = &a.convergence {
        let Some(SavedModel::Ebm(e)) = &model else {
            return Err(CliError::Usage("--convergence needs an energy model".into()));
        };
        let reps = r.pick("repetitions", a.repetitions, 20)?;
        let rows = integration_convergence_report(e, t_m, counts, reps, seed)?;
        let conv_path = dir.join("fig4_convergence.csv");
        write_convergence(&rows, create(&conv_path)?)?;
        m.output(&conv_path);
        for row in &rows {
            println!(
                "{:>9} {:>5} points: mean KS {:.6} [{:.6}, {:.6}]",
                row.method, row.points, row.mean_ks, row.min_ks, row.max_ks
            );
        }
    }
    m.flags = r.resolved.clone();
    m.write(dir)
}

fn roc(a: RocArgs, argv: &[String]) -> CliResult<()> {
    let file = run_file(&a.common, &["model", "integration", "points", "data", "seed"])?;
    let mut r = Resolver::new(&file);
    let seed = r.seed(a.common.seed)?;
    let spec = integration(&mut r, &a.prediction, seed)?;
    if a.horizon.is_empty() {
        return Err(CliError::Usage("at least one --horizon is required".into()));
    }
    let mut m = Manifest::new("roc", argv, seed, r.resolved.clone());
    let model = load_model(&mut r, &a.prediction, &mut m)?;
    let data_path = required(r.pick_opt("data", a.data.map(|p| p.display().to_string()))?, "data")?;
    let data = load_data(Path::new(&data_path), &mut m)?;
    check_dim(&model, &data)?;
    let predictor = model.predictor(spec);
    let mut curves = Vec::new();
    let mut aucs = Vec::new();
    for &h in &a.horizon {
        let c = roc_curve(predictor.as_ref(), &data, h, None)?;
        println!("horizon {h}: AUC {:.4} ({} positives, {} negatives)", c.auc, c.positives, c.negatives);
        aucs.push(serde_json::json!({ "horizon": h, "auc": c.auc }));
        curves.push((format!("{}@{h}", model.kind()), c));
    }
    let dir = out_dir(&a.common)?;
    let path = dir.join("fig6_roc.csv");
    write_roc(&curves, create(&path)?)?;
    m.output(&path);
    m.extra("auc", aucs);
    m.flags = r.resolved.clone();
    m.flags.insert("horizon".into(), format!("{:?}", a.horizon));
    m.write(dir)
}

fn decide(a: DecideArgs, argv: &[String]) -> CliResult<()> {
    let file = run_file(
        &a.common,
        &["model", "integration", "points", "data", "horizon", "threshold", "t0", "seed"],
    )?;
    let mut r = Resolver::new(&file);
    let seed = r.seed(a.common.seed)?;
    let spec = integration(&mut r, &a.prediction, seed)?;
    let horizon = required(r.pick_opt("horizon", a.horizon)?, "horizon")?;
    let threshold = required(r.pick_opt("threshold", a.threshold)?, "threshold")?;
    let t0 = r.pick("t0", a.t0, 0.0)?;
    let cfg = DecisionConfig::new(t0, horizon, threshold)?;
    let mut m = Manifest::new("decide", argv, seed, r.resolved.clone());
    let model = load_model(&mut r, &a.prediction, &mut m)?;
    let data_path = required(r.pick_opt("data", a.data.map(|p| p.display().to_string()))?, "data")?;
    let data = load_data(Path::new(&data_path), &mut m)?;
    check_dim(&model, &data)?;
    let decisions = decide_batch(model.predictor(spec).as_ref(), &data, &cfg)?;
    let dir = out_dir(&a.common)?;
    let path = dir.join("decisions.csv");
    write_decisions(&decisions, create(&path)?)?;
    m.output(&path);
    let replaced = decisions.iter().filter(|d| d.replace).count();
    m.extra("replaced", replaced);
    m.flags = r.resolved.clone();
    m.write(dir)?;
    println!("{replaced} of {} components flagged for replacement", decisions.len());
    Ok(())
}

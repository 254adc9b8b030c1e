//! `hrt`: generate data, fit models, run randomization tests, select
//! features, and drive whole Monte Carlo experiments.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Deserialize;

use hrt_core::data::{load_feature_csv, load_truth, write_dataset_csv, write_truth, Dataset};
use hrt_core::datagen::{gen_design, gen_response, DesignSpec, ResponseSpec};
use hrt_core::harness::{
    emit_reports, fit_method_spec, mean_covariance_gof, run_experiment, ExperimentConfig, MethodSpec, ModelKind,
    Tuning,
};
use hrt_core::regression::FittedModel;
use hrt_core::sampler::{fit_gaussian, ConditionalLaw, GaussianModel, LawSource};
use hrt_core::selection::{select, SelectionMethod, SelectionResult};
use hrt_core::testing::{hrt_pvalues, load_pvalues_csv, HrtConfig};
use hrt_core::{seed, Error};

#[derive(Parser)]
#[command(name = "hrt", version, about = "Holdout randomization tests with discrepancy-maximizing models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; overrides any seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset; writes data.csv, truth.txt and law.json.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a CSV and write model.json.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "lasso")]
        model: ModelArg,
        /// Train with the discrepancy penalty.
        #[arg(long)]
        mrd: bool,
        /// Feature law for dummies; a Gaussian is fitted to the data when absent.
        #[arg(long)]
        law: Option<PathBuf>,
        #[arg(long)]
        alpha1: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Randomization p-values for a fitted model on held-out data.
    Test {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Feature law; a Gaussian is fitted to the test features when absent.
        #[arg(long)]
        law: Option<PathBuf>,
        /// Dummies per feature.
        #[arg(long, default_value_t = 1000)]
        k: usize,
        /// Comma-separated 1-based features to test (default all).
        #[arg(long, value_delimiter = ',')]
        features: Option<Vec<usize>>,
        /// Also write every dummy statistic to dummy_stats.csv.
        #[arg(long)]
        dump_dummies: bool,
    },
    /// Multiple-testing selection on a p-value CSV.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pvalues: PathBuf,
        #[arg(long, value_enum, default_value = "bh")]
        method: MethodArg,
        #[arg(long, default_value_t = 0.2)]
        q: f64,
        /// File of 1-based non-null features, one per line.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Covariance goodness-of-fit of a feature law against data.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        law: PathBuf,
        #[arg(long, value_delimiter = ',')]
        features: Option<Vec<usize>>,
    },
    /// Run a configured Monte Carlo experiment and write its reports.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Sorted p-values against uniform quantiles.
    Qq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pvalues: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Lasso,
    ElasticNet,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Bh,
    By,
}

/// Input of `gen-data`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataConfig {
    design: DesignSpec,
    response: ResponseSpec,
}

/// Input of `fit` when `--config` is given: a method plus tuning settings.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FitConfig {
    method: MethodSpec,
    #[serde(default = "five")]
    cv_folds: usize,
    #[serde(default = "thirty")]
    alpha_grid_size: usize,
}

fn five() -> usize {
    5
}
fn thirty() -> usize {
    30
}

/// Errors that are the caller's fault; they exit with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Trials failed inside an otherwise complete run; exit status 1.
#[derive(Debug)]
struct FailedTrials(usize);

impl std::fmt::Display for FailedTrials {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} trial record(s) failed", self.0)
    }
}

impl std::error::Error for FailedTrials {}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn require_config(common: &Common) -> Result<&Path> {
    common.config.as_deref().ok_or_else(|| config_err("--config is required"))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(load_feature_csv(path)?.into_dataset()?)
}

fn load_or_fit_law(law: Option<&Path>, x: &nalgebra::DMatrix<f64>) -> Result<ConditionalLaw> {
    match law {
        Some(p) => Ok(ConditionalLaw::load(p)?),
        None => {
            let g = fit_gaussian(x, GaussianModel::default_ridge(x))?;
            Ok(ConditionalLaw::gaussian(g, LawSource::Fitted)?)
        }
    }
}

fn one_based(features: Option<Vec<usize>>, d: usize) -> Result<Option<Vec<usize>>> {
    features
        .map(|f| {
            f.into_iter()
                .map(|j| {
                    if j == 0 || j > d {
                        Err(config_err(format!("feature {j} outside 1..={d}")))
                    } else {
                        Ok(j - 1)
                    }
                })
                .collect()
        })
        .transpose()
}

fn gen_data(common: &Common) -> Result<()> {
    let mut cfg: GenDataConfig = read_json(require_config(common)?)?;
    if let Some(s) = common.seed {
        cfg.design.seed = seed::derive(s, &[seed::tag::DATA_DESIGN]);
        cfg.response.seed = seed::derive(s, &[seed::tag::DATA_BETA]);
    }
    let x = gen_design(&cfg.design)?;
    let truth = cfg.response.ground_truth(cfg.design.d)?;
    let y = gen_response(&x, &cfg.response, &truth)?;
    let data = Dataset::new(x, y)?;
    let dir = out_dir(common)?;
    write_dataset_csv(&data, &dir.join("data.csv"))?;
    write_truth(&truth.nonnull, &dir.join("truth.txt"))?;
    cfg.design.true_law()?.save(&dir.join("law.json"))?;
    info!("wrote {} rows to {}", data.n(), dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn fit(
    common: &Common,
    data: &Path,
    model: ModelArg,
    mrd: bool,
    law: Option<&Path>,
    alpha1: Option<f64>,
    lambda: Option<f64>,
) -> Result<()> {
    let train = load_dataset(data)?;
    let (mut spec, tuning) = match &common.config {
        Some(p) => {
            let c: FitConfig = read_json(p)?;
            (c.method, Tuning { folds: c.cv_folds, grid_size: c.alpha_grid_size })
        }
        None => {
            let kind = match model {
                ModelArg::Lasso => ModelKind::Lasso,
                ModelArg::ElasticNet => ModelKind::ElasticNet,
                ModelArg::Mlp => ModelKind::Mlp,
            };
            (MethodSpec::new(kind, mrd), Tuning { folds: 5, grid_size: 30 })
        }
    };
    spec.alpha1 = alpha1.or(spec.alpha1);
    spec.lambda = lambda.or(spec.lambda);
    if let Some(l) = spec.lambda {
        if !(0.0..1.0).contains(&l) {
            return Err(config_err(format!("lambda must lie in [0, 1), got {l}")));
        }
    }
    let law = load_or_fit_law(law, &train.x)?;
    let fitted = fit_method_spec(&spec, &train, &law, tuning, common.seed.unwrap_or(0))?;
    let dir = out_dir(common)?;
    fitted.model.save(&dir.join("model.json"))?;
    println!(
        "{}: alpha1 = {}, lambda = {}",
        spec.label(),
        fitted.alpha1.map_or("-".into(), |a| a.to_string()),
        fitted.lambda.map_or("-".into(), |a| a.to_string())
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn test(
    common: &Common,
    model: &Path,
    data: &Path,
    law: Option<&Path>,
    k: usize,
    features: Option<Vec<usize>>,
    dump: bool,
) -> Result<()> {
    let model = FittedModel::load(model)?;
    let test = load_dataset(data)?;
    let law = load_or_fit_law(law, &test.x)?;
    let cfg = HrtConfig {
        k,
        feature_subset: one_based(features, test.d())?,
        seed: common.seed.unwrap_or(0),
    };
    let report = hrt_pvalues(&model, &test, &law, &cfg)?;
    let dir = out_dir(common)?;
    report.write_csv(&dir.join("pvalues.csv"))?;
    if dump {
        report.write_dummy_stats(&dir.join("dummy_stats.csv"))?;
    }
    println!("t_star = {}", report.t_star);
    Ok(())
}

fn select_cmd(common: &Common, pvalues: &Path, method: MethodArg, q: f64, truth: Option<&Path>) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(config_err(format!("q must lie in (0, 1), got {q}")));
    }
    let (features, p) = load_pvalues_csv(pvalues)?;
    let method = match method {
        MethodArg::Bh => SelectionMethod::Bh,
        MethodArg::By => SelectionMethod::By,
    };
    let sel = select(method, &p, q);
    let rejected: BTreeSet<usize> = sel.rejected.iter().map(|&c| features[c]).collect();
    let mut sel = SelectionResult { rejected, ..sel };
    if let Some(t) = truth {
        sel = sel.with_truth(&load_truth(t)?);
    }
    println!("{}", SelectionResult::CSV_HEADER);
    println!("{}", sel.csv_row());
    if common.out.is_some() {
        write_truth(&sel.rejected, &out_dir(common)?.join("selected.txt"))?;
    }
    Ok(())
}

fn diagnose(common: &Common, data: &Path, law: &Path, features: Option<Vec<usize>>) -> Result<()> {
    let x = load_feature_csv(data)?.x;
    let law = ConditionalLaw::load(law)?;
    let features = one_based(features, x.ncols())?.unwrap_or_else(|| (0..x.ncols()).collect());
    let s = common.seed.unwrap_or(0);
    println!("feature,gof");
    for &j in &features {
        println!("{},{}", j + 1, mean_covariance_gof(&law, &x, &[j], s)?);
    }
    println!("mean,{}", mean_covariance_gof(&law, &x, &features, s)?);
    Ok(())
}

fn experiment(common: &Common) -> Result<()> {
    let mut cfg = ExperimentConfig::load(require_config(common)?)?;
    if let Some(s) = common.seed {
        cfg.base_seed = s;
    }
    let dir = match (&common.out, &cfg.output_dir) {
        (Some(d), _) | (None, Some(d)) => d.clone(),
        (None, None) => PathBuf::from("results"),
    };
    let outcome = run_experiment(&cfg, common.workers)?;
    emit_reports(&outcome, &dir)?;
    for (label, m) in &outcome.summary.methods {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
        println!(
            "{label}: power {} (se {}), fdr {}, rmse {}",
            f(m.power_mean),
            f(m.power_se),
            f(m.fdr_mean),
            f(m.rmse_mean)
        );
    }
    let failed = outcome.failed_records();
    if failed > 0 {
        return Err(FailedTrials(failed).into());
    }
    Ok(())
}

fn qq(common: &Common, pvalues: &Path, truth: Option<&Path>) -> Result<()> {
    let (features, p) = load_pvalues_csv(pvalues)?;
    let truth = truth.map(load_truth).transpose()?;
    let mut groups: Vec<(&str, Vec<f64>)> = vec![("null", Vec::new()), ("nonnull", Vec::new())];
    for (j, v) in features.iter().zip(&p) {
        let nonnull = truth.as_ref().is_some_and(|t| t.contains(j));
        groups[usize::from(nonnull)].1.push(*v);
    }
    let mut out = String::from("group,rank,pvalue,uniform_quantile\n");
    for (g, mut v) in groups {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        for (r, x) in v.iter().enumerate() {
            out.push_str(&format!("{g},{},{x},{}\n", r + 1, (r + 1) as f64 / (n + 1) as f64));
        }
    }
    let path = out_dir(common)?.join("qq_data.csv");
    fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => gen_data(&common),
        Command::Fit { common, data, model, mrd, law, alpha1, lambda } => {
            fit(&common, &data, model, mrd, law.as_deref(), alpha1, lambda)
        }
        Command::Test { common, model, data, law, k, features, dump_dummies } => {
            test(&common, &model, &data, law.as_deref(), k, features, dump_dummies)
        }
        Command::Select { common, pvalues, method, q, truth } => {
            select_cmd(&common, &pvalues, method, q, truth.as_deref())
        }
        Command::Diagnose { common, data, law, features } => diagnose(&common, &data, &law, features),
        Command::Experiment { common } => experiment(&common),
        Command::Qq { common, pvalues, truth } => qq(&common, &pvalues, truth.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<FailedTrials>().is_some() {
        return 1;
    }
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Json { .. } | Error::InvalidFraction { .. } | Error::InvalidK { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

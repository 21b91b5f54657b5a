mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use mvt_core::dataset::{load_dataset, synth_dataset, write_dataset, Label};
use mvt_core::metrics::{confusion, derived_metrics, empirical_auc, ConfusionMatrix, DerivedMetrics};
use mvt_core::model::{load_checkpoint, param_count, save_checkpoint, toy_gradient_check, ModelConfig};
use mvt_core::rng::substream_seed;
use mvt_core::tensor::GradCheckConfig;
use mvt_core::training::{
    check_splits, evaluate, prepare_cases, run_cross_validation, train_model, write_sweep_csv, CvResult, SweepRow,
    TrainConfig,
};

use config::{parse_splits, CommonArgs, ModelArgs, RunConfig, SynthArgs, TrainArgs};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Multi-view Vision Transformer: synthetic data, training, evaluation.
#[derive(Parser)]
#[command(name = "mvt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic four-view dataset.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Cross-validate one model configuration on a dataset.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Also train on every case and save `model.ckpt` in the output dir.
        #[arg(long)]
        r#final: bool,
        /// Skip cross-validation (only useful with --final).
        #[arg(long)]
        no_cv: bool,
    },
    /// Cross-validate several local/global block splits of equal total.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated LOCAL:GLOBAL pairs, e.g. 0:6,2:4,6:0.
        #[arg(long)]
        splits: Option<String>,
    },
    /// Score a dataset with a saved checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Expected model shape; must match the checkpoint when given.
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference check of the model's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Elements checked per parameter tensor.
        #[arg(long, default_value_t = 16)]
        max_elements: usize,
        #[arg(long, hide = true)]
        corrupt_param: Option<String>,
    },
    /// Print summary.json or sweep.csv as an aligned table.
    Report {
        /// A run directory, summary.json, or sweep.csv.
        path: PathBuf,
    },
}

/// Marks an error as a usage/configuration problem (exit code 2).
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// Config errors from the core become usage errors; everything else is a
/// runtime failure.
fn core(e: mvt_core::Error) -> anyhow::Error {
    match e {
        mvt_core::Error::Config(msg) => usage(msg),
        other => anyhow::Error::new(other),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Synth { common, synth } => {
            let file = RunConfig::load(common.config_path.as_ref())?;
            let common = common.overlay(file.common);
            let synth = synth.overlay(file.synth);
            cmd_synth(&common, &synth)
        }
        Command::Train {
            common,
            model,
            train,
            r#final,
            no_cv,
        } => {
            let file = RunConfig::load(common.config_path.as_ref())?;
            let common = common.overlay(file.common);
            let model = model.overlay(file.model);
            let train = train.overlay(file.train);
            configure_threads(common.jobs)?;
            cmd_train(&common, &model, &train, r#final, no_cv)
        }
        Command::Sweep {
            common,
            model,
            train,
            splits,
        } => {
            let file = RunConfig::load(common.config_path.as_ref())?;
            let common = common.overlay(file.common);
            let model = model.overlay(file.model);
            let train = train.overlay(file.train);
            let splits = splits.or(file.splits).ok_or_else(|| usage("--splits is required"))?;
            configure_threads(common.jobs)?;
            cmd_sweep(&common, &model, &train, &splits)
        }
        Command::Eval {
            common,
            model,
            checkpoint,
        } => {
            let file = RunConfig::load(common.config_path.as_ref())?;
            let common = common.overlay(file.common);
            let model = model.overlay(file.model);
            configure_threads(common.jobs)?;
            cmd_eval(&common, &model, &checkpoint)
        }
        Command::Gradcheck {
            seed,
            eps,
            max_elements,
            corrupt_param,
        } => cmd_gradcheck(seed, eps, max_elements, corrupt_param),
        Command::Report { path } => {
            print!("{}", report::render(&path)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn configure_threads(jobs: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = jobs {
        if n == 0 {
            return Err(usage("--jobs must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("{flag} is required")))
}

fn output_dir(common: &CommonArgs) -> anyhow::Result<PathBuf> {
    let mut dir = required(&common.out_dir, "--out")?.to_path_buf();
    if let Some(name) = &common.run_name {
        dir.push(name);
    }
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(common: &CommonArgs, args: &SynthArgs) -> anyhow::Result<ExitCode> {
    let cfg = args.build(common.seed.unwrap_or(0));
    cfg.validate().map_err(core)?;
    let out = output_dir(common)?;
    let cases = synth_dataset(&cfg).map_err(core)?;
    write_dataset(&cases, &out).map_err(core)?;
    let malignant = cases.iter().filter(|c| c.label == Label::Malignant).count();
    println!(
        "wrote {} cases ({} malignant, {} benign) to {}",
        cases.len(),
        malignant,
        cases.len() - malignant,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_training_setup(
    common: &CommonArgs,
    model: &ModelArgs,
    train: &TrainArgs,
) -> anyhow::Result<(ModelConfig, TrainConfig, PathBuf)> {
    let cfg = model.build();
    cfg.validate().map_err(core)?;
    let tcfg = train.build(common.seed.unwrap_or(0));
    tcfg.validate().map_err(core)?;
    let data = required(&common.data_dir, "--data")?.to_path_buf();
    Ok((cfg, tcfg, data))
}

fn write_cv(dir: &Path, result: &CvResult) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for fold in &result.folds {
        write_json(&dir.join(format!("fold{}.json", fold.fold_index)), fold)?;
    }
    write_json(&dir.join("summary.json"), &result.summary)
}

fn cmd_train(
    common: &CommonArgs,
    model: &ModelArgs,
    train: &TrainArgs,
    final_model: bool,
    no_cv: bool,
) -> anyhow::Result<ExitCode> {
    let (cfg, tcfg, data) = load_training_setup(common, model, train)?;
    let out = output_dir(common)?;
    let cases = load_dataset(&data).map_err(core)?;
    let prepared = prepare_cases(&cases, &cfg).map_err(core)?;
    log::info!(
        "{} cases, {} parameters, {} local / {} global blocks",
        prepared.len(),
        param_count(&cfg),
        cfg.local_blocks,
        cfg.global_blocks
    );
    if !no_cv {
        let result = run_cross_validation(&prepared, &cfg, &tcfg).map_err(core)?;
        write_cv(&out, &result)?;
        print!("{}", report::summary_table(&result.summary));
    }
    if final_model {
        let final_cfg = TrainConfig {
            seed: substream_seed(tcfg.seed, "final", 0),
            ..tcfg.clone()
        };
        let outcome = train_model(&prepared, &cfg, &final_cfg).map_err(core)?;
        let path = out.join("model.ckpt");
        save_checkpoint(&outcome.params, &cfg, &path).map_err(core)?;
        println!("saved {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(common: &CommonArgs, model: &ModelArgs, train: &TrainArgs, splits: &str) -> anyhow::Result<ExitCode> {
    let splits = parse_splits(splits)?;
    check_splits(&splits).map_err(core)?;
    let (base, tcfg, data) = load_training_setup(common, model, train)?;
    for &(l, g) in &splits {
        base.clone().with_split(l, g).validate().map_err(core)?;
    }
    let out = output_dir(common)?;
    let cases = load_dataset(&data).map_err(core)?;
    let prepared = prepare_cases(&cases, &base).map_err(core)?;
    // Splits are independent, so they may run side by side; each result is
    // the same as a serial run.
    let rows = splits
        .par_iter()
        .map(|&(l, g)| {
            let cfg = base.clone().with_split(l, g);
            log::info!("split {l} local / {g} global");
            Ok(SweepRow {
                local_blocks: l,
                global_blocks: g,
                result: run_cross_validation(&prepared, &cfg, &tcfg)?,
            })
        })
        .collect::<mvt_core::Result<Vec<_>>>()
        .map_err(core)?;
    for row in &rows {
        write_cv(&out.join(format!("split_{}_{}", row.local_blocks, row.global_blocks)), &row.result)?;
    }
    let path = out.join("sweep.csv");
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    write_sweep_csv(&rows, file).map_err(core)?;
    print!("{}", report::render(&path)?);
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalMetrics {
    cases: usize,
    confusion: ConfusionMatrix,
    metrics: DerivedMetrics,
    auc: Option<f64>,
}

fn cmd_eval(common: &CommonArgs, model: &ModelArgs, checkpoint: &Path) -> anyhow::Result<ExitCode> {
    let data = required(&common.data_dir, "--data")?;
    let (params, cfg) = load_checkpoint(checkpoint).map_err(|e| anyhow!(e))?;
    if !model.is_empty() {
        let expected = model.build();
        if expected != cfg {
            bail!(
                "checkpoint {} does not match the requested model: checkpoint has image {} patch {} d_embed {} \
                 blocks {}+{}, requested image {} patch {} d_embed {} blocks {}+{}",
                checkpoint.display(),
                cfg.image_size,
                cfg.patch_size,
                cfg.d_embed,
                cfg.local_blocks,
                cfg.global_blocks,
                expected.image_size,
                expected.patch_size,
                expected.d_embed,
                expected.local_blocks,
                expected.global_blocks
            );
        }
    }
    let out = output_dir(common)?;
    let cases = load_dataset(data).map_err(|e| anyhow!(e))?;
    let prepared = prepare_cases(&cases, &cfg).map_err(|e| anyhow!(e))?;
    let preds = evaluate(&params, &cfg, &prepared).map_err(|e| anyhow!(e))?;

    let path = out.join("predictions.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["case_id", "score", "pred", "label"])?;
    for p in &preds {
        w.write_record([p.case_id.clone(), format!("{:.6}", p.score), p.pred.to_string(), p.label.to_string()])?;
    }
    w.flush()?;

    let labels: Vec<u8> = preds.iter().map(|p| p.label).collect();
    let cm = confusion(&preds.iter().map(|p| p.pred).collect::<Vec<_>>(), &labels)?;
    let auc = if labels.contains(&0) && labels.contains(&1) {
        Some(empirical_auc(&preds.iter().map(|p| p.score).collect::<Vec<_>>(), &labels)?)
    } else {
        None
    };
    let metrics = EvalMetrics {
        cases: preds.len(),
        confusion: cm,
        metrics: derived_metrics(&cm),
        auc,
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    println!(
        "{} cases  accuracy {}  auc {}",
        metrics.cases,
        report::fmt_opt(metrics.metrics.accuracy, 4),
        report::fmt_opt(metrics.auc, 4)
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, eps: f64, max_elements: usize, corrupt: Option<String>) -> anyhow::Result<ExitCode> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(usage(format!("--eps must be in (0, 1), got {eps}")));
    }
    if eps > 1e-3 {
        eprintln!("note: eps {eps} is coarse; the error below is a diagnostic only");
    }
    let gcfg = GradCheckConfig {
        eps,
        max_elements_per_tensor: max_elements.max(1),
        seed,
        corrupt_param: corrupt,
    };
    let report = toy_gradient_check(seed, &gcfg).map_err(|e| anyhow!(e))?;
    println!(
        "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}, {} elements checked)",
        report.max_relative_error,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric,
        report.elements_checked
    );
    if report.max_relative_error < GRADCHECK_TOLERANCE {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "gradient check failed: {} exceeds tolerance {GRADCHECK_TOLERANCE:e} at {}",
            report.max_relative_error, report.worst_param
        );
        Ok(ExitCode::FAILURE)
    }
}

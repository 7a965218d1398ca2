use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gpframe::data::{load_inputs, save_dataset, save_predictions, synthesize_glacier};
use gpframe_cli::model::read_document;
use gpframe_cli::pipeline::{self, EvalSet};
use gpframe_cli::{CliError, Fitted, PipelineConfig};

/// Target column written by `synth`.
const SYNTH_TARGET: &str = "elev_change";

#[derive(Parser, Debug)]
#[command(name = "gpframe", version, about = "Gaussian-process regression pipeline")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Allow evaluation on the held-out test split.
    #[arg(long, global = true)]
    unlock_test: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the configured model; writes model.json and train_report.json.
    Fit,
    /// Predict at the inputs of a CSV file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to <out-dir>/predictions.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics for one or more models (and the configured baselines).
    Eval {
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        /// train, validation or test.
        #[arg(long, default_value = "validation")]
        split: String,
        /// Evaluate on this labelled CSV instead of a split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Residuals, posterior sample paths, gradient check and self-check.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "validation")]
        split: String,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Feature to vary along the sample-path slice (default: the first).
        #[arg(long)]
        feature: Option<String>,
    },
    /// Write the synthetic glacier dataset.
    Synth {
        #[arg(long, default_value_t = 20_000)]
        n: usize,
        /// Defaults to <out-dir>/glacier.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// k-NN and linear regression under the config's split and transforms.
    Baseline {
        #[arg(long, default_value = "validation")]
        split: String,
    },
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    cfg.apply_seed(cli.seed);
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<Fitted, CliError> {
    Fitted::from_document(read_document(path)?)
}

fn eval_data(fitted: &Fitted, split: &str, data: &Option<PathBuf>, unlock: bool) -> Result<(EvalSet, gpframe::data::Dataset), CliError> {
    match data {
        Some(p) => Ok((EvalSet::External, pipeline::external_rows(&fitted.doc, p)?)),
        None => {
            let set = EvalSet::parse(split)?;
            Ok((set, pipeline::eval_rows(&fitted.doc, set, unlock)?))
        }
    }
}

fn run(cli: &Cli) -> Result<String, CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    }
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", cli.out_dir.display())))?;
    let out = |name: &str| cli.out_dir.join(name);
    match &cli.command {
        Command::Fit => {
            let cfg = config(cli)?;
            let (fitted, _) = pipeline::fit(&cfg)?;
            write(&out("model.json"), &fitted.to_json())?;
            let mut report = serde_json::to_string_pretty(&fitted.doc.report).expect("report serializes");
            report.push('\n');
            write(&out("train_report.json"), &report)?;
            Ok(format!(
                "fitted {} ({} mode, {} training rows) -> {}",
                fitted.doc.name,
                fitted.doc.report.mode,
                fitted.doc.report.n_train,
                out("model.json").display()
            ))
        }
        Command::Predict { model, input, out: dest } => {
            let fitted = load_model(model)?;
            let cfg = &fitted.doc.config;
            let table = load_inputs(input, &fitted.doc.features, &cfg.data.row_id)
                .map_err(|e| CliError::Data(format!("input does not match the model schema: {e}")))?;
            let p = fitted.predict_raw(&table.features)?;
            let rows = fitted.prediction_rows(&table.row_ids, &p)?;
            let dest = dest.clone().unwrap_or_else(|| out("predictions.csv"));
            save_predictions(&dest, &rows)?;
            Ok(format!("{} predictions ({} input rows dropped) -> {}", rows.len(), table.dropped, dest.display()))
        }
        Command::Eval { model, split, data } => {
            let models = model.iter().map(|m| load_model(m)).collect::<Result<Vec<_>, _>>()?;
            let mut set = EvalSet::External;
            let mut rows = Vec::new();
            for m in &models {
                let (s, r) = eval_data(m, split, data, cli.unlock_test)?;
                set = s;
                rows.push(r);
            }
            let report = pipeline::evaluate(&models, &rows, set)?;
            let eval = &models[0].doc.config.eval;
            write(&out(&eval.report), &report.to_json())?;
            write(&out(&eval.table), &report.table)?;
            Ok(report.table)
        }
        Command::Diagnose { model, split, data, feature } => {
            let fitted = load_model(model)?;
            let (set, rows) = eval_data(&fitted, split, data, cli.unlock_test)?;
            let d = pipeline::diagnose(&fitted, &rows, set, feature.as_deref())?;
            let mut text = serde_json::to_string_pretty(&d).expect("diagnostics serialize");
            text.push('\n');
            write(&out("diagnostics.json"), &text)?;
            Ok(format!(
                "coverage95 {:.3}, standardized std {:.3}, gradients {}, self-check {}",
                d.residuals.coverage95,
                d.residuals.standardized_std,
                if d.gradients.all_pass { "pass" } else { "FLAGGED" },
                if d.self_check.passed { "pass" } else { "fail" }
            ))
        }
        Command::Synth { n, out: dest } => {
            if *n == 0 {
                return Err(CliError::Config("--n must be positive".into()));
            }
            let ds = synthesize_glacier(*n, cli.seed.unwrap_or(0));
            let dest = dest.clone().unwrap_or_else(|| out("glacier.csv"));
            save_dataset(&dest, &ds, SYNTH_TARGET)?;
            Ok(format!("{n} rows -> {}", dest.display()))
        }
        Command::Baseline { split } => {
            let cfg = config(cli)?;
            let report = pipeline::baseline_report(&cfg, EvalSet::parse(split)?, cli.unlock_test)?;
            write(&out("baseline_report.json"), &report.to_json())?;
            write(&out("baseline_report.txt"), &report.table)?;
            Ok(report.table)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => {
            println!("{}", msg.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}


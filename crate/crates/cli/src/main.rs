use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use txloc::Variant;
use txloc_cli::commands::{cmd_eval, cmd_generate, cmd_power_fit, cmd_train, EvalOptions};
use txloc_cli::config::{ExperimentConfig, ModelKind, SweepAxis};
use txloc_cli::{error_json, plot};

#[derive(Parser)]
#[command(name = "txloc", version, about = "Multi-transmitter localization from sparse RSS sensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Thresholds {
    /// Matching distance threshold, pixels.
    #[arg(long)]
    threshold_px: Option<f64>,
    /// Detector confidence threshold.
    #[arg(long)]
    conf: Option<f64>,
    /// NMS IoU threshold.
    #[arg(long)]
    nms: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Generate one test split per value of this axis.
        #[arg(long, value_enum)]
        sweep: Option<SweepAxis>,
    },
    /// Train models on `<dataset>/train`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        /// Models to train, in pipeline order; defaults to the config list.
        #[arg(long, value_enum, value_delimiter = ',')]
        model: Vec<ModelKind>,
        /// Existing checkpoints (files or run directories), e.g. the
        /// sen2peak a detector is trained behind.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Evaluate checkpoints on the test split(s) of a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        thresholds: Thresholds,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Detection variant; both are evaluated when omitted.
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, value_enum)]
        sweep: Option<SweepAxis>,
        /// Pass ground truth through as predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Fit the neighbor power correction on the training split.
    PowerFit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        thresholds: Thresholds,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value = "detector")]
        variant: Variant,
        /// Fit on true locations instead of localizer output.
        #[arg(long)]
        oracle: bool,
    },
    /// Render SVG figures from report.csv files and per-sample dumps.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.display().to_string();
    }
    Ok(cfg)
}

fn apply_thresholds(cfg: &mut ExperimentConfig, t: &Thresholds) {
    if let Some(v) = t.threshold_px {
        cfg.eval.threshold_px = v;
    }
    if let Some(v) = t.conf {
        cfg.thresholds.conf = v;
    }
    if let Some(v) = t.nms {
        cfg.thresholds.nms = v;
    }
}

fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    Ok(match cli.command {
        Command::Generate { common, sweep } => {
            let cfg = load_config(&common)?;
            json!(cmd_generate(&cfg, sweep, cfg.out.as_ref())?)
        }
        Command::Train { common, dataset, model, checkpoint } => {
            let cfg = load_config(&common)?;
            let models = if model.is_empty() { cfg.models.clone() } else { model };
            json!({ "checkpoints": cmd_train(&cfg, &dataset, &models, &checkpoint, cfg.out.as_ref())? })
        }
        Command::Eval { common, thresholds, dataset, checkpoint, variant, sweep, oracle } => {
            let mut cfg = load_config(&common)?;
            apply_thresholds(&mut cfg, &thresholds);
            let variants = variant.map(|v| vec![v]).unwrap_or_else(|| vec![Variant::Detector, Variant::SimplePeak]);
            let opts = EvalOptions { variants, sweep, oracle };
            json!(cmd_eval(&cfg, &dataset, &checkpoint, &opts, cfg.out.as_ref())?)
        }
        Command::PowerFit { common, thresholds, dataset, checkpoint, variant, oracle } => {
            let mut cfg = load_config(&common)?;
            apply_thresholds(&mut cfg, &thresholds);
            json!(cmd_power_fit(&cfg, &dataset, &checkpoint, variant, oracle, cfg.out.as_ref())?)
        }
        Command::Plot { common, inputs } => {
            let cfg = load_config(&common)?;
            json!({ "figures": plot::cmd_plot(&inputs, cfg.out.as_ref())? })
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let v = json!({ "error": { "kind": "usage", "message": e.to_string().trim(), "chain": [] } });
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}

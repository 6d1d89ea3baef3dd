use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use intent_forecast::forecaster::ModelTag;
use intent_forecast::motion_states::SubMachine;
use intent_forecast_cli::commands::{self, ClassifierData, LabelledInputs};
use intent_forecast_cli::config::RunConfig;
use intent_forecast_cli::dataset::Dataset;
use intent_forecast_cli::error::{CliError, CliResult};
use intent_forecast_cli::models::ModelSet;
use intent_forecast_cli::{evaluate_and_report, forecast, report, run_pipeline};

#[derive(Parser)]
#[command(
    name = "intent-forecast",
    version,
    about = "Probabilistic cyclist trajectory forecasting pipeline"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (config key `run_dir`).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Dataset directory (config key `data_dir`).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Global seed (config key `seed`); INTENT_FORECAST_SEED wins over both.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config field, e.g. `--set forecaster.train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Number of scenes (config key `synth.scenes`).
        #[arg(long)]
        scenes: Option<usize>,
        /// Position noise in metres (config key `synth.noise_sigma`).
        #[arg(long)]
        noise: Option<f64>,
        /// Also write mask PNGs.
        #[arg(long)]
        masks: bool,
    },
    /// Train a classifier, a forecaster or the baseline.
    Train {
        #[command(subcommand)]
        target: TrainTarget,
    },
    /// Fit the isotonic calibration of every classifier.
    Calibrate,
    /// Fit the per-horizon wait-state GMM.
    FitWait,
    /// Forecast the test split with the ensemble and the baseline.
    Forecast,
    /// Compute metrics and write tables and plots.
    Evaluate {
        /// Sharpness levels, e.g. `0.68,0.95,0.99`.
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
    },
    /// Rebuild tables and plots from an existing evaluation.
    Report,
    /// Every stage in order.
    Run {
        /// Pick each forecaster by grid search.
        #[arg(long)]
        sweep: bool,
    },
}

#[derive(Subcommand)]
enum TrainTarget {
    /// Classifier of one sub-state machine (wm, st, lr, ssm) or `all`.
    Classifier {
        #[arg(long)]
        machine: String,
    },
    /// Forecaster of one motion state; `wait` fits the GMM.
    Forecaster {
        #[arg(long)]
        state: String,
    },
    /// General model trained on all states.
    Baseline,
    /// Grid search for one state's forecaster (or `baseline`).
    Sweep {
        #[arg(long)]
        state: String,
    },
}

fn parse_machine(s: &str) -> CliResult<Vec<SubMachine>> {
    if s == "all" {
        return Ok(SubMachine::ALL.to_vec());
    }
    SubMachine::ALL
        .iter()
        .find(|m| m.as_str() == s)
        .map(|m| vec![*m])
        .ok_or_else(|| CliError::Usage(format!("unknown sub-machine '{s}' (wm, st, lr, ssm, all)")))
}

fn parse_tag(s: &str) -> CliResult<ModelTag> {
    s.parse()
        .map_err(|e: intent_forecast::Error| CliError::Usage(e.to_string()))
}

fn load_config(common: &Common, command: &Command) -> CliResult<RunConfig> {
    let mut overrides = Vec::new();
    let mut push = |k: &str, v: String| overrides.push(format!("{k}={v}"));
    if let Some(s) = common.seed {
        push("seed", s.to_string());
    }
    if let Some(d) = &common.run_dir {
        push("run_dir", serde_json::to_string(d).expect("path"));
    }
    if let Some(d) = &common.data_dir {
        push("data_dir", serde_json::to_string(d).expect("path"));
    }
    match command {
        Command::Synth {
            scenes,
            noise,
            masks,
        } => {
            if let Some(n) = scenes {
                push("synth.scenes", n.to_string());
            }
            if let Some(n) = noise {
                push("synth.noise_sigma", n.to_string());
            }
            if *masks {
                push("synth.masks", "true".into());
            }
        }
        Command::Evaluate { levels: Some(l) } => {
            push(
                "evaluation.levels",
                serde_json::to_string(l).expect("numbers"),
            );
        }
        _ => {}
    }
    overrides.extend(common.set.iter().cloned());
    RunConfig::load(common.config.as_deref(), &overrides)
}

fn execute(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli.common, &cli.command)?;
    if let Command::Synth {
        scenes: Some(0), ..
    } = cli.command
    {
        return Err(CliError::Usage("--scenes must be at least 1".into()));
    }
    cfg.snapshot()?;
    let dataset = || Dataset::load(&cfg.data_dir());
    match cli.command {
        Command::Synth { .. } => {
            commands::synth(&cfg)?;
        }
        Command::Train { target } => {
            // reject bad names before touching the data
            match &target {
                TrainTarget::Classifier { machine } => {
                    parse_machine(machine)?;
                }
                TrainTarget::Forecaster { state } | TrainTarget::Sweep { state } => {
                    parse_tag(state)?;
                }
                TrainTarget::Baseline => {}
            }
            let ds = dataset()?;
            match target {
                TrainTarget::Classifier { machine } => {
                    let machines = parse_machine(&machine)?;
                    let data = ClassifierData::build(&ds, &cfg)?;
                    for m in machines {
                        commands::train_classifier_cmd(&cfg, &data, m)?;
                    }
                }
                TrainTarget::Forecaster { state } => {
                    commands::train_forecaster_cmd(&cfg, &ds, parse_tag(&state)?)?;
                }
                TrainTarget::Baseline => {
                    commands::train_forecaster_cmd(&cfg, &ds, ModelTag::Baseline)?
                }
                TrainTarget::Sweep { state } => commands::sweep_cmd(&cfg, &ds, parse_tag(&state)?)?,
            }
        }
        Command::Calibrate => {
            let ds = dataset()?;
            let validation =
                LabelledInputs::build(&ds, &cfg, intent_forecast::data_synth::Split::Validation)?;
            commands::calibrate(&cfg, &validation)?;
        }
        Command::FitWait => commands::fit_wait(&cfg, &dataset()?)?,
        Command::Forecast => {
            let ds = dataset()?;
            let models = ModelSet::load(&cfg.models_dir())?;
            forecast::forecast(&cfg, &ds, &models)?;
        }
        Command::Evaluate { .. } => evaluate_and_report(&cfg)?,
        Command::Report => report(&cfg)?,
        Command::Run { sweep } => run_pipeline(&cfg, sweep)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! `spoofshield`: calibrate detectors, run attack scenarios, score logs,
//! plot them, and run Monte-Carlo campaigns. All inputs and outputs are
//! files; every command that writes leaves a `manifest.json` with content
//! hashes next to its outputs.

mod commands;
mod config;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use spoofshield_core::eval::RmseWindow;

use config::{ConfigError, DetectorChoice, Overrides};

#[derive(Parser)]
#[command(name = "spoofshield", version, about = "GPS spoofing detection and mitigation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed for the scenario, the campaign and detector training.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config value by dotted path, e.g. `fusion.t_hold=3`.
    #[arg(long = "set", value_name = "K=V")]
    set: Vec<String>,
    #[arg(long)]
    mitigation: Option<Switch>,
    /// lstm, cusum, iforest or all.
    #[arg(long)]
    detector: Option<DetectorChoice>,
    /// `none` to drop the configured attacks, or a JSON file with an attack list.
    #[arg(long, value_name = "none|PATH")]
    attack: Option<String>,
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            set: self.set.clone(),
            seed: self.seed,
            mitigation: self.mitigation.map(|s| matches!(s, Switch::On)),
            detector: self.detector,
            attack: self.attack.clone(),
        }
    }
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "SPOOFSHIELD_OUT", default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train and calibrate all detectors on attack-free scenarios.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run one scenario end to end and write its per-tick log.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Directory with detector model files [default: OUT/models].
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Score one or more run logs and aggregate them.
    Eval {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
        /// RMSE over the attack window only (default) or over the whole run.
        #[arg(long, default_value_t = false)]
        whole_run: bool,
    },
    /// Render a run log as SVG.
    Plot {
        log: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Monte-Carlo campaign over randomized attacks and roads.
    Campaign {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Use existing models instead of calibrating first.
        #[arg(long)]
        models: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Calibrate { cfg, out } => {
            let loaded = config::load(&cfg.config, &cfg.overrides())?;
            commands::cmd_calibrate(&loaded, &out.out)
        }
        Command::Run { cfg, out, models } => {
            let loaded = config::load(&cfg.config, &cfg.overrides())?;
            let models = models.unwrap_or_else(|| out.out.join("models"));
            commands::cmd_run(&loaded, &out.out, &models)
        }
        Command::Eval { logs, out, whole_run } => {
            let window = if whole_run { RmseWindow::All } else { RmseWindow::Attack };
            commands::cmd_eval(&logs, &out.out.join("eval"), &window)
        }
        Command::Plot { log, out } => commands::cmd_plot(&log, &out.out.join("plots")),
        Command::Campaign { cfg, out, models } => {
            let loaded = config::load(&cfg.config, &cfg.overrides())?;
            commands::cmd_campaign(&loaded, &out.out, models.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use seqrl_cli::commands::{self, RunDir, CONFIG_FILE};
use seqrl_cli::config::Config;
use seqrl_cli::plot;

#[derive(Parser)]
#[command(name = "seqrl", about = "Train and evaluate sequence-model RL agents on grid environments")]
struct Cli {
    /// Config file of `key = value` lines
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set dtqn.lr=1e-3` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Parent of timestamped run directories
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    /// Write into exactly this directory instead
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Online transformer Q-learning
    TrainDtqn(RunArgs),
    /// Online recurrent Q-learning baseline
    TrainDrqn(RunArgs),
    /// PPO behaviour policy
    TrainPpo(RunArgs),
    /// Offline Decision Transformer training on a dataset
    TrainDt {
        /// Dataset file (defaults to `dt.dataset`)
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Record episodes of a policy into a dataset file
    Collect {
        #[arg(long)]
        output: PathBuf,
        /// PPO checkpoint when `collect.policy = ppo`
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summary statistics of a dataset
    Stats { dataset: PathBuf },
    /// Evaluate a trained run
    Eval {
        /// Run directory holding config.txt and checkpoint.drlc
        #[arg(long)]
        run: PathBuf,
        /// Also write per-episode rows here
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Line chart of one metrics column
    Plot {
        csv: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Column to plot (defaults to `plot.column`)
        #[arg(long)]
        column: Option<String>,
        /// Moving-average window (defaults to `plot.window`)
        #[arg(long)]
        window: Option<usize>,
    },
}

fn run_dir(cfg: &Config, a: &RunArgs) -> Result<RunDir> {
    match &a.run_dir {
        Some(p) => RunDir::at(p),
        None => RunDir::create(&a.runs, cfg.seed()?),
    }
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = Config::load(cli.config.as_deref(), &[])?;
    if let Cmd::Eval { run, .. } = &cli.cmd {
        // the run's own settings first, then any file and flags given now
        cfg = Config::load(Some(&run.join(CONFIG_FILE)), &[])?;
        if let Some(extra) = &cli.config {
            let text = std::fs::read_to_string(extra)?;
            cfg.apply_text(&text, &extra.display().to_string())?;
        }
    }
    for (i, flag) in cli.set.iter().enumerate() {
        let (k, v) = flag
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set #{}: expected KEY=VALUE, got `{flag}`", i + 1))?;
        cfg.set(k.trim(), v, seqrl_cli::config::Origin::Flag { index: i + 1 })?;
    }
    match &cli.cmd {
        Cmd::TrainDtqn(a) => commands::train_dtqn_cmd(&cfg, &run_dir(&cfg, a)?),
        Cmd::TrainDrqn(a) => commands::train_drqn_cmd(&cfg, &run_dir(&cfg, a)?),
        Cmd::TrainPpo(a) => commands::train_ppo_cmd(&cfg, &run_dir(&cfg, a)?),
        Cmd::TrainDt { dataset, run } => {
            let path = match dataset {
                Some(p) => p.clone(),
                None if !cfg.str("dt.dataset").is_empty() => PathBuf::from(cfg.str("dt.dataset")),
                None => anyhow::bail!("train-dt needs --dataset or dt.dataset"),
            };
            commands::train_dt_cmd(&cfg, &path, &run_dir(&cfg, run)?)
        }
        Cmd::Collect { output, checkpoint } => commands::collect_cmd(&cfg, output, checkpoint.as_deref()),
        Cmd::Stats { dataset } => commands::stats_cmd(dataset),
        Cmd::Eval { run, metrics } => commands::eval_cmd(&cfg, run, metrics.as_deref()),
        Cmd::Plot {
            csv,
            output,
            column,
            window,
        } => {
            let column = column.clone().unwrap_or_else(|| cfg.str("plot.column").to_string());
            let window = match window {
                Some(w) => *w,
                None => cfg.usize("plot.window")?,
            };
            plot::plot(csv, &column, window, output)?;
            Ok(format!("wrote {}", output.display()))
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors, including unknown subcommands
    let cli = Cli::parse();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

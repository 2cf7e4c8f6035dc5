//! Subcommand bodies. Each returns a short human-readable summary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use seqrl::baselines::{train_drqn, train_ppo, DrqnModel, PpoModel, PpoPolicy};
use seqrl::dt::{evaluate_dt, train_dt, DtModel};
use seqrl::dtqn::{evaluate_q_agent, train_dtqn, DtqnModel};
use seqrl::envs::{evaluate_policy, EnvConfig, GridBasicExpert, HallwayOracle, Policy, RandomPolicy};
use seqrl::metrics::{EvalSummary, MetricsRow};
use seqrl::rng::{derive_seed, rng_from_seed};
use seqrl::tensorcore::ParamStore;
use seqrl::trajstore::{collect, dataset_stats, read_dataset, write_dataset, DatasetStats};

use crate::checkpoint::{load_into, read_checkpoint, write_checkpoint};
use crate::config::Config;
use crate::metrics::MetricsWriter;

pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.drlc";

/// Output directory of one training run.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// `<root>/<YYYYmmdd-HHMMSS>-seed<seed>`, with a numeric suffix if taken.
    pub fn create(root: &Path, seed: u64) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{stamp}-seed{seed}");
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        for i in 0.. {
            let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
            let path = root.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(RunDir { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        }
        unreachable!()
    }

    /// Use exactly `path`, which must not exist yet or be empty.
    pub fn at(path: &Path) -> Result<Self> {
        if path.exists() && fs::read_dir(path)?.next().is_some() {
            bail!("run directory {} is not empty", path.display());
        }
        fs::create_dir_all(path)?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn config(&self) -> PathBuf {
        self.path.join(CONFIG_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.path.join(METRICS_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path.join(CHECKPOINT_FILE)
    }
}

fn tail_mean(rows: &[MetricsRow], n: usize) -> Option<f64> {
    let rets: Vec<f64> = rows.iter().rev().filter_map(|r| r.ret).take(n).collect();
    seqrl::metrics::mean(&rets)
}

fn finish(run: &RunDir, store: &ParamStore, rows: &[MetricsRow], what: &str) -> Result<String> {
    write_checkpoint(&run.checkpoint(), store)?;
    let tail = tail_mean(rows, 100).map_or("n/a".to_string(), |m| format!("{m:.3}"));
    Ok(format!(
        "{what}: {} rows, mean return of last 100 episodes {tail}\nrun directory {}",
        rows.len(),
        run.path.display()
    ))
}

fn start(cfg: &Config, run: &RunDir) -> Result<MetricsWriter> {
    fs::write(run.config(), cfg.to_text())?;
    MetricsWriter::create(&run.metrics())
}

fn sink(w: &mut MetricsWriter) -> impl FnMut(&MetricsRow) -> seqrl::Result<()> + '_ {
    |row| w.write(row).map_err(|e| seqrl::Error::Io(e.to_string()))
}

pub fn train_dtqn_cmd(cfg: &Config, run: &RunDir) -> Result<String> {
    let env = cfg.env()?;
    let (model_cfg, q) = (cfg.dtqn_model()?, cfg.qlearn("dtqn")?);
    let mut w = start(cfg, run)?;
    let (_, store, log) = train_dtqn(&env, model_cfg, &q, &mut sink(&mut w))?;
    finish(run, &store, &log.rows, "train-dtqn")
}

pub fn train_drqn_cmd(cfg: &Config, run: &RunDir) -> Result<String> {
    let env = cfg.env()?;
    let (model_cfg, q) = (cfg.drqn_model()?, cfg.qlearn("drqn")?);
    let mut w = start(cfg, run)?;
    let (_, store, log) = train_drqn(&env, model_cfg, &q, &mut sink(&mut w))?;
    finish(run, &store, &log.rows, "train-drqn")
}

pub fn train_ppo_cmd(cfg: &Config, run: &RunDir) -> Result<String> {
    let env = cfg.env()?;
    let ppo = cfg.ppo()?;
    let mut w = start(cfg, run)?;
    let (_, store, log) = train_ppo(&env, &ppo, &mut sink(&mut w))?;
    let mut out = finish(run, &store, &log.rows, "train-ppo")?;
    if let (Some(a), Some(b)) = (log.updates.first(), log.updates.last()) {
        out.push_str(&format!("\npolicy entropy {:.3} -> {:.3}", a.entropy, b.entropy));
    }
    Ok(out)
}

fn check_dataset_env(env: &EnvConfig, tag: &str, frame_skip: u32) -> Result<()> {
    if tag != env.kind.tag() || frame_skip != env.frame_skip {
        bail!(
            "dataset was collected on {tag} with frame skip {frame_skip}; config has {} with frame skip {}",
            env.kind.tag(),
            env.frame_skip
        );
    }
    Ok(())
}

pub fn train_dt_cmd(cfg: &Config, dataset: &Path, run: &RunDir) -> Result<String> {
    let env = cfg.env()?;
    let ds = read_dataset(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    check_dataset_env(&env, &ds.header.env_tag, ds.header.frame_skip)?;
    let (model_cfg, tc) = (cfg.dt_model()?, cfg.dt_train()?);
    let mut w = start(cfg, run)?;
    let (_, store, log) = train_dt(&ds.trajectories, ds.header.n_actions, model_cfg, &tc, &mut sink(&mut w))?;
    write_checkpoint(&run.checkpoint(), &store)?;
    Ok(format!(
        "train-dt: {} epochs, final loss {:.5}\nrun directory {}",
        log.epoch_losses.len(),
        log.epoch_losses.last().copied().unwrap_or(f64::NAN),
        run.path.display()
    ))
}

/// Which network a checkpoint holds, read from its parameter-name prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentKind {
    Dtqn,
    Drqn,
    Ppo,
    Dt,
}

impl AgentKind {
    pub fn from_param_name(name: &str) -> Result<Self> {
        match name.split('.').next() {
            Some("dtqn") => Ok(AgentKind::Dtqn),
            Some("drqn") => Ok(AgentKind::Drqn),
            Some("ppo") => Ok(AgentKind::Ppo),
            Some("dt") => Ok(AgentKind::Dt),
            _ => Err(anyhow!("cannot tell which agent owns parameter `{name}`")),
        }
    }
}

/// A network rebuilt from a run's config and filled from its checkpoint.
pub enum Agent {
    Dtqn(DtqnModel, ParamStore),
    Drqn(DrqnModel, ParamStore),
    Ppo(PpoModel, ParamStore),
    Dt(DtModel, ParamStore),
}

pub fn load_agent(cfg: &Config, checkpoint: &Path) -> Result<Agent> {
    let entries = read_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let first = entries.first().ok_or_else(|| anyhow!("checkpoint is empty"))?;
    let kind = AgentKind::from_param_name(&first.0)?;
    let env = cfg.env()?.build()?;
    let (shape, n) = (env.obs_shape(), env.num_actions());
    // init values are overwritten; the rng only has to exist
    let mut rng = rng_from_seed(0);
    let mut store = ParamStore::new();
    let agent = match kind {
        AgentKind::Dtqn => Agent::Dtqn(DtqnModel::init(&mut store, shape, n, cfg.dtqn_model()?, &mut rng)?, store),
        AgentKind::Drqn => Agent::Drqn(DrqnModel::init(&mut store, shape, n, cfg.drqn_model()?, &mut rng)?, store),
        AgentKind::Ppo => Agent::Ppo(PpoModel::init(&mut store, shape, n, cfg.ppo()?.hidden, &mut rng)?, store),
        AgentKind::Dt => Agent::Dt(DtModel::init(&mut store, shape, n, cfg.dt_model()?, &mut rng)?, store),
    };
    let mut agent = agent;
    let store = match &mut agent {
        Agent::Dtqn(_, s) | Agent::Drqn(_, s) | Agent::Ppo(_, s) | Agent::Dt(_, s) => s,
    };
    load_into(store, &entries)?;
    Ok(agent)
}

pub fn collect_cmd(cfg: &Config, output: &Path, checkpoint: Option<&Path>) -> Result<String> {
    let env = cfg.env()?;
    let n = cfg.usize("collect.episodes")?;
    let seed = cfg.seed()?;
    let policy_name = cfg.str("collect.policy");
    if checkpoint.is_some() && policy_name != "ppo" {
        bail!("--checkpoint only applies to collect.policy = ppo (got `{policy_name}`)");
    }
    let ds = match policy_name {
        "expert" => collect(&mut GridBasicExpert, &env, n, seed)?,
        "oracle" => collect(&mut HallwayOracle::default(), &env, n, seed)?,
        "random" => {
            let a = env.build()?.num_actions();
            collect(&mut RandomPolicy { n_actions: a }, &env, n, seed)?
        }
        "ppo" => {
            let ck = checkpoint.ok_or_else(|| anyhow!("collect.policy = ppo needs --checkpoint"))?;
            let Agent::Ppo(model, store) = load_agent(cfg, ck)? else {
                bail!("{} is not a PPO checkpoint", ck.display());
            };
            let mut p = PpoPolicy {
                model: &model,
                store: &store,
                greedy: cfg.bool("collect.greedy"),
            };
            collect(&mut p, &env, n, seed)?
        }
        other => bail!("collect.policy must be expert, oracle, random or ppo; got `{other}`"),
    };
    write_dataset(output, &ds)?;
    let s = dataset_stats(&ds.trajectories)?;
    Ok(format!("wrote {}\n{}", output.display(), format_stats(&s)))
}

pub fn format_stats(s: &DatasetStats) -> String {
    format!(
        "count {}\nmean_return {}\nmin_return {}\nmax_return {}\nmean_length {}",
        s.count, s.mean_return, s.min_return, s.max_return, s.mean_length
    )
}

pub fn stats_cmd(dataset: &Path) -> Result<String> {
    let ds = read_dataset(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    Ok(format_stats(&dataset_stats(&ds.trajectories)?))
}

pub fn evaluate_agent(cfg: &Config, agent: &Agent) -> Result<EvalSummary> {
    let env = cfg.env()?;
    let episodes = cfg.usize("eval.episodes")?;
    let seed = derive_seed(cfg.seed()?, 0xE1);
    Ok(match agent {
        Agent::Dtqn(m, s) => evaluate_q_agent(m, s, &env, episodes, cfg.float("eval.epsilon"), seed)?,
        Agent::Drqn(m, s) => evaluate_q_agent(m, s, &env, episodes, cfg.float("eval.epsilon"), seed)?,
        Agent::Ppo(m, s) => {
            let mut p = PpoPolicy {
                model: m,
                store: s,
                greedy: false,
            };
            evaluate_policy(&mut p as &mut dyn Policy, &env, episodes, seed)?
        }
        Agent::Dt(m, s) => evaluate_dt(m, s, &env, &cfg.dt_rollout()?, episodes, seed)?,
    })
}

/// Per-episode rows of an evaluation (kills are only tracked in total).
pub fn eval_rows(s: &EvalSummary) -> Vec<MetricsRow> {
    let mut step = 0u64;
    s.returns
        .iter()
        .zip(&s.lengths)
        .enumerate()
        .map(|(i, (&r, &len))| {
            step += len as u64;
            MetricsRow {
                step,
                episode: i as u64,
                ret: Some(r),
                ..MetricsRow::default()
            }
        })
        .collect()
}

pub fn eval_cmd(cfg: &Config, run: &Path, metrics: Option<&Path>) -> Result<String> {
    let agent = load_agent(cfg, &run.join(CHECKPOINT_FILE))?;
    let s = evaluate_agent(cfg, &agent)?;
    if let Some(path) = metrics {
        let mut w = MetricsWriter::create(path)?;
        for row in eval_rows(&s) {
            w.write(&row)?;
        }
    }
    Ok(format!(
        "episodes {}\nmean_return {:.4}\nkills {}\ndeaths {}\nkd_ratio {:.4}",
        s.episodes(),
        s.mean_return(),
        s.kills,
        s.deaths,
        s.kd()
    ))
}

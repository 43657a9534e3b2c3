//! Command-line front end: config loading with flag overrides, per-seed
//! training runs, checkpoint evaluation and variant sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use compmeta_core::config::ExperimentConfig;
use compmeta_core::distributions::{Family, LatentSpec};
use compmeta_core::envs::{EnvFamily, EnvParams};
use compmeta_core::meta::{
    meta_test, write_curves, write_metrics, Agent, CurveRow, MetaError, MetaTestResult, Mode, Trainer,
};
use compmeta_core::nn::Checkpoint;

/// Overrides `output_dir` from the config file when set.
pub const OUTPUT_DIR_ENV: &str = "COMPMETA_OUTPUT_DIR";

const CHECKPOINT_FILE: &str = "checkpoint.json";
const CONFIG_FILE: &str = "config.yaml";
const EVAL_STREAM: u64 = 4;

#[derive(Debug, Parser)]
#[command(name = "compmeta", version, about = "Meta-RL with global and local context latents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one run per seed.
    Train(Overrides),
    /// Evaluate a trained run directory and write its adaptation curves.
    Eval(EvalArgs),
    /// Train every variant along one axis and summarize over seeds.
    Sweep(SweepArgs),
}

/// Flags shared by every command; each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Repeatable; replaces the seed list of the config.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub env: Option<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub tr: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Directory holding `config.yaml` and `checkpoint.json` of one seed.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Adaptation episodes per task; the config value when unset.
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Mode,
    Prior,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: Overrides,
    #[arg(long, value_enum)]
    pub axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
}

/// Loads the config and applies environment and flag overrides, in that order.
pub fn load_config(o: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::from_path(p)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    if !o.seeds.is_empty() {
        cfg.seeds = o.seeds.clone();
    }
    if let Some(m) = &o.mode {
        cfg.meta.mode = m.parse()?;
    }
    if let Some(e) = &o.env {
        let family: EnvFamily = e.parse()?;
        if family != cfg.env.family {
            cfg.env = EnvParams {
                family,
                ..cfg.env.clone()
            };
        }
    }
    if let Some(d) = &o.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(e) = o.epochs {
        cfg.meta.epochs = e;
    }
    if let Some(b) = o.beta {
        cfg.meta.beta = b;
    }
    if let Some(t) = o.tr {
        cfg.meta.tr = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed_{seed}"))
}

#[derive(Debug, Serialize)]
struct TimingRow {
    epoch: usize,
    seconds: f64,
}

/// Outcome of one seed's training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub seed: u64,
    pub dir: PathBuf,
    pub final_test_return: f64,
}

/// Trains one seed and writes config echo, metrics, timing, curves and
/// checkpoint into `dir`. On a numerical failure the last good parameters
/// are dumped to `failed_checkpoint.json` before the error is returned.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunSummary> {
    create_dir(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_yaml())?;
    let tasks = cfg.task_set(seed)?;
    tasks.save(&dir.join("tasks.json"))?;
    let mut trainer = Trainer::new(cfg.meta.clone(), &cfg.env, tasks.train, tasks.test, seed)?;
    let mut metrics = Vec::with_capacity(cfg.meta.epochs);
    let mut timing = Vec::with_capacity(cfg.meta.epochs);
    for _ in 0..cfg.meta.epochs {
        let start = Instant::now();
        match trainer.run_epoch() {
            Ok(row) => metrics.push(row),
            Err(e) => {
                if matches!(e, MetaError::NonFinite { .. }) {
                    let store = trainer.agent.to_store()?;
                    Checkpoint::new(seed, store).save(&dir.join("failed_checkpoint.json"))?;
                }
                write_metrics(&dir.join("metrics.csv"), &metrics)?;
                return Err(e.into());
            }
        }
        timing.push(TimingRow {
            epoch: trainer.epoch() - 1,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    write_metrics(&dir.join("metrics.csv"), &metrics)?;
    let mut w = csv::Writer::from_path(dir.join("timing.csv"))?;
    for t in &timing {
        w.serialize(t)?;
    }
    w.flush()?;
    Checkpoint::new(seed, trainer.agent.to_store()?).save(&dir.join(CHECKPOINT_FILE))?;
    let result = match trainer.last_test() {
        Some(r) => r.clone(),
        None => trainer.evaluate()?,
    };
    write_curves(&dir.join("curves.csv"), &CurveRow::from_result(seed, &result))?;
    Ok(RunSummary {
        seed,
        dir: dir.to_path_buf(),
        final_test_return: result.mean_final(),
    })
}

pub fn train(cfg: &ExperimentConfig) -> Result<Vec<RunSummary>> {
    create_dir(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join(CONFIG_FILE), cfg.to_yaml())
        .with_context(|| format!("cannot write to {}", cfg.output_dir.display()))?;
    cfg.seeds
        .iter()
        .map(|&seed| train_seed(cfg, seed, &seed_dir(&cfg.output_dir, seed)))
        .collect()
}

/// Rebuilds the agent of a run directory from its config and checkpoint.
pub fn load_run(run_dir: &Path) -> Result<(ExperimentConfig, Agent, u64)> {
    let cfg = ExperimentConfig::from_path(&run_dir.join(CONFIG_FILE))?;
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    if !ckpt_path.exists() {
        bail!("missing checkpoint {}", ckpt_path.display());
    }
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let mut agent = Agent::new(&cfg.meta, &cfg.env, &mut ChaCha8Rng::seed_from_u64(ckpt.seed))?;
    agent.load_store(&ckpt.networks)?;
    Ok((cfg, agent, ckpt.seed))
}

/// Meta-test of a fixed agent on the seed's held-out tasks with a dedicated
/// random stream, so repeated evaluations agree.
pub fn evaluate(cfg: &ExperimentConfig, agent: &Agent, seed: u64, episodes: usize) -> Result<MetaTestResult> {
    let tasks = cfg.task_set(seed)?;
    let set = if tasks.test.is_empty() { tasks.train } else { tasks.test };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    Ok(meta_test(agent, &set, episodes, &mut rng)?)
}

pub fn eval(args: &EvalArgs) -> Result<MetaTestResult> {
    let (cfg, agent, seed) = load_run(&args.run_dir)?;
    let episodes = args.episodes.unwrap_or(cfg.meta.test_episodes);
    if episodes == 0 {
        bail!("--episodes must be >= 1");
    }
    let result = evaluate(&cfg, &agent, seed, episodes)?;
    write_curves(
        &args.run_dir.join("eval_curves.csv"),
        &CurveRow::from_result(seed, &result),
    )?;
    Ok(result)
}

/// Latent layout used for each global-prior family in prior sweeps; every
/// variant has six latent dimensions.
pub fn prior_variant(name: &str) -> Result<LatentSpec> {
    let family: Family = name.parse().map_err(anyhow::Error::msg)?;
    Ok(match family {
        Family::Gaussian => LatentSpec::repeated(Family::Gaussian, 6, 1),
        Family::LogitNormal => LatentSpec::repeated(Family::LogitNormal, 6, 1),
        Family::Categorical => LatentSpec::repeated(Family::Categorical, 2, 3),
        Family::Dirichlet => LatentSpec::repeated(Family::Dirichlet, 2, 3),
    })
}

/// One row of a sweep summary table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: usize,
    pub mean_final_return: f64,
    pub stderr: f64,
}

/// Mean and standard error of the mean (zero for a single value).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn sweep(base: &ExperimentConfig, axis: Axis, values: &[String]) -> Result<Vec<SummaryRow>> {
    create_dir(&base.output_dir)?;
    let mut variants = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        match axis {
            Axis::Mode => cfg.meta.mode = v.parse::<Mode>()?,
            Axis::Prior => cfg.meta.global = prior_variant(v)?,
        }
        cfg.output_dir = base.output_dir.join(v);
        cfg.validate()?;
        variants.push((v.clone(), cfg));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, cfg) in variants {
        let runs = train(&cfg)?;
        let finals: Vec<f64> = runs.iter().map(|r| r.final_test_return).collect();
        let (mean, stderr) = mean_stderr(&finals);
        rows.push(SummaryRow {
            variant: name,
            seeds: finals.len(),
            mean_final_return: mean,
            stderr,
        });
    }
    let mut w = csv::Writer::from_path(base.output_dir.join("summary.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(o) => {
            let cfg = load_config(&o)?;
            for r in train(&cfg)? {
                println!(
                    "seed {}: final meta-test return {:.3} ({})",
                    r.seed,
                    r.final_test_return,
                    r.dir.display()
                );
            }
        }
        Command::Eval(a) => {
            let res = eval(&a)?;
            for (id, rets) in res.task_ids.iter().zip(&res.returns) {
                let cells: Vec<String> = rets.iter().map(|r| format!("{r:.3}")).collect();
                println!("task {id}: {}", cells.join(" "));
            }
            println!("mean final return {:.3}", res.mean_final());
        }
        Command::Sweep(s) => {
            let cfg = load_config(&s.overrides)?;
            println!("variant,seeds,mean_final_return,stderr");
            for r in sweep(&cfg, s.axis, &s.values)? {
                println!("{},{},{:.4},{:.4}", r.variant, r.seeds, r.mean_final_return, r.stderr);
            }
        }
    }
    Ok(())
}

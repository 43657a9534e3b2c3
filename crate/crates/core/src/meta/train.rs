use std::time::{Duration, Instant};

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::agent::Optimizers;
use super::metrics::{MetricsRow, METRICS_VERSION};
use super::rollout::{meta_test, traj_collect, MetaTestResult};
use super::{Agent, AgentGrads, LatentSchedule, MetaConfig, MetaError, Result};
use crate::distributions::{Noise, PosteriorParams};
use crate::encoders::{draw_spec_noise, kl_blocks_with_grad, local_init, sample_spec, LocalStepRecord, Transition};
use crate::envs::{EnvParams, TaskSpec};
use crate::sac::{actor_loss, critic_loss, hcat, value_loss, ReplayBuffer, SacBatch};

/// Replay data for one task's gradient step.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub contexts: Vec<Transition>,
    pub episodes: Vec<Vec<Transition>>,
    /// `(episode, step)` of each SAC row.
    pub rows: Vec<(usize, usize)>,
}

/// Every random draw a gradient step consumes.
#[derive(Debug, Clone)]
pub struct StepNoise {
    /// One entry for a latent shared by all rows, or one per row.
    pub global: Vec<Vec<Noise>>,
    /// Initial local latent per episode.
    pub local_init: Vec<Vec<Noise>>,
    /// `local[k][b]`: update `k` of episode `b`.
    pub local: Vec<Vec<Vec<Noise>>>,
    /// Policy reparameterization noise, one row per SAC row.
    pub policy: Array2<f64>,
}

/// Losses and KL terms of a gradient step, with the bookkeeping needed to
/// recompute the KL offline.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub value_loss: f64,
    pub kl_global: f64,
    /// Local KL summed over updates, averaged over trajectories.
    pub kl_local: f64,
    /// `beta * (kl_global + kl_local)`.
    pub kl_total: f64,
    pub global_posterior: Option<Vec<PosteriorParams>>,
    pub global_prior: Option<Vec<PosteriorParams>>,
    /// Per sampled trajectory, one record per local update.
    pub local_records: Vec<Vec<LocalStepRecord>>,
}

impl StepStats {
    fn is_finite(&self) -> bool {
        [
            self.critic_loss,
            self.actor_loss,
            self.value_loss,
            self.kl_global,
            self.kl_local,
            self.kl_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Samples contexts from the recency window and a batch of whole
/// trajectories, then `rows_per_episode` steps of each.
pub fn prepare_task_batch<R: Rng + ?Sized>(
    agent: &Agent,
    buffer: &ReplayBuffer,
    cfg: &MetaConfig,
    rng: &mut R,
) -> Result<TaskBatch> {
    let contexts = if agent.global.is_some() {
        buffer
            .sample_recent_contexts(cfg.context_size, cfg.recency_window, rng)?
            .transitions
    } else {
        Vec::new()
    };
    let episodes: Vec<Vec<Transition>> = buffer
        .sample_episodes(cfg.batch, rng)?
        .into_iter()
        .map(|e| e.transitions.clone())
        .collect();
    let mut rows = Vec::with_capacity(cfg.batch * cfg.rows_per_episode);
    for (b, ep) in episodes.iter().enumerate() {
        let n = cfg.rows_per_episode;
        if n <= ep.len() {
            let mut picks = index::sample(rng, ep.len(), n).into_vec();
            picks.sort_unstable();
            rows.extend(picks.into_iter().map(|t| (b, t)));
        } else {
            rows.extend((0..n).map(|_| (b, rng.random_range(0..ep.len()))));
        }
    }
    Ok(TaskBatch {
        contexts,
        episodes,
        rows,
    })
}

fn num_updates(agent: &Agent, batch: &TaskBatch) -> usize {
    match &agent.local {
        Some(enc) => batch
            .episodes
            .iter()
            .map(|e| enc.num_updates(e.len()))
            .max()
            .unwrap_or(0),
        None => 0,
    }
}

pub fn draw_step_noise<R: Rng + ?Sized>(agent: &Agent, batch: &TaskBatch, rng: &mut R) -> StepNoise {
    let global = match &agent.wiring.global_spec {
        Some(spec) => {
            let draws = match agent.wiring.schedule {
                LatentSchedule::PerStep => batch.rows.len(),
                _ => 1,
            };
            (0..draws).map(|_| draw_spec_noise(spec, rng)).collect()
        }
        None => Vec::new(),
    };
    let (local_init, local) = match &agent.local {
        Some(enc) => {
            let b = batch.episodes.len();
            let init = (0..b).map(|_| draw_spec_noise(enc.spec(), rng)).collect();
            let steps = (0..num_updates(agent, batch))
                .map(|_| (0..b).map(|_| draw_spec_noise(enc.spec(), rng)).collect())
                .collect();
            (init, steps)
        }
        None => (Vec::new(), Vec::new()),
    };
    let policy = Array2::from_shape_simple_fn((batch.rows.len(), agent.act_dim()), || {
        rng.sample::<f64, _>(StandardNormal)
    });
    StepNoise {
        global,
        local_init,
        local,
        policy,
    }
}

fn rows_matrix(batch: &TaskBatch, width: usize, f: impl Fn(&Transition) -> &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((batch.rows.len(), width));
    for (i, &(b, t)) in batch.rows.iter().enumerate() {
        out.row_mut(i)
            .assign(&ndarray::ArrayView1::from(f(&batch.episodes[b][t])));
    }
    out
}

/// One task's losses and gradients for fixed parameters, data and noise.
/// Gradients are added into `grads`.
pub fn task_step(
    agent: &Agent,
    cfg: &MetaConfig,
    batch: &TaskBatch,
    noise: &StepNoise,
    grads: &mut AgentGrads,
) -> Result<StepStats> {
    let n = batch.rows.len();
    let gd = agent.wiring.global_dim;
    let ld = agent.wiring.local_dim;
    let n_episodes = batch.episodes.len();

    // global latent
    let mut zg = Array2::<f64>::zeros((n, gd));
    let mut global = None;
    let mut kl_global = 0.0;
    if let (Some(enc), Some(spec)) = (&agent.global, &agent.wiring.global_spec) {
        let post = enc.infer(&batch.contexts)?;
        let prior = agent.global_prior();
        let (kl, gq, _) = kl_blocks_with_grad(&post.fused, &prior)?;
        kl_global = kl;
        let samples = noise
            .global
            .iter()
            .map(|nz| sample_spec(spec, &post.fused, nz))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for i in 0..n {
            let s = &samples[if samples.len() == 1 { 0 } else { i }];
            zg.row_mut(i).assign(&ndarray::ArrayView1::from(&s.value));
        }
        global = Some((post, prior, samples, gq));
    }

    // local latents re-inferred along the sampled trajectories
    let mut chain = None;
    let mut zl = Array2::<f64>::zeros((n, ld));
    if let Some(enc) = &agent.local {
        let mut z0 = Array2::zeros((n_episodes, ld));
        for (b, nz) in noise.local_init.iter().enumerate() {
            let st = local_init(enc.spec(), enc.config().hidden_dim, nz)?;
            z0.row_mut(b).assign(&ndarray::ArrayView1::from(&st.z));
        }
        let blocks: Vec<Array2<f64>> = (0..noise.local.len())
            .map(|k| {
                let mut x = Array2::zeros((n_episodes, enc.config().block_dim()));
                for (b, ep) in batch.episodes.iter().enumerate() {
                    x.row_mut(b).assign(&ndarray::ArrayView1::from(&enc.block_for(ep, k)));
                }
                x
            })
            .collect();
        let c = enc.run_chain(&blocks, &z0, &noise.local)?;
        let tr = enc.config().tr;
        for (i, &(b, t)) in batch.rows.iter().enumerate() {
            zl.row_mut(i).assign(&c.z(t / tr).row(b));
        }
        chain = Some(c);
    }

    let z = hcat(&[zg.view(), zl.view()]);
    let sac_batch = SacBatch {
        s: rows_matrix(batch, agent.obs_dim(), |t| &t.state),
        a: rows_matrix(batch, agent.act_dim(), |t| &t.action),
        r: Array1::from_iter(batch.rows.iter().map(|&(b, t)| batch.episodes[b][t].reward)),
        s2: rows_matrix(batch, agent.obs_dim(), |t| &t.next_state),
        done: Array1::from_iter(
            batch
                .rows
                .iter()
                .map(|&(b, t)| f64::from(u8::from(batch.episodes[b][t].done))),
        ),
        z,
    };
    let critic = critic_loss(&agent.critic, &sac_batch, &cfg.sac, &mut grads.critic)?;

    // encoder gradients: critic signal through the latents plus the KL terms
    let mut global_out = None;
    if let (Some(enc), Some((post, prior, samples, gq))) = (&agent.global, global) {
        let gz = critic.grad_z.slice(s![.., ..gd]);
        let mut gparams: Vec<Vec<f64>> = gq.iter().map(|g| g.iter().map(|v| cfg.beta * v).collect()).collect();
        let mut add = |d: Vec<Vec<f64>>| {
            for (a, b) in gparams.iter_mut().zip(d) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        };
        if samples.len() == 1 {
            add(samples[0].vjp(gz.sum_axis(Axis(0)).as_slice().expect("contiguous")));
        } else {
            for (i, s) in samples.iter().enumerate() {
                add(s.vjp(&gz.row(i).to_vec()));
            }
        }
        enc.backward(&post, &gparams, grads.global.as_mut().expect("global gradients"))?;
        global_out = Some((post.fused, prior));
    }

    let mut kl_local = 0.0;
    let mut local_records = Vec::new();
    if let (Some(enc), Some(c)) = (&agent.local, &chain) {
        let tr = enc.config().tr;
        let mut gz: Vec<Array2<f64>> = (0..c.len()).map(|_| Array2::zeros((n_episodes, ld))).collect();
        for (i, &(b, t)) in batch.rows.iter().enumerate() {
            let mut row = gz[t / tr].row_mut(b);
            row += &critic.grad_z.slice(s![i, gd..]);
        }
        let w = cfg.beta / n_episodes as f64;
        enc.chain_backward(c, &gz, w, grads.local.as_mut().expect("local gradients"))?;
        kl_local = c.kl_per_row().iter().sum::<f64>() / n_episodes as f64;
        local_records = (0..n_episodes).map(|b| c.records(b)).collect();
    }

    // policy and value losses on detached latents
    let input = hcat(&[sac_batch.s.view(), sac_batch.z.view()]);
    let (actor, sample) = actor_loss(
        &agent.actor,
        &agent.critic,
        input.view(),
        noise.policy.view(),
        &cfg.sac,
        &mut grads.actor,
    )?;
    let value = value_loss(&agent.critic, input.view(), &sample, &cfg.sac, &mut grads.critic.v)?;

    let (global_posterior, global_prior) = match global_out {
        Some((p, q)) => (Some(p), Some(q)),
        None => (None, None),
    };
    Ok(StepStats {
        critic_loss: critic.loss,
        actor_loss: actor,
        value_loss: value,
        kl_global,
        kl_local,
        kl_total: cfg.beta * (kl_global + kl_local),
        global_posterior,
        global_prior,
        local_records,
    })
}

/// Trained agent plus per-epoch metrics.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub metrics: Vec<MetricsRow>,
    /// Wall time of each epoch, kept apart from the metrics table.
    pub epoch_times: Vec<Duration>,
    pub last_test: MetaTestResult,
}

/// Stateful meta-training loop.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: MetaConfig,
    pub agent: Agent,
    opt: Optimizers,
    buffers: Vec<ReplayBuffer>,
    train_tasks: Vec<TaskSpec>,
    test_tasks: Vec<TaskSpec>,
    seed: u64,
    epoch: usize,
    collect_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    last_test: Option<MetaTestResult>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

impl Trainer {
    pub fn new(
        cfg: MetaConfig,
        env: &EnvParams,
        train_tasks: Vec<TaskSpec>,
        test_tasks: Vec<TaskSpec>,
        seed: u64,
    ) -> Result<Self> {
        if train_tasks.is_empty() {
            return Err(MetaError::NoTasks);
        }
        for t in train_tasks.iter().chain(&test_tasks) {
            t.validate()?;
            if t.params.obs_dim() != env.obs_dim() || t.params.action_dim() != env.action_dim() {
                return Err(MetaError::InvalidConfig {
                    field: "env",
                    message: format!("task {} does not match the environment dimensions", t.id),
                });
            }
        }
        let agent = Agent::new(&cfg, env, &mut stream(seed, 0))?;
        let opt = Optimizers::new(&agent, &cfg);
        let buffers = vec![ReplayBuffer::new(cfg.buffer_capacity); train_tasks.len()];
        Ok(Self {
            opt,
            agent,
            buffers,
            train_tasks,
            test_tasks,
            seed,
            epoch: 0,
            collect_rng: stream(seed, 1),
            train_rng: stream(seed, 2),
            eval_rng: stream(seed, 3),
            last_test: None,
            cfg,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn buffers(&self) -> &[ReplayBuffer] {
        &self.buffers
    }

    pub fn train_tasks(&self) -> &[TaskSpec] {
        &self.train_tasks
    }

    pub fn test_tasks(&self) -> &[TaskSpec] {
        &self.test_tasks
    }

    /// Collects `k` trajectories on every training task; returns the mean return.
    pub fn collect(&mut self) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for (task, buf) in self.train_tasks.iter().zip(&mut self.buffers) {
            for t in traj_collect(&self.agent, task, buf, self.cfg.k, &mut self.collect_rng)? {
                total += t.ret;
                count += 1;
            }
        }
        Ok(total / count.max(1) as f64)
    }

    /// One gradient step summed over the selected tasks, followed by the
    /// target update. Returns the per-task mean of the step statistics.
    pub fn train_iteration(&mut self) -> Result<StepStats> {
        let n = self.train_tasks.len();
        let tasks: Vec<usize> = match self.cfg.tasks_per_iter {
            Some(m) if m < n => {
                let mut v = index::sample(&mut self.train_rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut grads = self.agent.zero_grads();
        let mut mean: Option<StepStats> = None;
        for &i in &tasks {
            let batch = prepare_task_batch(&self.agent, &self.buffers[i], &self.cfg, &mut self.train_rng)?;
            let noise = draw_step_noise(&self.agent, &batch, &mut self.train_rng);
            let st = task_step(&self.agent, &self.cfg, &batch, &noise, &mut grads)?;
            if !st.is_finite() {
                return Err(MetaError::NonFinite {
                    what: "loss",
                    epoch: self.epoch,
                });
            }
            let w = 1.0 / tasks.len() as f64;
            mean = Some(match mean {
                None => StepStats {
                    critic_loss: w * st.critic_loss,
                    actor_loss: w * st.actor_loss,
                    value_loss: w * st.value_loss,
                    kl_global: w * st.kl_global,
                    kl_local: w * st.kl_local,
                    kl_total: w * st.kl_total,
                    global_posterior: None,
                    global_prior: None,
                    local_records: Vec::new(),
                },
                Some(mut m) => {
                    m.critic_loss += w * st.critic_loss;
                    m.actor_loss += w * st.actor_loss;
                    m.value_loss += w * st.value_loss;
                    m.kl_global += w * st.kl_global;
                    m.kl_local += w * st.kl_local;
                    m.kl_total += w * st.kl_total;
                    m
                }
            });
        }
        self.opt.step(&mut self.agent, &grads).map_err(|e| match e {
            MetaError::Nn(crate::nn::NnError::NonFinite(_)) => MetaError::NonFinite {
                what: "gradient",
                epoch: self.epoch,
            },
            other => other,
        })?;
        self.agent.critic.update_target(self.cfg.sac.tau)?;
        Ok(mean.expect("at least one task"))
    }

    /// Meta-test on the held-out tasks with the evaluation stream.
    pub fn evaluate(&mut self) -> Result<MetaTestResult> {
        let tasks = if self.test_tasks.is_empty() {
            &self.train_tasks
        } else {
            &self.test_tasks
        };
        meta_test(&self.agent, tasks, self.cfg.test_episodes, &mut self.eval_rng)
    }

    /// Collection, `iters_per_epoch` gradient steps, then meta-test.
    pub fn run_epoch(&mut self) -> Result<MetricsRow> {
        let train_return = self.collect()?;
        let iters = self.cfg.iters_per_epoch;
        let mut sums = [0.0; 6];
        for _ in 0..iters {
            let st = self.train_iteration()?;
            for (s, v) in sums.iter_mut().zip([
                st.kl_global,
                st.kl_local,
                st.kl_total,
                st.actor_loss,
                st.critic_loss,
                st.value_loss,
            ]) {
                *s += v / iters as f64;
            }
        }
        let last_epoch = self.epoch + 1 == self.cfg.epochs;
        let evaluated = self.last_test.is_none() || (self.epoch + 1).is_multiple_of(self.cfg.eval_every) || last_epoch;
        if evaluated {
            self.last_test = Some(self.evaluate()?);
        }
        let test_return = self.last_test.as_ref().expect("evaluated at least once").mean_final();
        let row = MetricsRow {
            version: METRICS_VERSION,
            seed: self.seed,
            epoch: self.epoch,
            train_return,
            test_return,
            evaluated,
            kl_global: sums[0],
            kl_local: sums[1],
            kl_total: sums[2],
            actor_loss: sums[3],
            critic_loss: sums[4],
            value_loss: sums[5],
        };
        if !row.is_finite() {
            return Err(MetaError::NonFinite {
                what: "metrics",
                epoch: self.epoch,
            });
        }
        self.epoch += 1;
        Ok(row)
    }

    pub fn last_test(&self) -> Option<&MetaTestResult> {
        self.last_test.as_ref()
    }
}

/// Runs `cfg.epochs` epochs from scratch.
pub fn meta_train(
    cfg: &MetaConfig,
    env: &EnvParams,
    train_tasks: Vec<TaskSpec>,
    test_tasks: Vec<TaskSpec>,
    seed: u64,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone(), env, train_tasks, test_tasks, seed)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut epoch_times = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let start = Instant::now();
        metrics.push(trainer.run_epoch()?);
        epoch_times.push(start.elapsed());
    }
    let last_test = match trainer.last_test.take() {
        Some(t) => t,
        None => trainer.evaluate()?,
    };
    Ok(TrainOutcome {
        agent: trainer.agent,
        metrics,
        epoch_times,
        last_test,
    })
}

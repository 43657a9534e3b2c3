use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Agent, LatentSchedule, Result};
use crate::distributions::PosteriorParams;
use crate::encoders::{draw_spec_noise, sample_spec_value, LocalStepRecord, Transition};
use crate::envs::{self, TaskSpec};
use crate::sac::{ActMode, ReplayBuffer};

/// Rollout record with the latent bookkeeping of every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: usize,
    pub transitions: Vec<Transition>,
    /// Posterior the global latent was drawn from.
    pub global_posterior: Vec<PosteriorParams>,
    /// The global latent in force at the first step.
    pub global_sample: Vec<f64>,
    /// True when no context was available and the prior was used.
    pub from_prior: bool,
    /// One record per local latent update.
    pub local_records: Vec<LocalStepRecord>,
    /// Policy latent `[z_global, z_local]` at each step.
    pub latents: Vec<Vec<f64>>,
    pub ret: f64,
}

/// Per-task adaptation returns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTestResult {
    pub task_ids: Vec<usize>,
    /// `returns[i][e]`: return of episode `e` on task `i`.
    pub returns: Vec<Vec<f64>>,
}

impl MetaTestResult {
    /// Return of the last adaptation episode per task.
    pub fn final_returns(&self) -> Vec<f64> {
        self.returns
            .iter()
            .map(|r| *r.last().expect("at least one episode"))
            .collect()
    }

    pub fn mean_final(&self) -> f64 {
        let f = self.final_returns();
        f.iter().sum::<f64>() / f.len().max(1) as f64
    }

    /// Mean return per episode index over tasks.
    pub fn curve(&self) -> Vec<f64> {
        let n = self.returns.first().map_or(0, Vec::len);
        (0..n)
            .map(|e| self.returns.iter().map(|r| r[e]).sum::<f64>() / self.returns.len() as f64)
            .collect()
    }
}

fn draw_global<R: Rng + ?Sized>(agent: &Agent, posterior: &[PosteriorParams], rng: &mut R) -> Result<Vec<f64>> {
    match &agent.wiring.global_spec {
        Some(spec) => Ok(sample_spec_value(spec, posterior, &draw_spec_noise(spec, rng))?),
        None => Ok(vec![0.0; agent.wiring.global_dim]),
    }
}

/// One episode. The global posterior comes from `contexts` (the prior when
/// empty); the local latent is refreshed every `tr` steps.
pub fn run_episode<R: Rng + ?Sized>(
    agent: &Agent,
    task: &TaskSpec,
    contexts: &[Transition],
    mode: ActMode,
    rng: &mut R,
) -> Result<Trajectory> {
    let from_prior = contexts.is_empty();
    let global_posterior = match &agent.global {
        Some(enc) if !from_prior => enc.infer(contexts)?.fused,
        _ => agent.global_prior(),
    };
    let mut zg = draw_global(agent, &global_posterior, rng)?;
    let global_sample = zg.clone();
    let mut local_state = match &agent.local {
        Some(enc) => Some(enc.init(&draw_spec_noise(enc.spec(), rng))?),
        None => None,
    };
    let horizon = task.horizon();
    let mut transitions: Vec<Transition> = Vec::with_capacity(horizon);
    let mut local_records = Vec::new();
    let mut latents = Vec::with_capacity(horizon);
    let (mut state, mut obs) = envs::reset(task);
    let mut ret = 0.0;
    for t in 0..horizon {
        if agent.wiring.schedule == LatentSchedule::PerStep && t > 0 {
            zg = draw_global(agent, &global_posterior, rng)?;
        }
        if let (Some(enc), Some(ls)) = (&agent.local, &mut local_state) {
            let tr = enc.config().tr;
            if t % tr == 0 {
                let block = enc.block_for(&transitions, t / tr);
                let noise = draw_spec_noise(enc.spec(), rng);
                let (next, posterior, prior) = enc.local_step(ls, &block, &noise)?;
                local_records.push(LocalStepRecord {
                    posterior,
                    prior,
                    z: next.z.clone(),
                    h: next.h.clone(),
                });
                *ls = next;
            }
        }
        let mut z = zg.clone();
        match &local_state {
            Some(ls) => z.extend(&ls.z),
            None => z.extend(std::iter::repeat_n(0.0, agent.wiring.local_dim)),
        }
        let action = agent.actor.act(&obs, &z, mode, rng)?;
        let (next, res) = envs::step(task, &state, &action)?;
        ret += res.reward;
        transitions.push(Transition {
            state: std::mem::replace(&mut obs, res.observation.clone()),
            action,
            reward: res.reward,
            next_state: res.observation,
            // fixed horizon: reaching it is truncation, not termination
            done: false,
        });
        latents.push(z);
        state = next;
    }
    Ok(Trajectory {
        task_id: task.id,
        transitions,
        global_posterior,
        global_sample,
        from_prior,
        local_records,
        latents,
        ret,
    })
}

/// Collects `k` exploration trajectories on `task` and stores them. The
/// context set starts empty on each call and grows with every episode.
pub fn traj_collect<R: Rng + ?Sized>(
    agent: &Agent,
    task: &TaskSpec,
    buffer: &mut ReplayBuffer,
    k: usize,
    rng: &mut R,
) -> Result<Vec<Trajectory>> {
    let mut contexts: Vec<Transition> = Vec::new();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let traj = run_episode(agent, task, &contexts, ActMode::Stochastic, rng)?;
        contexts.extend(traj.transitions.iter().cloned());
        buffer.add_episode(traj.transitions.clone())?;
        out.push(traj);
    }
    Ok(out)
}

/// Adaptation protocol with frozen parameters: episode 1 uses the prior,
/// later episodes condition on every transition of the earlier ones. Actions
/// are the squashed policy means.
pub fn meta_test<R: Rng + ?Sized>(
    agent: &Agent,
    tasks: &[TaskSpec],
    n_episodes: usize,
    rng: &mut R,
) -> Result<MetaTestResult> {
    let mut returns = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut contexts: Vec<Transition> = Vec::new();
        let mut per_task = Vec::with_capacity(n_episodes);
        for _ in 0..n_episodes {
            let traj = run_episode(agent, task, &contexts, ActMode::Deterministic, rng)?;
            contexts.extend(traj.transitions);
            per_task.push(traj.ret);
        }
        returns.push(per_task);
    }
    Ok(MetaTestResult {
        task_ids: tasks.iter().map(|t| t.id).collect(),
        returns,
    })
}

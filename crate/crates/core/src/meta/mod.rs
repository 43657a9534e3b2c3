//! Meta-training loop, trajectory collection with online latent updates,
//! the meta-test adaptation protocol and the ablation modes.

mod agent;
mod metrics;
mod rollout;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{DirichletFusion, DistError, Family, LatentSpec};
use crate::encoders::EncoderError;
use crate::envs::EnvError;
use crate::nn::{Activation, NnError};
use crate::sac::{SacConfig, SacError};

pub use agent::{Agent, AgentGrads};
pub use metrics::{read_metrics, write_curves, write_metrics, CurveRow, MetricsRow, CURVES_VERSION, METRICS_VERSION};
pub use rollout::{meta_test, run_episode, traj_collect, MetaTestResult, Trajectory};
pub use train::{
    draw_step_noise, meta_train, prepare_task_batch, task_step, StepNoise, StepStats, TaskBatch, TrainOutcome, Trainer,
};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sac(#[from] SacError),
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("unknown mode `{0}`")]
    UnknownMode(String),
    #[error("no training tasks")]
    NoTasks,
    #[error("non-finite {what} in epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },
    #[error("checkpoint does not match the configured networks: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MetaError>;

/// Model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Global encoder plus the recurrent local encoder with learned priors.
    Ocean,
    /// Local encoder replaced by a plain recurrence with fixed priors.
    OceanRnn,
    /// Local encoder only; the global latent is a constant zero vector.
    OceanNoGlobal,
    /// One latent per episode from the fused posterior, held fixed.
    Pearl,
    /// Fresh sample from the fixed per-episode posterior at every step.
    StochasticPearl,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Ocean,
        Mode::OceanRnn,
        Mode::OceanNoGlobal,
        Mode::Pearl,
        Mode::StochasticPearl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ocean => "ocean",
            Mode::OceanRnn => "ocean_rnn",
            Mode::OceanNoGlobal => "ocean_no_global",
            Mode::Pearl => "pearl",
            Mode::StochasticPearl => "stochastic_pearl",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = MetaError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MetaError::UnknownMode(s.to_string()))
    }
}

/// How the policy latent evolves within an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentSchedule {
    /// Global sample per episode, local latent updated every `tr` steps.
    Online,
    /// Single sample per episode.
    PerEpisode,
    /// Resampled every step from the per-episode posterior.
    PerStep,
}

/// Component wiring derived from a mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Wiring {
    /// Spec inferred by the context-fusing encoder, if any.
    pub global_spec: Option<LatentSpec>,
    pub local_spec: Option<LatentSpec>,
    pub local_deterministic: bool,
    pub schedule: LatentSchedule,
    /// Width of the `z_global` slot in the policy input.
    pub global_dim: usize,
    /// Width of the `z_local` slot in the policy input.
    pub local_dim: usize,
}

impl Wiring {
    pub fn z_dim(&self) -> usize {
        self.global_dim + self.local_dim
    }
}

fn default_mode() -> Mode {
    Mode::Ocean
}
fn default_k() -> usize {
    2
}
fn default_batch() -> usize {
    8
}
fn default_beta() -> f64 {
    0.1
}
fn default_tr() -> usize {
    5
}
fn default_epochs() -> usize {
    50
}
fn default_iters() -> usize {
    200
}
fn default_lr() -> f64 {
    3e-4
}
fn default_rows() -> usize {
    16
}
fn default_context_size() -> usize {
    64
}
fn default_capacity() -> usize {
    100_000
}
fn default_window() -> usize {
    20_000
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_recurrent() -> usize {
    64
}
fn default_test_episodes() -> usize {
    3
}
fn default_one() -> f64 {
    1.0
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_global() -> LatentSpec {
    LatentSpec::repeated(Family::Dirichlet, 3, 2)
}
fn default_local() -> LatentSpec {
    LatentSpec::repeated(Family::Categorical, 3, 2)
}

/// Training hyperparameters and latent layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Trajectories collected per task per epoch.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Trajectories sampled per task per gradient step.
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// KL coefficient.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Environment steps between local latent updates.
    #[serde(default = "default_tr")]
    pub tr: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_iters")]
    pub iters_per_epoch: usize,
    /// Tasks per gradient step; all training tasks when unset.
    #[serde(default)]
    pub tasks_per_iter: Option<usize>,
    /// SAC rows drawn from each sampled trajectory.
    #[serde(default = "default_rows")]
    pub rows_per_episode: usize,
    /// Transitions fed to the global encoder per gradient step.
    #[serde(default = "default_context_size")]
    pub context_size: usize,
    #[serde(default = "default_window")]
    pub recency_window: usize,
    #[serde(default = "default_capacity")]
    pub buffer_capacity: usize,
    #[serde(default = "default_lr")]
    pub lr_encoder: f64,
    #[serde(default = "default_lr")]
    pub lr_actor: f64,
    #[serde(default = "default_lr")]
    pub lr_critic: f64,
    #[serde(default)]
    pub sac: SacConfig,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_recurrent")]
    pub recurrent_hidden: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_one")]
    pub reward_scale: f64,
    #[serde(default)]
    pub fusion: DirichletFusion,
    #[serde(default = "default_global")]
    pub global: LatentSpec,
    /// May be empty, in which case only the global latent is used.
    #[serde(default = "default_local")]
    pub local: LatentSpec,
    /// Adaptation episodes per test task.
    #[serde(default = "default_test_episodes")]
    pub test_episodes: usize,
    /// Run meta-test every this many epochs (and always after the last).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    1
}

impl Default for MetaConfig {
    fn default() -> Self {
        serde_yaml::from_str("{}").expect("all fields default")
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, message: String| Err(MetaError::InvalidConfig { field, message });
        for (field, v) in [
            ("k", self.k),
            ("batch", self.batch),
            ("tr", self.tr),
            ("rows_per_episode", self.rows_per_episode),
            ("context_size", self.context_size),
            ("recency_window", self.recency_window),
            ("buffer_capacity", self.buffer_capacity),
            ("recurrent_hidden", self.recurrent_hidden),
            ("test_episodes", self.test_episodes),
            ("eval_every", self.eval_every),
        ] {
            if v < 1 {
                return bad(field, format!("must be >= 1, got {v}"));
            }
        }
        if self.tasks_per_iter == Some(0) {
            return bad("tasks_per_iter", "must be >= 1".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("must be finite and >= 0, got {}", self.beta));
        }
        for (field, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("reward_scale", self.reward_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(field, format!("must be positive, got {v}"));
            }
        }
        let s = &self.sac;
        if !(0.0..=1.0).contains(&s.gamma) {
            return bad("sac.gamma", format!("must lie in [0, 1], got {}", s.gamma));
        }
        if !(s.tau > 0.0 && s.tau <= 1.0) {
            return bad("sac.tau", format!("must lie in (0, 1], got {}", s.tau));
        }
        if !(s.alpha_ent >= 0.0 && s.alpha_ent.is_finite()) {
            return bad("sac.alpha_ent", format!("must be >= 0, got {}", s.alpha_ent));
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be >= 1".into());
        }
        if let Err(e) = self.global.validate() {
            return bad("global", e.to_string());
        }
        if !self.local.blocks.is_empty() {
            if let Err(e) = self.local.validate() {
                return bad("local", e.to_string());
            }
        } else if self.mode == Mode::OceanNoGlobal {
            return bad("local", "ocean_no_global needs a nonempty local spec".into());
        }
        Ok(())
    }
}

/// Component wiring for the configured mode.
pub fn apply_mode(cfg: &MetaConfig) -> Result<Wiring> {
    cfg.validate()?;
    let gd = cfg.global.total_dim();
    let ld = cfg.local.total_dim();
    let has_local = !cfg.local.blocks.is_empty();
    let joint = || {
        let mut blocks = cfg.global.blocks.clone();
        blocks.extend(cfg.local.blocks.iter().copied());
        LatentSpec { blocks }
    };
    Ok(match cfg.mode {
        Mode::Ocean | Mode::OceanRnn => Wiring {
            global_spec: Some(cfg.global.clone()),
            local_spec: has_local.then(|| cfg.local.clone()),
            local_deterministic: cfg.mode == Mode::OceanRnn,
            schedule: LatentSchedule::Online,
            global_dim: gd,
            local_dim: ld,
        },
        Mode::OceanNoGlobal => Wiring {
            global_spec: None,
            local_spec: Some(cfg.local.clone()),
            local_deterministic: false,
            schedule: LatentSchedule::Online,
            global_dim: gd,
            local_dim: ld,
        },
        Mode::Pearl | Mode::StochasticPearl => Wiring {
            global_spec: Some(joint()),
            local_spec: None,
            local_deterministic: false,
            schedule: if cfg.mode == Mode::Pearl {
                LatentSchedule::PerEpisode
            } else {
                LatentSchedule::PerStep
            },
            global_dim: gd + ld,
            local_dim: 0,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = MetaConfig::default();
        assert_eq!(c.global, LatentSpec::repeated(Family::Dirichlet, 3, 2));
        assert_eq!(c.local, LatentSpec::repeated(Family::Categorical, 3, 2));
        assert_eq!((c.k, c.batch, c.tr, c.beta), (2, 8, 5, 0.1));
        assert_eq!((c.epochs, c.iters_per_epoch), (50, 200));
        c.validate().unwrap();
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            let y = serde_yaml::to_string(&m).unwrap();
            assert_eq!(serde_yaml::from_str::<Mode>(&y).unwrap(), m);
        }
        assert!(matches!("frozen".parse::<Mode>(), Err(MetaError::UnknownMode(_))));
    }

    #[test]
    fn wiring_per_mode() {
        let mut c = MetaConfig::default();
        for m in Mode::ALL {
            c.mode = m;
            let w = apply_mode(&c).unwrap();
            assert_eq!(w.z_dim(), 12);
            match m {
                Mode::Pearl | Mode::StochasticPearl => {
                    assert!(w.local_spec.is_none());
                    assert_eq!(w.global_spec.unwrap().blocks.len(), 4);
                }
                Mode::OceanNoGlobal => assert!(w.global_spec.is_none()),
                Mode::OceanRnn => assert!(w.local_deterministic),
                Mode::Ocean => assert!(w.global_spec.is_some() && w.local_spec.is_some()),
            }
        }
        c.local = LatentSpec { blocks: vec![] };
        c.mode = Mode::Ocean;
        assert_eq!(apply_mode(&c).unwrap().z_dim(), 6);
        c.mode = Mode::OceanNoGlobal;
        assert!(apply_mode(&c).is_err());
    }

    #[test]
    fn validation_names_fields() {
        let mut c = MetaConfig::default();
        c.beta = -1.0;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("beta"), "{e}");
        let mut c = MetaConfig::default();
        c.tr = 0;
        assert!(c.validate().unwrap_err().to_string().contains("`tr`"));
    }
}

//! Latent-conditioned soft actor-critic: squashed-Gaussian actor, twin Q
//! networks, a value network with a Polyak-averaged target, and per-task
//! replay buffers.

mod buffer;
mod losses;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, Mlp, MlpCache, MlpConfig, NnError, Parameterized};

pub use buffer::{ContextSample, Episode, ReplayBuffer};
pub use losses::{actor_loss, critic_loss, value_loss, CriticOutput, SacBatch};

#[derive(Debug, Error)]
pub enum SacError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("episode of {len} transitions exceeds buffer capacity {capacity}")]
    EpisodeTooLong { len: usize, capacity: usize },
    #[error("batch misaligned: {0}")]
    Misaligned(String),
    #[error("tau must lie in (0, 1], got {0}")]
    BadTau(f64),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, SacError>;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    /// Fixed entropy coefficient.
    pub alpha_ent: f64,
    /// Use one Q network instead of the clipped pair.
    pub single_q: bool,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            alpha_ent: 0.2,
            single_q: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// `pi(a | s, z)`: tanh-squashed diagonal Gaussian with actions in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Actor {
    pub net: Mlp,
    obs_dim: usize,
    z_dim: usize,
    act_dim: usize,
}

/// Reparameterized batch of actions with everything the reverse pass needs.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub action: Array2<f64>,
    pub log_pi: Array1<f64>,
    cache: MlpCache,
    raw: Array2<f64>,
    eps: Array2<f64>,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        z_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut cfg = MlpConfig::new(obs_dim + z_dim, hidden, 2 * act_dim);
        cfg.activation = activation;
        Self {
            net: Mlp::new(cfg, rng),
            obs_dim,
            z_dim,
            act_dim,
        }
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.z_dim
    }

    fn log_std(raw: f64) -> f64 {
        raw.clamp(LOG_STD_MIN, LOG_STD_MAX)
    }

    /// Single action for a rollout.
    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], z: &[f64], mode: ActMode, rng: &mut R) -> Result<Vec<f64>> {
        if s.len() != self.obs_dim || z.len() != self.z_dim {
            return Err(SacError::Misaligned(format!(
                "actor expects {} state and {} latent entries, got {} and {}",
                self.obs_dim,
                self.z_dim,
                s.len(),
                z.len()
            )));
        }
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(s);
        x.extend_from_slice(z);
        let x = Array2::from_shape_vec((1, x.len()), x).expect("one row");
        let out = self.net.predict(x.view())?;
        let d = self.act_dim;
        Ok((0..d)
            .map(|j| {
                let mean = out[[0, j]];
                match mode {
                    ActMode::Deterministic => mean.tanh(),
                    ActMode::Stochastic => {
                        let e: f64 = rng.sample(StandardNormal);
                        (mean + Self::log_std(out[[0, d + j]]).exp() * e).tanh()
                    }
                }
            })
            .collect())
    }

    /// Actions `tanh(mean + std * eps)` and their log densities.
    pub fn sample(&self, input: ArrayView2<f64>, eps: ArrayView2<f64>) -> Result<PolicySample> {
        let d = self.act_dim;
        if eps.dim() != (input.nrows(), d) {
            return Err(SacError::Misaligned("policy noise shape".into()));
        }
        let (raw, cache) = self.net.forward(input)?;
        let n = input.nrows();
        let mut action = Array2::zeros((n, d));
        let mut log_pi = Array1::zeros(n);
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        for i in 0..n {
            let mut lp = 0.0;
            for j in 0..d {
                let ls = Self::log_std(raw[[i, d + j]]);
                let e = eps[[i, j]];
                let u = raw[[i, j]] + ls.exp() * e;
                action[[i, j]] = u.tanh();
                // ln(1 - tanh(u)^2) in a form that stays finite for large |u|
                let log_jac = 2.0 * (std::f64::consts::LN_2 - u - crate::nn::softplus(-2.0 * u));
                lp += -0.5 * e * e - ls - half_ln_2pi - log_jac;
            }
            log_pi[i] = lp;
        }
        Ok(PolicySample {
            action,
            log_pi,
            cache,
            raw,
            eps: eps.to_owned(),
        })
    }

    /// Reverse pass from gradients on the actions and on `log pi`. Returns
    /// the input gradient.
    pub fn backward(
        &self,
        sample: &PolicySample,
        grad_action: ArrayView2<f64>,
        grad_log_pi: ArrayView1<f64>,
        grads: &mut [f64],
    ) -> Result<Array2<f64>> {
        let d = self.act_dim;
        let n = sample.action.nrows();
        let mut g = Array2::zeros((n, 2 * d));
        for i in 0..n {
            for j in 0..d {
                let raw_ls = sample.raw[[i, d + j]];
                let std = Self::log_std(raw_ls).exp();
                let e = sample.eps[[i, j]];
                let a = sample.action[[i, j]];
                let da_du = 1.0 - a * a;
                // d log pi / du through the squashing correction
                let dlp_du = 2.0 * a;
                let du = grad_action[[i, j]] * da_du + grad_log_pi[i] * dlp_du;
                g[[i, j]] = du;
                let inside = (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_ls);
                g[[i, d + j]] = if inside { du * std * e - grad_log_pi[i] } else { 0.0 };
            }
        }
        Ok(self.net.backward(&sample.cache, g.view(), grads)?)
    }
}

/// Twin Q networks, a value network and its slow-moving target.
#[derive(Debug, Clone)]
pub struct Critic {
    pub q1: Mlp,
    pub q2: Mlp,
    pub v: Mlp,
    pub v_target: Mlp,
    obs_dim: usize,
    act_dim: usize,
    z_dim: usize,
}

/// Gradients of the critic networks (the target has none).
#[derive(Debug, Clone, PartialEq)]
pub struct CriticGrads {
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    pub v: Vec<f64>,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        z_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut qcfg = MlpConfig::new(obs_dim + act_dim + z_dim, hidden, 1);
        qcfg.activation = activation;
        let mut vcfg = MlpConfig::new(obs_dim + z_dim, hidden, 1);
        vcfg.activation = activation;
        let q1 = Mlp::new(qcfg.clone(), rng);
        let q2 = Mlp::new(qcfg, rng);
        let v = Mlp::new(vcfg, rng);
        Self {
            v_target: v.clone(),
            q1,
            q2,
            v,
            obs_dim,
            act_dim,
            z_dim,
        }
    }

    pub fn zero_grads(&self) -> CriticGrads {
        CriticGrads {
            q1: self.q1.zero_grad(),
            q2: self.q2.zero_grad(),
            v: self.v.zero_grad(),
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.obs_dim, self.act_dim, self.z_dim)
    }

    /// `target <- (1 - tau) * target + tau * v`.
    pub fn update_target(&mut self, tau: f64) -> Result<()> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(SacError::BadTau(tau));
        }
        self.v.polyak_into(&mut self.v_target, tau);
        Ok(())
    }
}

pub(crate) fn hcat(parts: &[ArrayView2<f64>]) -> Array2<f64> {
    concatenate(Axis(1), parts).expect("equal row counts")
}

pub(crate) fn column(a: &Array2<f64>) -> Array1<f64> {
    a.slice(s![.., 0]).to_owned()
}

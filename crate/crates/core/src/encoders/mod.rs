//! Context encoders: a global encoder that fuses per-context posteriors and
//! a recurrent local encoder with a learned conditional prior.

mod global;
mod latent;
mod local;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{DistError, PosteriorParams};
use crate::nn::NnError;

pub use global::{infer_global, GlobalEncoder, GlobalPosterior};
pub use latent::{
    draw_spec_noise, kl_blocks, kl_blocks_with_grad, params_from_raw, raw_grad, sample_spec, sample_spec_value,
    JointSample,
};
pub use local::{
    block_features, local_init, LocalChain, LocalEncoder, LocalEncoderConfig, LocalGrads, LocalState, LocalStepRecord,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("empty context set; use the prior instead")]
    EmptyContext,
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("step {0} carries no posterior/prior parameters")]
    MissingStep(usize),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

/// One environment step `(s, a, r, s')`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// True environment termination (never set on horizon truncation).
    #[serde(default)]
    pub done: bool,
}

impl Transition {
    pub fn feature_dim(obs_dim: usize, act_dim: usize) -> usize {
        2 * obs_dim + act_dim + 1
    }

    /// Flattened `[s, a, r * reward_scale, s']`.
    pub fn features(&self, reward_scale: f64) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 * self.state.len() + self.action.len() + 1);
        self.write_features(reward_scale, &mut f);
        f
    }

    pub(crate) fn write_features(&self, reward_scale: f64, out: &mut Vec<f64>) {
        out.extend(&self.state);
        out.extend(&self.action);
        out.push(self.reward * reward_scale);
        out.extend(&self.next_state);
    }

    pub fn is_finite(&self) -> bool {
        self.reward.is_finite()
            && self
                .state
                .iter()
                .chain(&self.action)
                .chain(&self.next_state)
                .all(|v| v.is_finite())
    }
}

/// `KL(q^G || p) + sum_t KL(q_t || prior_t)`.
pub fn joint_kl(
    global_posterior: &[PosteriorParams],
    global_prior: &[PosteriorParams],
    steps: &[LocalStepRecord],
) -> Result<f64> {
    Ok(kl_blocks(global_posterior, global_prior)? + local_kl_total(steps)?)
}

/// Sum over steps and local blocks of `KL(posterior_t || prior_t)`.
pub fn local_kl_total(steps: &[LocalStepRecord]) -> Result<f64> {
    let mut total = 0.0;
    for (t, s) in steps.iter().enumerate() {
        if s.posterior.is_empty() || s.posterior.len() != s.prior.len() {
            return Err(EncoderError::MissingStep(t));
        }
        total += kl_blocks(&s.posterior, &s.prior)?;
    }
    Ok(total)
}

use rand::Rng;

use super::{apply_mode, MetaConfig, MetaError, Result, Wiring};
use crate::distributions::PosteriorParams;
use crate::encoders::{GlobalEncoder, LocalEncoder, LocalEncoderConfig, LocalGrads};
use crate::envs::EnvParams;
use crate::nn::{Adam, ParamStore, Parameterized};
use crate::sac::{Actor, Critic, CriticGrads};

/// Every trainable component of one run.
#[derive(Debug, Clone)]
pub struct Agent {
    pub wiring: Wiring,
    pub global: Option<GlobalEncoder>,
    pub local: Option<LocalEncoder>,
    pub actor: Actor,
    pub critic: Critic,
    obs_dim: usize,
    act_dim: usize,
}

/// Gradients for every trainable network of an [`Agent`].
#[derive(Debug, Clone, PartialEq)]
pub struct AgentGrads {
    pub global: Option<Vec<f64>>,
    pub local: Option<LocalGrads>,
    pub actor: Vec<f64>,
    pub critic: CriticGrads,
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl AgentGrads {
    pub fn add(&mut self, other: &AgentGrads) {
        if let (Some(a), Some(b)) = (&mut self.global, &other.global) {
            add_into(a, b);
        }
        if let (Some(a), Some(b)) = (&mut self.local, &other.local) {
            add_into(&mut a.tran, &b.tran);
            add_into(&mut a.enc, &b.enc);
            add_into(&mut a.prior, &b.prior);
        }
        add_into(&mut self.actor, &other.actor);
        add_into(&mut self.critic.q1, &other.critic.q1);
        add_into(&mut self.critic.q2, &other.critic.q2);
        add_into(&mut self.critic.v, &other.critic.v);
    }

    /// Concatenated encoder gradients (global, then transition, inference
    /// and prior networks).
    pub fn encoder_flat(&self) -> Vec<f64> {
        let mut out = self.global.clone().unwrap_or_default();
        if let Some(l) = &self.local {
            out.extend(&l.tran);
            out.extend(&l.enc);
            out.extend(&l.prior);
        }
        out
    }

    /// Concatenated actor and critic gradients.
    pub fn policy_flat(&self) -> Vec<f64> {
        let mut out = self.actor.clone();
        out.extend(&self.critic.q1);
        out.extend(&self.critic.q2);
        out.extend(&self.critic.v);
        out
    }
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(cfg: &MetaConfig, env: &EnvParams, rng: &mut R) -> Result<Self> {
        let wiring = apply_mode(cfg)?;
        env.validate()?;
        let (obs_dim, act_dim) = (env.obs_dim(), env.action_dim());
        let global = wiring.global_spec.clone().map(|spec| {
            GlobalEncoder::new(
                obs_dim,
                act_dim,
                &cfg.hidden,
                cfg.activation,
                spec,
                cfg.fusion,
                cfg.reward_scale,
                rng,
            )
        });
        let local = wiring.local_spec.clone().map(|spec| {
            LocalEncoder::new(
                LocalEncoderConfig {
                    obs_dim,
                    act_dim,
                    tr: cfg.tr,
                    hidden_dim: cfg.recurrent_hidden,
                    mlp_hidden: cfg.hidden.clone(),
                    activation: cfg.activation,
                    reward_scale: cfg.reward_scale,
                    deterministic: wiring.local_deterministic,
                    feed_means: false,
                },
                spec,
                rng,
            )
        });
        let z_dim = wiring.z_dim();
        let actor = Actor::new(obs_dim, z_dim, act_dim, &cfg.hidden, cfg.activation, rng);
        let critic = Critic::new(obs_dim, act_dim, z_dim, &cfg.hidden, cfg.activation, rng);
        Ok(Self {
            wiring,
            global,
            local,
            actor,
            critic,
            obs_dim,
            act_dim,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn z_dim(&self) -> usize {
        self.wiring.z_dim()
    }

    /// Fixed priors of the context-fusing encoder's latent.
    pub fn global_prior(&self) -> Vec<PosteriorParams> {
        self.wiring.global_spec.as_ref().map(|s| s.priors()).unwrap_or_default()
    }

    pub fn zero_grads(&self) -> AgentGrads {
        AgentGrads {
            global: self.global.as_ref().map(|g| g.net.zero_grad()),
            local: self.local.as_ref().map(LocalEncoder::zero_grads),
            actor: self.actor.net.zero_grad(),
            critic: self.critic.zero_grads(),
        }
    }

    fn named(&self) -> Vec<(&'static str, &dyn Parameterized)> {
        let mut out: Vec<(&'static str, &dyn Parameterized)> = Vec::new();
        if let Some(g) = &self.global {
            out.push(("global", &g.net));
        }
        if let Some(l) = &self.local {
            out.push(("local.tran", &l.tran));
            out.push(("local.enc", &l.enc));
            out.push(("local.prior", &l.prior));
        }
        out.push(("actor", &self.actor.net));
        out.push(("q1", &self.critic.q1));
        out.push(("q2", &self.critic.q2));
        out.push(("v", &self.critic.v));
        out.push(("v_target", &self.critic.v_target));
        out
    }

    pub fn to_store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, net) in self.named() {
            store.insert(name, net)?;
        }
        Ok(store)
    }

    /// Loads every network from `store`; the store must hold exactly the
    /// networks this agent is wired with.
    pub fn load_store(&mut self, store: &ParamStore) -> Result<()> {
        let expected: Vec<&str> = self.named().into_iter().map(|(n, _)| n).collect();
        let mut got: Vec<&str> = store.names().collect();
        let mut want = expected.clone();
        want.sort_unstable();
        got.sort_unstable();
        if want != got {
            return Err(MetaError::Checkpoint(format!(
                "expected networks {want:?}, found {got:?}"
            )));
        }
        if let Some(g) = &mut self.global {
            store.load_into("global", &mut g.net)?;
        }
        if let Some(l) = &mut self.local {
            store.load_into("local.tran", &mut l.tran)?;
            store.load_into("local.enc", &mut l.enc)?;
            store.load_into("local.prior", &mut l.prior)?;
        }
        store.load_into("actor", &mut self.actor.net)?;
        store.load_into("q1", &mut self.critic.q1)?;
        store.load_into("q2", &mut self.critic.q2)?;
        store.load_into("v", &mut self.critic.v)?;
        store.load_into("v_target", &mut self.critic.v_target)?;
        Ok(())
    }
}

/// One Adam state per trainable network.
#[derive(Debug, Clone)]
pub(crate) struct Optimizers {
    global: Option<Adam>,
    local: Option<[Adam; 3]>,
    actor: Adam,
    q1: Adam,
    q2: Adam,
    v: Adam,
}

impl Optimizers {
    pub(crate) fn new(agent: &Agent, cfg: &MetaConfig) -> Self {
        Self {
            global: agent
                .global
                .as_ref()
                .map(|g| Adam::new(g.net.num_params(), cfg.lr_encoder)),
            local: agent.local.as_ref().map(|l| {
                [
                    Adam::new(l.tran.num_params(), cfg.lr_encoder),
                    Adam::new(l.enc.num_params(), cfg.lr_encoder),
                    Adam::new(l.prior.num_params(), cfg.lr_encoder),
                ]
            }),
            actor: Adam::new(agent.actor.net.num_params(), cfg.lr_actor),
            q1: Adam::new(agent.critic.q1.num_params(), cfg.lr_critic),
            q2: Adam::new(agent.critic.q2.num_params(), cfg.lr_critic),
            v: Adam::new(agent.critic.v.num_params(), cfg.lr_critic),
        }
    }

    /// Applies one update to every network. Non-finite gradients are rejected
    /// before any parameter changes.
    pub(crate) fn step(&mut self, agent: &mut Agent, g: &AgentGrads) -> Result<()> {
        let all_finite = g.encoder_flat().iter().chain(&g.policy_flat()).all(|v| v.is_finite());
        if !all_finite {
            return Err(MetaError::Nn(crate::nn::NnError::NonFinite("gradient")));
        }
        if let (Some(opt), Some(enc), Some(gr)) = (&mut self.global, &mut agent.global, &g.global) {
            opt.step(enc.net.params_mut(), gr)?;
        }
        if let (Some([ot, oe, op]), Some(enc), Some(gr)) = (&mut self.local, &mut agent.local, &g.local) {
            ot.step(enc.tran.params_mut(), &gr.tran)?;
            oe.step(enc.enc.params_mut(), &gr.enc)?;
            op.step(enc.prior.params_mut(), &gr.prior)?;
        }
        self.actor.step(agent.actor.net.params_mut(), &g.actor)?;
        self.q1.step(agent.critic.q1.params_mut(), &g.critic.q1)?;
        self.q2.step(agent.critic.q2.params_mut(), &g.critic.q2)?;
        self.v.step(agent.critic.v.params_mut(), &g.critic.v)?;
        Ok(())
    }
}

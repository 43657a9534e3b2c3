use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use compmeta_core::config::ExperimentConfig;
use compmeta_core::distributions::{Family, LatentSpec};
use compmeta_core::meta::{
    draw_step_noise, meta_test, prepare_task_batch, run_episode, task_step, traj_collect, Agent, MetaConfig, Mode,
    StepNoise, TaskBatch, Trainer,
};
use compmeta_core::nn::gradcheck::compare;
use compmeta_core::nn::{Activation, Parameterized};
use compmeta_core::sac::{ActMode, ReplayBuffer};

const SMALL: &str = "\
env: {family: velocity, horizon: 20}
train_tasks: 2
test_tasks: 2
hidden: [8, 8]
recurrent_hidden: 6
batch: 2
rows_per_episode: 6
context_size: 10
tr: 3
epochs: 2
iters_per_epoch: 3
";

fn small(mode: Mode) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_yaml_str(SMALL).unwrap();
    cfg.meta.mode = mode;
    cfg
}

fn trainer(cfg: &ExperimentConfig, seed: u64) -> Trainer {
    let tasks = cfg.task_set(seed).unwrap();
    Trainer::new(cfg.meta.clone(), &cfg.env, tasks.train, tasks.test, seed).unwrap()
}

/// A trainer with filled buffers plus one fixed batch and noise draw.
fn fixture(cfg: &ExperimentConfig, seed: u64) -> (Trainer, TaskBatch, StepNoise) {
    let mut t = trainer(cfg, seed);
    t.collect().unwrap();
    t.collect().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let batch = prepare_task_batch(&t.agent, &t.buffers()[0], &t.cfg, &mut rng).unwrap();
    let noise = draw_step_noise(&t.agent, &batch, &mut rng);
    (t, batch, noise)
}

fn encoder_params(agent: &Agent) -> Vec<f64> {
    let mut out = agent
        .global
        .as_ref()
        .map(|g| g.net.params().to_vec())
        .unwrap_or_default();
    if let Some(l) = &agent.local {
        out.extend(l.tran.params());
        out.extend(l.enc.params());
        out.extend(l.prior.params());
    }
    out
}

fn set_encoder_params(agent: &mut Agent, flat: &[f64]) {
    let mut rest = flat;
    let mut take = |dst: &mut [f64]| {
        let (head, tail) = rest.split_at(dst.len());
        dst.copy_from_slice(head);
        rest = tail;
    };
    if let Some(g) = &mut agent.global {
        take(g.net.params_mut());
    }
    if let Some(l) = &mut agent.local {
        take(l.tran.params_mut());
        take(l.enc.params_mut());
        take(l.prior.params_mut());
    }
    assert!(rest.is_empty());
}

fn uses_dirichlet(spec: &LatentSpec) -> bool {
    spec.blocks.iter().any(|b| b.family == Family::Dirichlet)
}

/// With `gamma = 0` the critic target is the reward, so the critic loss plus
/// the weighted KL is a function of the encoder parameters alone.
#[test]
fn encoder_gradients_match_finite_differences() {
    let modes = Mode::ALL;
    let locals = [
        Family::Gaussian,
        Family::Categorical,
        Family::Dirichlet,
        Family::LogitNormal,
    ];
    for draw in 0..20u64 {
        let mut cfg = small(modes[draw as usize % modes.len()]);
        cfg.meta.sac.gamma = 0.0;
        cfg.meta.activation = Activation::Tanh;
        cfg.meta.beta = 0.3;
        cfg.meta.local = LatentSpec::repeated(locals[(draw / 5) as usize % 4], 2, 2);
        if draw % 3 == 0 {
            cfg.meta.global = LatentSpec::repeated(Family::Gaussian, 3, 1);
        }
        let tol = if uses_dirichlet(&cfg.meta.global) || uses_dirichlet(&cfg.meta.local) {
            1e-3
        } else {
            1e-4
        };
        let (t, batch, noise) = fixture(&cfg, draw);
        let mut grads = t.agent.zero_grads();
        task_step(&t.agent, &t.cfg, &batch, &noise, &mut grads).unwrap();
        let analytic = grads.encoder_flat();
        let x = encoder_params(&t.agent);
        assert_eq!(x.len(), analytic.len());
        let mut probe = t.agent.clone();
        let report = compare(
            |p| {
                set_encoder_params(&mut probe, p);
                let mut g = probe.zero_grads();
                let st = task_step(&probe, &t.cfg, &batch, &noise, &mut g).unwrap();
                st.critic_loss + st.kl_total
            },
            &x,
            &analytic,
            1e-5,
        );
        assert!(report.passes(tol), "draw {draw} ({}): {report:?}", t.cfg.mode);
    }
}

#[test]
fn beta_changes_only_the_encoder_gradient_by_the_kl_term() {
    for mode in [Mode::Ocean, Mode::Pearl, Mode::OceanNoGlobal] {
        let mut cfg = small(mode);
        cfg.meta.activation = Activation::Tanh;
        let (mut t, batch, noise) = fixture(&cfg, 7);
        let beta = 0.25;
        let grads_at = |t: &Trainer, b: f64| {
            let mut c = t.cfg.clone();
            c.beta = b;
            let mut g = t.agent.zero_grads();
            task_step(&t.agent, &c, &batch, &noise, &mut g).unwrap();
            g
        };
        let with = grads_at(&t, beta);
        let without = grads_at(&t, 0.0);
        assert_eq!(with.policy_flat(), without.policy_flat(), "{mode}");
        let diff: Vec<f64> = with
            .encoder_flat()
            .iter()
            .zip(without.encoder_flat())
            .map(|(a, b)| a - b)
            .collect();
        assert!(diff.iter().any(|d| *d != 0.0));
        // the difference is beta times the gradient of the unweighted KL
        let x = encoder_params(&t.agent);
        let mut c = t.cfg.clone();
        c.beta = 1.0;
        let report = compare(
            |p| {
                set_encoder_params(&mut t.agent, p);
                let mut g = t.agent.zero_grads();
                let st = task_step(&t.agent, &c, &batch, &noise, &mut g).unwrap();
                beta * (st.kl_global + st.kl_local)
            },
            &x,
            &diff,
            1e-5,
        );
        assert!(report.passes(1e-3), "{mode}: {report:?}");
    }
}

fn episode(mode: Mode, with_context: bool) -> (Agent, compmeta_core::meta::Trajectory) {
    let cfg = small(mode);
    let t = trainer(&cfg, 3);
    let task = &t.train_tasks()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let contexts = if with_context {
        run_episode(&t.agent, task, &[], ActMode::Stochastic, &mut rng)
            .unwrap()
            .transitions
    } else {
        Vec::new()
    };
    let traj = run_episode(&t.agent, task, &contexts, ActMode::Stochastic, &mut rng).unwrap();
    (t.agent, traj)
}

#[test]
fn pearl_latent_is_constant_within_an_episode() {
    let (agent, traj) = episode(Mode::Pearl, true);
    assert_eq!(agent.wiring.local_dim, 0);
    assert!(traj.local_records.is_empty());
    let z0 = &traj.latents[0];
    for z in &traj.latents {
        assert_eq!(z, z0);
    }
}

#[test]
fn stochastic_pearl_resamples_from_a_fixed_posterior() {
    let (agent, traj) = episode(Mode::StochasticPearl, true);
    let distinct = traj.latents.windows(2).filter(|w| w[0] != w[1]).count();
    assert_eq!(distinct, traj.latents.len() - 1);
    assert!(traj.local_records.is_empty());
    assert_ne!(traj.global_posterior, agent.global_prior());
    assert_eq!(agent.wiring.local_dim, 0);
}

#[test]
fn no_global_mode_has_zero_global_latent_and_kl() {
    let (agent, traj) = episode(Mode::OceanNoGlobal, true);
    let gd = agent.wiring.global_dim;
    assert!(gd > 0);
    for z in &traj.latents {
        assert!(z[..gd].iter().all(|v| *v == 0.0));
    }
    let (t, batch, noise) = fixture(&small(Mode::OceanNoGlobal), 2);
    let mut g = t.agent.zero_grads();
    let st = task_step(&t.agent, &t.cfg, &batch, &noise, &mut g).unwrap();
    assert_eq!(st.kl_global, 0.0);
    assert!(st.kl_local > 0.0);
    assert!(batch.contexts.is_empty());
}

#[test]
fn rnn_mode_uses_uninformative_priors() {
    let (agent, traj) = episode(Mode::OceanRnn, false);
    let spec = agent.wiring.local_spec.as_ref().unwrap();
    for rec in &traj.local_records {
        assert_eq!(rec.prior, spec.priors());
    }
}

#[test]
fn local_updates_every_tr_steps() {
    for tr in [1, 3, 7] {
        let mut cfg = small(Mode::Ocean);
        cfg.meta.tr = tr;
        let t = trainer(&cfg, 0);
        let traj = run_episode(
            &t.agent,
            &t.train_tasks()[0],
            &[],
            ActMode::Stochastic,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(traj.local_records.len(), 20usize.div_ceil(tr), "tr {tr}");
        let ld = t.agent.wiring.local_dim;
        let gd = t.agent.wiring.global_dim;
        for (step, z) in traj.latents.iter().enumerate() {
            assert_eq!(&z[gd..gd + ld], traj.local_records[step / tr].z.as_slice());
        }
    }
}

#[test]
fn collection_appends_k_episodes_starting_from_the_prior() {
    let cfg = small(Mode::Ocean);
    let t = trainer(&cfg, 5);
    let mut buf = ReplayBuffer::new(1000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trajs = traj_collect(&t.agent, &t.train_tasks()[1], &mut buf, 2, &mut rng).unwrap();
    assert_eq!(buf.len(), 2 * 20);
    assert_eq!(buf.num_episodes(), 2);
    assert!(trajs[0].from_prior);
    assert_eq!(trajs[0].global_posterior, t.agent.global_prior());
    assert!(!trajs[1].from_prior);
    assert_ne!(trajs[1].global_posterior, t.agent.global_prior());
    assert!(trajs.iter().all(|tr| tr.task_id == t.train_tasks()[1].id));
}

#[test]
fn meta_test_protocol() {
    let cfg = small(Mode::Ocean);
    let t = trainer(&cfg, 4);
    let tasks = t.test_tasks().to_vec();
    let one = meta_test(&t.agent, &tasks, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(one.returns.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 1]);
    // episode 1 of a meta-test equals a prior-conditioned episode
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ep = run_episode(&t.agent, &tasks[0], &[], ActMode::Deterministic, &mut rng).unwrap();
    assert_eq!(one.returns[0][0], ep.ret);

    let a = meta_test(&t.agent, &tasks, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = meta_test(&t.agent, &tasks, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.curve().len(), 3);
    assert_eq!(a.task_ids, tasks.iter().map(|t| t.id).collect::<Vec<_>>());
}

#[test]
fn training_is_reproducible_per_seed() {
    let cfg = small(Mode::Ocean);
    let run = |seed| {
        let mut t = trainer(&cfg, seed);
        let rows: Vec<_> = (0..2).map(|_| t.run_epoch().unwrap()).collect();
        (rows, t.agent.to_store().unwrap())
    };
    let (a, pa) = run(11);
    let (b, pb) = run(11);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    let (c, _) = run(12);
    assert_ne!(a, c);
}

#[test]
fn one_training_step_is_deterministic() {
    let cfg = small(Mode::Ocean);
    let step = || {
        let mut t = trainer(&cfg, 1);
        t.collect().unwrap();
        let st = t.train_iteration().unwrap();
        (st, t.agent.to_store().unwrap())
    };
    assert_eq!(step(), step());
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let cfg = small(Mode::Ocean);
    let mut t = trainer(&cfg, 6);
    t.run_epoch().unwrap();
    let store = t.agent.to_store().unwrap();
    let dir = std::env::temp_dir().join(format!("compmeta-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("ckpt.json");
    compmeta_core::nn::Checkpoint::new(6, store).save(&path).unwrap();
    let loaded = compmeta_core::nn::Checkpoint::load(&path).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    let mut fresh = Agent::new(&cfg.meta, &cfg.env, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    fresh.load_store(&loaded.networks).unwrap();
    let tasks = t.test_tasks().to_vec();
    let a = meta_test(&t.agent, &tasks, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = meta_test(&fresh, &tasks, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);

    let mut other = small(Mode::Pearl).meta;
    other.mode = Mode::Pearl;
    let mut wrong = Agent::new(&other, &cfg.env, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(wrong.load_store(&loaded.networks).is_err());
}

#[test]
fn replay_batches_stay_within_one_task() {
    let cfg = small(Mode::Ocean);
    let mut t = trainer(&cfg, 8);
    t.collect().unwrap();
    assert!(t.buffers().iter().all(|b| b.num_episodes() == cfg.meta.k));
    // replaying the collection stream reproduces each task's buffer
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    rng.set_stream(1);
    for (task, buf) in t.train_tasks().iter().zip(t.buffers()) {
        let mut expect = ReplayBuffer::new(cfg.meta.buffer_capacity);
        traj_collect(&t.agent, task, &mut expect, cfg.meta.k, &mut rng).unwrap();
        let got: Vec<_> = buf.episodes().map(|e| e.transitions.clone()).collect();
        let want: Vec<_> = expect.episodes().map(|e| e.transitions.clone()).collect();
        assert_eq!(got, want);
    }
}

#[test]
fn invalid_meta_configs_name_the_field() {
    for (field, cfg) in [
        (
            "tr",
            MetaConfig {
                tr: 0,
                ..MetaConfig::default()
            },
        ),
        (
            "batch",
            MetaConfig {
                batch: 0,
                ..MetaConfig::default()
            },
        ),
        (
            "beta",
            MetaConfig {
                beta: -0.1,
                ..MetaConfig::default()
            },
        ),
    ] {
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains(field), "{e}");
    }
    assert!("frozen".parse::<Mode>().is_err());
}

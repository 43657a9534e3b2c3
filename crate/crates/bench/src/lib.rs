//! Shared fixtures for the kernel benchmarks.

use compmeta_core::config::ExperimentConfig;
use compmeta_core::meta::Trainer;

/// Small velocity-task experiment, sized so one gradient step takes
/// milliseconds.
pub const BENCH_CONFIG: &str = "\
env: {family: velocity, horizon: 50}
train_tasks: 2
test_tasks: 1
hidden: [64, 64]
recurrent_hidden: 32
batch: 8
rows_per_episode: 16
context_size: 64
";

/// Trainer whose replay buffers already hold a few trajectories per task.
pub fn warm_trainer(mode: &str) -> Trainer {
    let mut cfg = ExperimentConfig::from_yaml_str(BENCH_CONFIG).expect("bench config parses");
    cfg.meta.mode = mode.parse().expect("known mode");
    let tasks = cfg.task_set(0).expect("tasks generate");
    let mut trainer = Trainer::new(cfg.meta, &cfg.env, tasks.train, tasks.test, 0).expect("trainer builds");
    for _ in 0..4 {
        trainer.collect().expect("collection succeeds");
    }
    trainer
}

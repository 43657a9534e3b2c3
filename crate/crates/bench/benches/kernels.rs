use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use compmeta_bench::warm_trainer;
use compmeta_core::distributions::{draw_noise, fuse, sample_with_grad, DirichletFusion, Family, PosteriorParams};
use compmeta_core::meta::{draw_step_noise, prepare_task_batch, task_step};
use compmeta_core::nn::{Mlp, MlpConfig, Parameterized};

fn mlp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Mlp::new(MlpConfig::new(32, &[64, 64], 8), &mut rng);
    let x = Array2::from_shape_fn((128, 32), |_| rng.random_range(-1.0..1.0));
    c.bench_function("mlp_forward_128x32", |b| b.iter(|| net.forward(x.view()).unwrap()));
    let (out, cache) = net.forward(x.view()).unwrap();
    let g = Array2::ones(out.dim());
    let mut grads = vec![0.0; net.num_params()];
    c.bench_function("mlp_backward_128x32", |b| {
        b.iter(|| net.backward(&cache, g.view(), &mut grads).unwrap())
    });
}

fn fusion(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("fuse");
    for n in [8usize, 64, 256] {
        let dir: Vec<_> = (0..n)
            .map(|_| PosteriorParams::Dirichlet {
                alpha: (0..3).map(|_| rng.random_range(0.5..3.0)).collect(),
            })
            .collect();
        let gauss: Vec<_> = (0..n)
            .map(|_| PosteriorParams::Gaussian {
                mean: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                var: (0..6).map(|_| rng.random_range(0.1..2.0)).collect(),
            })
            .collect();
        group.bench_with_input(BenchmarkId::new("dirichlet", n), &dir, |b, p| {
            b.iter(|| fuse(p, DirichletFusion::Average).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("gaussian", n), &gauss, |b, p| {
            b.iter(|| fuse(p, DirichletFusion::Average).unwrap())
        });
    }
    group.finish();
}

fn sampling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let params = PosteriorParams::Dirichlet {
        alpha: vec![0.7, 1.5, 3.0],
    };
    c.bench_function("dirichlet_sample_with_grad", |b| {
        b.iter(|| {
            let noise = draw_noise(Family::Dirichlet, 3, &mut rng);
            sample_with_grad(&params, &noise, 1.0).unwrap()
        })
    });
}

fn gradient_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("task_step");
    group.sample_size(20);
    for mode in ["ocean", "pearl"] {
        let trainer = warm_trainer(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = prepare_task_batch(&trainer.agent, &trainer.buffers()[0], &trainer.cfg, &mut rng).unwrap();
        let noise = draw_step_noise(&trainer.agent, &batch, &mut rng);
        let mut grads = trainer.agent.zero_grads();
        group.bench_function(mode, |b| {
            b.iter(|| task_step(&trainer.agent, &trainer.cfg, &batch, &noise, &mut grads).unwrap())
        });
    }
    group.finish();
    let mut trainer = warm_trainer("ocean");
    c.bench_function("train_iteration_ocean", |b| {
        b.iter(|| trainer.train_iteration().unwrap())
    });
}

criterion_group!(benches, mlp, fusion, sampling, gradient_step);
criterion_main!(benches);

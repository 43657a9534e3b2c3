use ndarray::{Array2, Axis};
use rand::Rng;

use super::latent::{params_from_raw, raw_grad};
use super::{EncoderError, Result, Transition};
use crate::distributions::{fuse, fuse_vjp, DirichletFusion, LatentSpec, PosteriorParams};
use crate::nn::{Activation, Mlp, MlpCache, MlpConfig, Parameterized};

/// Per-context inference network whose outputs are fused across a context set.
#[derive(Debug, Clone)]
pub struct GlobalEncoder {
    pub net: Mlp,
    spec: LatentSpec,
    fusion: DirichletFusion,
    reward_scale: f64,
}

/// Fused posterior plus what the reverse pass needs.
#[derive(Debug, Clone)]
pub struct GlobalPosterior {
    /// One entry per block of the spec.
    pub fused: Vec<PosteriorParams>,
    /// `per_context[i][b]`: posterior of block `b` from context `i`.
    pub per_context: Vec<Vec<PosteriorParams>>,
    raw: Array2<f64>,
    cache: MlpCache,
}

impl GlobalEncoder {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        activation: Activation,
        spec: LatentSpec,
        fusion: DirichletFusion,
        reward_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut cfg = MlpConfig::new(Transition::feature_dim(obs_dim, act_dim), hidden, spec.param_len());
        cfg.activation = activation;
        Self {
            net: Mlp::new(cfg, rng),
            spec,
            fusion,
            reward_scale,
        }
    }

    pub fn spec(&self) -> &LatentSpec {
        &self.spec
    }

    pub fn featurize(&self, contexts: &[Transition]) -> Result<Array2<f64>> {
        let d = self.net.input_dim();
        let mut flat = Vec::with_capacity(contexts.len() * d);
        for c in contexts {
            let before = flat.len();
            c.write_features(self.reward_scale, &mut flat);
            if flat.len() - before != d {
                return Err(EncoderError::DimMismatch {
                    what: "context features",
                    expected: d,
                    got: flat.len() - before,
                });
            }
        }
        Ok(Array2::from_shape_vec((contexts.len(), d), flat).expect("row-major layout"))
    }

    /// Per-context posteriors fused block by block.
    pub fn infer(&self, contexts: &[Transition]) -> Result<GlobalPosterior> {
        if contexts.is_empty() {
            return Err(EncoderError::EmptyContext);
        }
        let x = self.featurize(contexts)?;
        let (raw, cache) = self.net.forward(x.view())?;
        let per_context = raw
            .axis_iter(Axis(0))
            .map(|row| params_from_raw(&self.spec, row.as_slice().expect("standard layout")))
            .collect::<Result<Vec<_>>>()?;
        let fused = (0..self.spec.blocks.len())
            .map(|b| {
                let column: Vec<PosteriorParams> = per_context.iter().map(|p| p[b].clone()).collect();
                fuse(&column, self.fusion)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(GlobalPosterior {
            fused,
            per_context,
            raw,
            cache,
        })
    }

    /// Accumulates parameter gradients given per-block gradients on the fused
    /// parameters.
    pub fn backward(&self, post: &GlobalPosterior, grad_fused: &[Vec<f64>], grads: &mut [f64]) -> Result<()> {
        let n = post.per_context.len();
        let mut per_ctx_grads: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(grad_fused.len()); n];
        for (b, g) in grad_fused.iter().enumerate() {
            let column: Vec<PosteriorParams> = post.per_context.iter().map(|p| p[b].clone()).collect();
            for (i, gi) in fuse_vjp(&column, g)?.into_iter().enumerate() {
                per_ctx_grads[i].push(gi);
            }
        }
        let mut graw = Array2::zeros(post.raw.raw_dim());
        for (i, mut row) in graw.axis_iter_mut(Axis(0)).enumerate() {
            let r = raw_grad(
                &self.spec,
                post.raw.row(i).as_slice().expect("standard layout"),
                &per_ctx_grads[i],
            )?;
            row.assign(&ndarray::ArrayView1::from(&r));
        }
        self.net.backward(&post.cache, graw.view(), grads)?;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params()
    }
}

/// Fused global posterior of `contexts`.
pub fn infer_global(encoder: &GlobalEncoder, contexts: &[Transition]) -> Result<Vec<PosteriorParams>> {
    Ok(encoder.infer(contexts)?.fused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{kl_with_grad, Family, LatentBlockSpec};
    use crate::nn::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn contexts(rng: &mut ChaCha8Rng, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|_| Transition {
                state: vec![rng.random_range(-1.0..1.0)],
                action: vec![rng.random_range(-1.0..1.0)],
                reward: rng.random_range(-2.0..0.0),
                next_state: vec![rng.random_range(-1.0..1.0)],
                done: false,
            })
            .collect()
    }

    fn encoder(rng: &mut ChaCha8Rng) -> GlobalEncoder {
        let spec = LatentSpec::new(vec![
            LatentBlockSpec::new(Family::Gaussian, 2),
            LatentBlockSpec::new(Family::Categorical, 3),
            LatentBlockSpec::new(Family::Dirichlet, 3),
        ])
        .unwrap();
        GlobalEncoder::new(1, 1, &[16], Activation::Tanh, spec, DirichletFusion::Average, 1.0, rng)
    }

    #[test]
    fn singleton_and_permutation_and_duplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = encoder(&mut rng);
        let ctx = contexts(&mut rng, 6);
        let one = enc.infer(&ctx[..1]).unwrap();
        assert_eq!(one.fused, one.per_context[0]);

        let base = infer_global(&enc, &ctx).unwrap();
        let mut perm = ctx.clone();
        perm.reverse();
        perm.swap(0, 3);
        let permuted = infer_global(&enc, &perm).unwrap();
        let mut dup = ctx.clone();
        dup.extend(ctx.clone());
        let duplicated = infer_global(&enc, &dup).unwrap();
        for other in [permuted, duplicated] {
            for (a, b) in base.iter().zip(&other) {
                for (x, y) in a.to_flat().iter().zip(b.to_flat()) {
                    assert!((x - y).abs() < 1e-9);
                }
            }
        }
        let copies = vec![ctx[2].clone(); 5];
        let single = infer_global(&enc, &ctx[2..3]).unwrap();
        let many = infer_global(&enc, &copies).unwrap();
        for (a, b) in single.iter().zip(&many) {
            for (x, y) in a.to_flat().iter().zip(b.to_flat()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
        assert!(matches!(enc.infer(&[]), Err(EncoderError::EmptyContext)));
    }

    #[test]
    fn global_kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..5 {
            let enc = encoder(&mut rng);
            let ctx = contexts(&mut rng, 4);
            let priors = enc.spec().priors();
            let loss = |e: &GlobalEncoder| -> f64 {
                let f = infer_global(e, &ctx).unwrap();
                f.iter().zip(&priors).map(|(q, p)| kl_with_grad(q, p).unwrap().0).sum()
            };
            let post = enc.infer(&ctx).unwrap();
            let gq: Vec<Vec<f64>> = post
                .fused
                .iter()
                .zip(&priors)
                .map(|(q, p)| kl_with_grad(q, p).unwrap().1)
                .collect();
            let mut grads = enc.net.zero_grad();
            enc.backward(&post, &gq, &mut grads).unwrap();
            let mut probe = enc.clone();
            let p0 = enc.net.params().to_vec();
            let report = gradcheck::compare(
                |q| {
                    probe.net.params_mut().copy_from_slice(q);
                    loss(&probe)
                },
                &p0,
                &grads,
                gradcheck::DEFAULT_EPS,
            );
            assert!(report.passes(1e-4), "{report:?}");
        }
    }
}

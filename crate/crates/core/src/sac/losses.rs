use ndarray::{s, Array1, Array2, ArrayView2};

use super::{column, hcat, Actor, Critic, CriticGrads, PolicySample, Result, SacConfig, SacError};
use crate::nn::Parameterized;

/// Batch of transitions with the latent each was conditioned on.
#[derive(Debug, Clone, PartialEq)]
pub struct SacBatch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub r: Array1<f64>,
    pub s2: Array2<f64>,
    pub done: Array1<f64>,
    pub z: Array2<f64>,
}

impl SacBatch {
    pub fn len(&self) -> usize {
        self.s.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, critic: &Critic) -> Result<()> {
        let n = self.len();
        let (obs, act, zd) = critic.dims();
        let ok = n > 0
            && self.s.dim() == (n, obs)
            && self.a.dim() == (n, act)
            && self.r.len() == n
            && self.s2.dim() == (n, obs)
            && self.done.len() == n
            && self.z.dim() == (n, zd);
        if !ok {
            return Err(SacError::Misaligned(format!(
                "batch of {n} rows does not match obs {obs}, act {act}, latent {zd}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CriticOutput {
    pub loss: f64,
    /// Gradient of the loss with respect to the batch latents.
    pub grad_z: Array2<f64>,
}

/// Soft Bellman residual against the target value network:
/// `mean (Q1 - y)^2 + mean (Q2 - y)^2`, `y = r + gamma (1 - done) V'(s', z)`.
///
/// The target does not carry gradient to `z`; the Q inputs do.
pub fn critic_loss(
    critic: &Critic,
    batch: &SacBatch,
    cfg: &SacConfig,
    grads: &mut CriticGrads,
) -> Result<CriticOutput> {
    batch.check(critic)?;
    let n = batch.len() as f64;
    let next_v = column(
        &critic
            .v_target
            .predict(hcat(&[batch.s2.view(), batch.z.view()]).view())?,
    );
    let y = &batch.r + &(cfg.gamma * &(1.0 - &batch.done) * &next_v);
    let input = hcat(&[batch.s.view(), batch.a.view(), batch.z.view()]);
    let zstart = input.ncols() - batch.z.ncols();
    let mut loss = 0.0;
    let mut grad_z = Array2::zeros(batch.z.raw_dim());
    let heads: Vec<(&crate::nn::Mlp, &mut Vec<f64>)> = if cfg.single_q {
        vec![(&critic.q1, &mut grads.q1)]
    } else {
        vec![(&critic.q1, &mut grads.q1), (&critic.q2, &mut grads.q2)]
    };
    for (q, g) in heads {
        let (out, cache) = q.forward(input.view())?;
        let resid = &column(&out) - &y;
        loss += resid.mapv(|v| v * v).sum() / n;
        let gout = (2.0 / n * &resid).insert_axis(ndarray::Axis(1));
        let gin = q.backward(&cache, gout.view(), g)?;
        grad_z += &gin.slice(s![.., zstart..]);
    }
    if !loss.is_finite() {
        return Err(SacError::NonFinite("critic loss"));
    }
    Ok(CriticOutput { loss, grad_z })
}

/// Clipped double-Q estimate at freshly sampled actions, with the Q input
/// cache of the network that produced each row's minimum.
fn min_q(
    critic: &Critic,
    s: ArrayView2<f64>,
    a: ArrayView2<f64>,
    z: ArrayView2<f64>,
    single_q: bool,
) -> Result<(Array1<f64>, Array2<f64>, Vec<bool>)> {
    let input = hcat(&[s, a, z]);
    let q1 = column(&critic.q1.predict(input.view())?);
    if single_q {
        let n = q1.len();
        return Ok((q1, input, vec![true; n]));
    }
    let q2 = column(&critic.q2.predict(input.view())?);
    let pick: Vec<bool> = q1.iter().zip(&q2).map(|(a, b)| a <= b).collect();
    let q = Array1::from_iter(q1.iter().zip(&q2).map(|(a, b)| a.min(*b)));
    Ok((q, input, pick))
}

/// `mean (alpha log pi(a'|s,z) - min Q(s, a', z))` with `a' = tanh(mean + std eps)`.
///
/// `input` is `[s, z]` with `z` already detached. Only actor gradients are
/// accumulated; Q parameters receive none.
pub fn actor_loss(
    actor: &Actor,
    critic: &Critic,
    input: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    cfg: &SacConfig,
    grads: &mut [f64],
) -> Result<(f64, PolicySample)> {
    let (obs, act, zd) = critic.dims();
    if input.ncols() != obs + zd || actor.act_dim() != act {
        return Err(SacError::Misaligned("actor loss input".into()));
    }
    let n = input.nrows() as f64;
    let sample = actor.sample(input, eps)?;
    let s = input.slice(s![.., ..obs]);
    let z = input.slice(s![.., obs..]);
    let (q, qin, pick) = min_q(critic, s, sample.action.view(), z, cfg.single_q)?;
    let loss = (cfg.alpha_ent * &sample.log_pi - &q).sum() / n;
    if !loss.is_finite() {
        return Err(SacError::NonFinite("actor loss"));
    }
    // dL/da through whichever Q supplied each row's minimum
    let mut grad_a = Array2::zeros(sample.action.raw_dim());
    for (net, want) in [(&critic.q1, true), (&critic.q2, false)] {
        let rows: Vec<usize> = (0..pick.len()).filter(|&i| pick[i] == want).collect();
        if rows.is_empty() {
            continue;
        }
        let sub = qin.select(ndarray::Axis(0), &rows);
        let (_, cache) = net.forward(sub.view())?;
        let gout = Array2::from_elem((rows.len(), 1), -1.0 / n);
        let mut scratch = net.zero_grad();
        let gin = net.backward(&cache, gout.view(), &mut scratch)?;
        for (k, &i) in rows.iter().enumerate() {
            grad_a.row_mut(i).assign(&gin.slice(s![k, obs..obs + act]));
        }
    }
    let grad_lp = Array1::from_elem(sample.log_pi.len(), cfg.alpha_ent / n);
    actor.backward(&sample, grad_a.view(), grad_lp.view(), grads)?;
    Ok((loss, sample))
}

/// `mean (V(s, z) - (min Q(s, a', z) - alpha log pi(a'|s,z)))^2`, with the
/// regression target held fixed. Accumulates into the value gradients only.
pub fn value_loss(
    critic: &Critic,
    input: ArrayView2<f64>,
    sample: &PolicySample,
    cfg: &SacConfig,
    grads: &mut [f64],
) -> Result<f64> {
    let (obs, _, _) = critic.dims();
    let n = input.nrows() as f64;
    let s = input.slice(s![.., ..obs]);
    let z = input.slice(s![.., obs..]);
    let (q, _, _) = min_q(critic, s, sample.action.view(), z, cfg.single_q)?;
    let target = &q - &(cfg.alpha_ent * &sample.log_pi);
    let (out, cache) = critic.v.forward(input)?;
    let resid = &column(&out) - &target;
    let loss = resid.mapv(|v| v * v).sum() / n;
    if !loss.is_finite() {
        return Err(SacError::NonFinite("value loss"));
    }
    let gout = (2.0 / n * &resid).insert_axis(ndarray::Axis(1));
    critic.v.backward(&cache, gout.view(), grads)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, Activation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn setup(rng: &mut ChaCha8Rng) -> (Actor, Critic, SacBatch) {
        let actor = Actor::new(2, 2, 1, &[8], Activation::Tanh, rng);
        let critic = Critic::new(2, 1, 2, &[8], Activation::Tanh, rng);
        let n = 5;
        let mut u = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        let batch = SacBatch {
            s: u(n, 2),
            a: u(n, 1),
            r: Array1::from_iter(u(n, 1).iter().copied()),
            s2: u(n, 2),
            done: Array1::from_iter([0.0, 1.0, 0.0, 0.0, 1.0]),
            z: u(n, 2),
        };
        (actor, critic, batch)
    }

    #[test]
    fn critic_loss_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, critic, batch) = setup(&mut rng);
        let cfg = SacConfig::default();
        let mut grads = critic.zero_grads();
        let out = critic_loss(&critic, &batch, &cfg, &mut grads).unwrap();
        let mut expected = 0.0;
        for i in 0..batch.len() {
            let sz = ndarray::concatenate![ndarray::Axis(0), batch.s2.row(i), batch.z.row(i)];
            let v = critic
                .v_target
                .predict(sz.insert_axis(ndarray::Axis(0)).view())
                .unwrap()[[0, 0]];
            let y = batch.r[i] + 0.99 * (1.0 - batch.done[i]) * v;
            let saz = ndarray::concatenate![ndarray::Axis(0), batch.s.row(i), batch.a.row(i), batch.z.row(i)];
            let x = saz.insert_axis(ndarray::Axis(0));
            let q1 = critic.q1.predict(x.view()).unwrap()[[0, 0]];
            let q2 = critic.q2.predict(x.view()).unwrap()[[0, 0]];
            expected += ((q1 - y).powi(2) + (q2 - y).powi(2)) / batch.len() as f64;
        }
        assert!((out.loss - expected).abs() < 1e-12);
        // the value network takes no part in the Bellman residual
        assert!(grads.v.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn critic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for single_q in [false, true] {
            let (_, critic, batch) = setup(&mut rng);
            let cfg = SacConfig {
                single_q,
                ..SacConfig::default()
            };
            let mut grads = critic.zero_grads();
            let out = critic_loss(&critic, &batch, &cfg, &mut grads).unwrap();
            let mut probe = critic.clone();
            let p0 = critic.q1.params().to_vec();
            let r = gradcheck::compare(
                |p| {
                    probe.q1.params_mut().copy_from_slice(p);
                    critic_loss(&probe, &batch, &cfg, &mut probe.zero_grads()).unwrap().loss
                },
                &p0,
                &grads.q1,
                gradcheck::DEFAULT_EPS,
            );
            assert!(r.passes(1e-5), "{r:?}");
            if single_q {
                assert!(grads.q2.iter().all(|g| *g == 0.0));
            }
            // latent gradient, excluding the detached target path
            let z0: Vec<f64> = batch.z.iter().copied().collect();
            let shape = batch.z.raw_dim();
            let r = gradcheck::compare(
                |z| {
                    let mut b = batch.clone();
                    let zz = Array2::from_shape_vec(shape, z.to_vec()).unwrap();
                    b.z = zz;
                    // keep the target on the original latent
                    let y_fixed = critic
                        .v_target
                        .predict(hcat(&[batch.s2.view(), batch.z.view()]).view())
                        .unwrap();
                    let input = hcat(&[b.s.view(), b.a.view(), b.z.view()]);
                    let y = &batch.r + &(0.99 * &(1.0 - &batch.done) * &column(&y_fixed));
                    let mut l = (&column(&critic.q1.predict(input.view()).unwrap()) - &y)
                        .mapv(|v| v * v)
                        .mean()
                        .unwrap();
                    if !single_q {
                        l += (&column(&critic.q2.predict(input.view()).unwrap()) - &y)
                            .mapv(|v| v * v)
                            .mean()
                            .unwrap();
                    }
                    l
                },
                &z0,
                out.grad_z.as_slice().unwrap(),
                gradcheck::DEFAULT_EPS,
            );
            assert!(r.passes(1e-5), "{r:?}");
        }
    }

    #[test]
    fn actor_and_value_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let (actor, critic, batch) = setup(&mut rng);
            let cfg = SacConfig::default();
            let input = hcat(&[batch.s.view(), batch.z.view()]);
            let eps = Array2::from_shape_fn((batch.len(), 1), |_| rng.sample::<f64, _>(StandardNormal));
            let mut ga = actor.net.zero_grad();
            let (_, sample) = actor_loss(&actor, &critic, input.view(), eps.view(), &cfg, &mut ga).unwrap();
            let mut probe = actor.clone();
            let p0 = actor.net.params().to_vec();
            let r = gradcheck::compare(
                |p| {
                    probe.net.params_mut().copy_from_slice(p);
                    let mut scratch = probe.net.zero_grad();
                    actor_loss(&probe, &critic, input.view(), eps.view(), &cfg, &mut scratch)
                        .unwrap()
                        .0
                },
                &p0,
                &ga,
                gradcheck::DEFAULT_EPS,
            );
            assert!(r.passes(1e-4), "{r:?}");

            let mut gv = critic.v.zero_grad();
            value_loss(&critic, input.view(), &sample, &cfg, &mut gv).unwrap();
            let mut probe = critic.clone();
            let p0 = critic.v.params().to_vec();
            let r = gradcheck::compare(
                |p| {
                    probe.v.params_mut().copy_from_slice(p);
                    let mut scratch = probe.v.zero_grad();
                    value_loss(&probe, input.view(), &sample, &cfg, &mut scratch).unwrap()
                },
                &p0,
                &gv,
                gradcheck::DEFAULT_EPS,
            );
            assert!(r.passes(1e-5), "{r:?}");
        }
    }

    #[test]
    fn misaligned_batch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, critic, mut batch) = setup(&mut rng);
        batch.r = Array1::zeros(2);
        assert!(critic_loss(&critic, &batch, &SacConfig::default(), &mut critic.zero_grads()).is_err());
    }
}

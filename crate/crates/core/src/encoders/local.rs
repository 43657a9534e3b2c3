use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::latent::{kl_blocks_with_grad, params_from_raw, raw_grad, sample_spec, JointSample};
use super::{EncoderError, Result, Transition};
use crate::distributions::{sample, LatentSpec, Noise, PosteriorParams};
use crate::nn::{Activation, GatedCell, GatedCellCache, Mlp, MlpCache, MlpConfig, Parameterized, RecurrentCellConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEncoderConfig {
    pub obs_dim: usize,
    pub act_dim: usize,
    /// Environment steps per latent update.
    pub tr: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub activation: Activation,
    pub reward_scale: f64,
    /// Plain recurrent variant: the transition ignores the previous latent
    /// and every step's prior is the fixed uninformative prior.
    pub deterministic: bool,
    /// Feed posterior means instead of samples into the transition.
    pub feed_means: bool,
}

impl LocalEncoderConfig {
    pub fn slot_dim(&self) -> usize {
        Transition::feature_dim(self.obs_dim, self.act_dim) + 1
    }

    pub fn block_dim(&self) -> usize {
        self.tr * self.slot_dim()
    }
}

/// Flattened context block: `tr` slots of `[s, a, r, s', valid]`, zero-filled
/// with `valid = 0` in front when fewer than `tr` transitions are given.
pub fn block_features(window: &[Transition], tr: usize, reward_scale: f64, slot_dim: usize) -> Vec<f64> {
    assert!(window.len() <= tr, "window longer than the temporal resolution");
    let mut out = vec![0.0; (tr - window.len()) * slot_dim];
    out.reserve(window.len() * slot_dim);
    for t in window {
        t.write_features(reward_scale, &mut out);
        out.push(1.0);
    }
    out
}

/// Recurrent inference network `q^enc`, transition cell `q^tran` and
/// conditional prior `q^prior`.
#[derive(Debug, Clone)]
pub struct LocalEncoder {
    pub tran: GatedCell,
    pub enc: Mlp,
    pub prior: Mlp,
    spec: LatentSpec,
    cfg: LocalEncoderConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalState {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub t: usize,
    pub posterior: Option<Vec<PosteriorParams>>,
    pub prior: Option<Vec<PosteriorParams>>,
}

/// Per-update bookkeeping kept in trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalStepRecord {
    pub posterior: Vec<PosteriorParams>,
    pub prior: Vec<PosteriorParams>,
    pub z: Vec<f64>,
    pub h: Vec<f64>,
}

/// Parameter gradients of the three local networks.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGrads {
    pub tran: Vec<f64>,
    pub enc: Vec<f64>,
    pub prior: Vec<f64>,
}

/// Initial state: zero hidden vector and a prior sample.
pub fn local_init(spec: &LatentSpec, hidden_dim: usize, noise: &[Noise]) -> Result<LocalState> {
    let priors = spec.priors();
    let mut z = Vec::with_capacity(spec.total_dim());
    for ((b, p), n) in spec.blocks.iter().zip(&priors).zip(noise) {
        z.extend(sample(p, n, b.temperature)?);
    }
    Ok(LocalState {
        h: vec![0.0; hidden_dim],
        z,
        t: 0,
        posterior: None,
        prior: None,
    })
}

struct ChainStep {
    tran_cache: GatedCellCache,
    enc_cache: MlpCache,
    enc_raw: Array2<f64>,
    prior_cache: Option<(MlpCache, Array2<f64>)>,
    h: Array2<f64>,
    posteriors: Vec<Vec<PosteriorParams>>,
    priors: Vec<Vec<PosteriorParams>>,
    samples: Vec<JointSample>,
    z: Array2<f64>,
    kl: Vec<f64>,
    kl_grads: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

/// A batch of trajectories unrolled through the local encoder with every
/// activation kept for backpropagation through time.
pub struct LocalChain {
    steps: Vec<ChainStep>,
    rows: usize,
}

impl LocalChain {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Latent produced by update `k`, one row per trajectory.
    pub fn z(&self, k: usize) -> ArrayView2<'_, f64> {
        self.steps[k].z.view()
    }

    /// `kl[k][i]`: KL term of update `k` for trajectory `i`.
    pub fn kl_terms(&self) -> Vec<Vec<f64>> {
        self.steps.iter().map(|s| s.kl.clone()).collect()
    }

    /// Per-trajectory KL summed over updates.
    pub fn kl_per_row(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for s in &self.steps {
            for (o, k) in out.iter_mut().zip(&s.kl) {
                *o += k;
            }
        }
        out
    }

    pub fn records(&self, row: usize) -> Vec<LocalStepRecord> {
        self.steps
            .iter()
            .map(|s| LocalStepRecord {
                posterior: s.posteriors[row].clone(),
                prior: s.priors[row].clone(),
                z: s.z.row(row).to_vec(),
                h: s.h.row(row).to_vec(),
            })
            .collect()
    }
}

impl LocalEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: LocalEncoderConfig, spec: LatentSpec, rng: &mut R) -> Self {
        assert!(cfg.tr >= 1 && cfg.hidden_dim >= 1, "tr and hidden_dim must be >= 1");
        let block = cfg.block_dim();
        let tran = GatedCell::new(
            RecurrentCellConfig {
                input_dim: block + spec.total_dim(),
                hidden_dim: cfg.hidden_dim,
            },
            rng,
        );
        let mut enc_cfg = MlpConfig::new(block + cfg.hidden_dim, &cfg.mlp_hidden, spec.param_len());
        enc_cfg.activation = cfg.activation;
        let mut prior_cfg = MlpConfig::new(cfg.hidden_dim, &cfg.mlp_hidden, spec.param_len());
        prior_cfg.activation = cfg.activation;
        Self {
            enc: Mlp::new(enc_cfg, rng),
            prior: Mlp::new(prior_cfg, rng),
            tran,
            spec,
            cfg,
        }
    }

    pub fn spec(&self) -> &LatentSpec {
        &self.spec
    }

    pub fn config(&self) -> &LocalEncoderConfig {
        &self.cfg
    }

    pub fn zero_grads(&self) -> LocalGrads {
        LocalGrads {
            tran: self.tran.zero_grad(),
            enc: self.enc.zero_grad(),
            prior: self.prior.zero_grad(),
        }
    }

    /// Number of latent updates for an episode of `horizon` steps.
    pub fn num_updates(&self, horizon: usize) -> usize {
        horizon.div_ceil(self.cfg.tr)
    }

    /// Context block consumed by update `k`: the `tr` transitions preceding
    /// step `k * tr` (all padding for `k = 0`).
    pub fn block_for(&self, transitions: &[Transition], k: usize) -> Vec<f64> {
        let tr = self.cfg.tr;
        let end = (k * tr).min(transitions.len());
        let start = end.saturating_sub(tr);
        block_features(&transitions[start..end], tr, self.cfg.reward_scale, self.cfg.slot_dim())
    }

    pub fn init(&self, noise: &[Noise]) -> Result<LocalState> {
        local_init(&self.spec, self.cfg.hidden_dim, noise)
    }

    fn check_block(&self, width: usize) -> Result<()> {
        if width != self.cfg.block_dim() {
            return Err(EncoderError::DimMismatch {
                what: "context block",
                expected: self.cfg.block_dim(),
                got: width,
            });
        }
        Ok(())
    }

    /// One online update: `h' = tran([c, z], h)`, posterior `enc([c, h'])`,
    /// prior `prior(h)`, then `z' ~ posterior`.
    pub fn local_step(
        &self,
        state: &LocalState,
        block: &[f64],
        noise: &[Noise],
    ) -> Result<(LocalState, Vec<PosteriorParams>, Vec<PosteriorParams>)> {
        self.check_block(block.len())?;
        if block.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite("context block"));
        }
        let x = Array2::from_shape_vec((1, block.len()), block.to_vec()).expect("one row");
        let h = Array2::from_shape_vec((1, state.h.len()), state.h.clone()).map_err(|_| EncoderError::DimMismatch {
            what: "hidden state",
            expected: self.cfg.hidden_dim,
            got: state.h.len(),
        })?;
        let z_fed = Array2::from_shape_vec(
            (1, state.z.len()),
            self.fed_latent(&state.z, state.posterior.as_deref()),
        )
        .map_err(|_| EncoderError::DimMismatch {
            what: "local latent",
            expected: self.spec.total_dim(),
            got: state.z.len(),
        })?;
        let xin = concatenate(Axis(1), &[x.view(), z_fed.view()]).expect("one row");
        let (h_next, _) = self.tran.forward(xin.view(), h.view())?;
        let enc_in = concatenate(Axis(1), &[x.view(), h_next.view()]).expect("one row");
        let raw = self.enc.predict(enc_in.view())?;
        let posterior = params_from_raw(&self.spec, raw.row(0).as_slice().expect("row"))?;
        let prior = self.prior_of(h.view())?.remove(0);
        let mut z = Vec::with_capacity(self.spec.total_dim());
        for ((b, p), n) in self.spec.blocks.iter().zip(&posterior).zip(noise) {
            z.extend(sample(p, n, b.temperature)?);
        }
        let next = LocalState {
            h: h_next.row(0).to_vec(),
            z,
            t: state.t + self.cfg.tr,
            posterior: Some(posterior.clone()),
            prior: Some(prior.clone()),
        };
        Ok((next, posterior, prior))
    }

    /// Latent fed into the transition cell.
    fn fed_latent(&self, z: &[f64], posterior: Option<&[PosteriorParams]>) -> Vec<f64> {
        if self.cfg.deterministic {
            vec![0.0; z.len()]
        } else if self.cfg.feed_means {
            let params = posterior.map(|p| p.to_vec()).unwrap_or_else(|| self.spec.priors());
            params.iter().flat_map(|p| p.mean()).collect()
        } else {
            z.to_vec()
        }
    }

    fn prior_of(&self, h: ArrayView2<f64>) -> Result<Vec<Vec<PosteriorParams>>> {
        if self.cfg.deterministic {
            return Ok(vec![self.spec.priors(); h.nrows()]);
        }
        let raw = self.prior.predict(h)?;
        raw.axis_iter(Axis(0))
            .map(|r| params_from_raw(&self.spec, r.as_slice().expect("row")))
            .collect()
    }

    /// Unrolls the encoder over `blocks[k]` (one row per trajectory) starting
    /// from `h = 0` and the initial latents `z0`. `noise[k][i]` drives the
    /// sample of update `k` for trajectory `i`.
    pub fn run_chain(&self, blocks: &[Array2<f64>], z0: &Array2<f64>, noise: &[Vec<Vec<Noise>>]) -> Result<LocalChain> {
        let rows = z0.nrows();
        let hd = self.cfg.hidden_dim;
        let mut h = Array2::<f64>::zeros((rows, hd));
        let mut steps: Vec<ChainStep> = Vec::with_capacity(blocks.len());
        for (k, x) in blocks.iter().enumerate() {
            self.check_block(x.ncols())?;
            let z_fed = match steps.last() {
                None => {
                    let mut zf = Array2::zeros(z0.raw_dim());
                    for (mut r, z) in zf.axis_iter_mut(Axis(0)).zip(z0.axis_iter(Axis(0))) {
                        let v = self.fed_latent(z.as_slice().expect("row"), None);
                        r.assign(&ndarray::ArrayView1::from(&v));
                    }
                    zf
                }
                Some(prev) => {
                    let mut zf = Array2::zeros(prev.z.raw_dim());
                    for (i, mut r) in zf.axis_iter_mut(Axis(0)).enumerate() {
                        let v = self.fed_latent(prev.z.row(i).as_slice().expect("row"), Some(&prev.posteriors[i]));
                        r.assign(&ndarray::ArrayView1::from(&v));
                    }
                    zf
                }
            };
            let xin = concatenate(Axis(1), &[x.view(), z_fed.view()]).map_err(|_| EncoderError::DimMismatch {
                what: "trajectory batch",
                expected: rows,
                got: x.nrows(),
            })?;
            let (h_next, tran_cache) = self.tran.forward(xin.view(), h.view())?;
            let enc_in = concatenate(Axis(1), &[x.view(), h_next.view()]).expect("same rows");
            let (enc_raw, enc_cache) = self.enc.forward(enc_in.view())?;
            let (prior_cache, priors) = if self.cfg.deterministic {
                (None, vec![self.spec.priors(); rows])
            } else {
                let (raw, cache) = self.prior.forward(h.view())?;
                let p = raw
                    .axis_iter(Axis(0))
                    .map(|r| params_from_raw(&self.spec, r.as_slice().expect("row")))
                    .collect::<Result<Vec<_>>>()?;
                (Some((cache, raw)), p)
            };
            let mut posteriors = Vec::with_capacity(rows);
            let mut samples = Vec::with_capacity(rows);
            let mut kl = Vec::with_capacity(rows);
            let mut kl_grads = Vec::with_capacity(rows);
            let mut z = Array2::zeros((rows, self.spec.total_dim()));
            for i in 0..rows {
                let post = params_from_raw(&self.spec, enc_raw.row(i).as_slice().expect("row"))?;
                let js = sample_spec(&self.spec, &post, &noise[k][i])?;
                z.row_mut(i).assign(&ndarray::ArrayView1::from(&js.value));
                let (v, gq, gp) = kl_blocks_with_grad(&post, &priors[i])?;
                kl.push(v);
                kl_grads.push((gq, gp));
                posteriors.push(post);
                samples.push(js);
            }
            steps.push(ChainStep {
                tran_cache,
                enc_cache,
                enc_raw,
                prior_cache,
                h: h_next.clone(),
                posteriors,
                priors,
                samples,
                z,
                kl,
                kl_grads,
            });
            h = h_next;
        }
        Ok(LocalChain { steps, rows })
    }

    /// Backpropagation through time of `sum_k <grad_z[k], z_k> + kl_weight * sum_k KL_k`
    /// (KL summed over trajectories).
    pub fn chain_backward(
        &self,
        chain: &LocalChain,
        grad_z: &[Array2<f64>],
        kl_weight: f64,
        grads: &mut LocalGrads,
    ) -> Result<()> {
        let rows = chain.rows;
        let hd = self.cfg.hidden_dim;
        let block = self.cfg.block_dim();
        let zdim = self.spec.total_dim();
        let mut dh_next = Array2::<f64>::zeros((rows, hd));
        let mut dz_carry = Array2::<f64>::zeros((rows, zdim));
        for k in (0..chain.steps.len()).rev() {
            let st = &chain.steps[k];
            let dz = &grad_z[k] + &dz_carry;
            let plen = self.spec.param_len();
            let mut g_enc = Array2::<f64>::zeros((rows, plen));
            let mut g_prior = Array2::<f64>::zeros((rows, plen));
            for i in 0..rows {
                let (gq, gp) = &st.kl_grads[i];
                let mut dpost = st.samples[i].vjp(dz.row(i).as_slice().expect("row"));
                for (d, g) in dpost.iter_mut().zip(gq) {
                    for (a, b) in d.iter_mut().zip(g) {
                        *a += kl_weight * b;
                    }
                }
                let r = raw_grad(&self.spec, st.enc_raw.row(i).as_slice().expect("row"), &dpost)?;
                g_enc.row_mut(i).assign(&ndarray::ArrayView1::from(&r));
                if let Some((_, praw)) = &st.prior_cache {
                    let dprior: Vec<Vec<f64>> = gp.iter().map(|g| g.iter().map(|v| kl_weight * v).collect()).collect();
                    let r = raw_grad(&self.spec, praw.row(i).as_slice().expect("row"), &dprior)?;
                    g_prior.row_mut(i).assign(&ndarray::ArrayView1::from(&r));
                }
            }
            let d_enc_in = self.enc.backward(&st.enc_cache, g_enc.view(), &mut grads.enc)?;
            let dh = &dh_next + &d_enc_in.slice(s![.., block..]);
            let (dx, mut dh_prev) = self.tran.backward(&st.tran_cache, dh.view(), &mut grads.tran)?;
            if let Some((cache, _)) = &st.prior_cache {
                dh_prev += &self.prior.backward(cache, g_prior.view(), &mut grads.prior)?;
            }
            dz_carry = if self.cfg.deterministic || self.cfg.feed_means {
                Array2::zeros((rows, zdim))
            } else {
                dx.slice(s![.., block..]).to_owned()
            };
            dh_next = dh_prev;
        }
        Ok(())
    }
}

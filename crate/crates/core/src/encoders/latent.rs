//! Mapping raw network outputs onto composite latent specs, and sampling or
//! comparing whole specs block by block.

use rand::Rng;

use super::{EncoderError, Result};
use crate::distributions::{
    draw_noise, kl_with_grad, sample, sample_with_grad, Family, LatentSpec, Noise, PosteriorParams, ReparamSample,
};
use crate::nn::OutputHead;

fn head(family: Family) -> OutputHead {
    match family {
        Family::Gaussian | Family::LogitNormal => OutputHead::MeanLogVariance,
        Family::Categorical => OutputHead::Logits,
        Family::Dirichlet => OutputHead::PositiveConcentration,
    }
}

fn check_raw(spec: &LatentSpec, raw: &[f64]) -> Result<()> {
    if raw.len() != spec.param_len() {
        return Err(EncoderError::DimMismatch {
            what: "raw latent parameters",
            expected: spec.param_len(),
            got: raw.len(),
        });
    }
    Ok(())
}

/// Turns one row of raw network output into per-block parameters: Gaussian
/// blocks read `[mean, log variance]`, categorical blocks read logits and
/// Dirichlet blocks read pre-softplus concentrations.
pub fn params_from_raw(spec: &LatentSpec, raw: &[f64]) -> Result<Vec<PosteriorParams>> {
    check_raw(spec, raw)?;
    let offsets = spec.param_offsets();
    Ok(spec
        .blocks
        .iter()
        .zip(&offsets)
        .map(|(b, &o)| {
            let seg = &raw[o..o + b.param_len()];
            PosteriorParams::from_flat(b.family, &head(b.family).apply(seg))
        })
        .collect())
}

/// Gradient on the raw row given gradients on each block's flat parameters.
pub fn raw_grad(spec: &LatentSpec, raw: &[f64], grad_params: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_raw(spec, raw)?;
    let offsets = spec.param_offsets();
    let mut out = Vec::with_capacity(raw.len());
    for ((b, &o), g) in spec.blocks.iter().zip(&offsets).zip(grad_params) {
        let seg = &raw[o..o + b.param_len()];
        let h = head(b.family);
        let y = h.apply(seg);
        out.extend(h.backward(seg, &y, g));
    }
    Ok(out)
}

pub fn draw_spec_noise<R: Rng + ?Sized>(spec: &LatentSpec, rng: &mut R) -> Vec<Noise> {
    spec.blocks.iter().map(|b| draw_noise(b.family, b.dim, rng)).collect()
}

/// Concatenated reparameterized sample of every block.
#[derive(Debug, Clone)]
pub struct JointSample {
    pub value: Vec<f64>,
    pub parts: Vec<ReparamSample>,
}

impl JointSample {
    /// Per-block parameter gradients given the gradient on `value`.
    pub fn vjp(&self, grad_value: &[f64]) -> Vec<Vec<f64>> {
        let mut offset = 0;
        self.parts
            .iter()
            .map(|p| {
                let d = p.value.len();
                let g = p.vjp(&grad_value[offset..offset + d]);
                offset += d;
                g
            })
            .collect()
    }
}

/// Sample every block, with pathwise Jacobians.
pub fn sample_spec(spec: &LatentSpec, params: &[PosteriorParams], noise: &[Noise]) -> Result<JointSample> {
    let mut value = Vec::with_capacity(spec.total_dim());
    let mut parts = Vec::with_capacity(spec.blocks.len());
    for ((b, p), n) in spec.blocks.iter().zip(params).zip(noise) {
        let s = sample_with_grad(p, n, b.temperature)?;
        value.extend(&s.value);
        parts.push(s);
    }
    Ok(JointSample { value, parts })
}

/// Sample every block without Jacobians (rollouts).
pub fn sample_spec_value(spec: &LatentSpec, params: &[PosteriorParams], noise: &[Noise]) -> Result<Vec<f64>> {
    let mut value = Vec::with_capacity(spec.total_dim());
    for ((b, p), n) in spec.blocks.iter().zip(params).zip(noise) {
        value.extend(sample(p, n, b.temperature)?);
    }
    Ok(value)
}

pub fn kl_blocks(q: &[PosteriorParams], p: &[PosteriorParams]) -> Result<f64> {
    Ok(kl_blocks_with_grad(q, p)?.0)
}

/// Summed block KL with per-block gradients on `q` and on `p`.
pub fn kl_blocks_with_grad(
    q: &[PosteriorParams],
    p: &[PosteriorParams],
) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if q.len() != p.len() {
        return Err(EncoderError::DimMismatch {
            what: "latent blocks",
            expected: q.len(),
            got: p.len(),
        });
    }
    let mut total = 0.0;
    let mut gq = Vec::with_capacity(q.len());
    let mut gp = Vec::with_capacity(q.len());
    for (a, b) in q.iter().zip(p) {
        let (v, x, y) = kl_with_grad(a, b)?;
        total += v;
        gq.push(x);
        gp.push(y);
    }
    Ok((total, gq, gp))
}

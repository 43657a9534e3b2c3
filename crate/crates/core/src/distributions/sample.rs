use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;

use super::fusion::softmax;
use super::{sigmoid, DistError, Family, PosteriorParams, Result};
use crate::special::{gamma_inv_cdf_ln, gamma_sample_dshape_ln};

/// Base randomness for a reparameterized sample. The sample is a
/// deterministic function of the parameters and this noise.
#[derive(Debug, Clone, PartialEq)]
pub enum Noise {
    /// Standard normal draws (Gaussian, logit-normal).
    Normal(Vec<f64>),
    /// Standard Gumbel draws (categorical relaxation).
    Gumbel(Vec<f64>),
    /// Uniform draws on `(0, 1)`, used as Gamma CDF levels (Dirichlet).
    Uniform(Vec<f64>),
}

impl Noise {
    pub fn values(&self) -> &[f64] {
        match self {
            Noise::Normal(v) | Noise::Gumbel(v) | Noise::Uniform(v) => v,
        }
    }

    /// All-zero-effect noise: zeros for normal, zeros for Gumbel, one half
    /// for uniform (the Gamma median).
    pub fn neutral(family: Family, dim: usize) -> Self {
        match family {
            Family::Gaussian | Family::LogitNormal => Noise::Normal(vec![0.0; dim]),
            Family::Categorical => Noise::Gumbel(vec![0.0; dim]),
            Family::Dirichlet => Noise::Uniform(vec![0.5; dim]),
        }
    }
}

pub fn draw_noise<R: Rng + ?Sized>(family: Family, dim: usize, rng: &mut R) -> Noise {
    match family {
        Family::Gaussian | Family::LogitNormal => Noise::Normal((0..dim).map(|_| rng.sample(StandardNormal)).collect()),
        Family::Categorical => Noise::Gumbel(
            (0..dim)
                .map(|_| {
                    let u: f64 = rng.sample(Open01);
                    -(-u.ln()).ln()
                })
                .collect(),
        ),
        Family::Dirichlet => Noise::Uniform((0..dim).map(|_| rng.sample(Open01)).collect()),
    }
}

/// A sample together with its Jacobian with respect to the flat parameters.
#[derive(Debug, Clone)]
pub struct ReparamSample {
    pub value: Vec<f64>,
    /// Row-major `value.len() x param_len`.
    jacobian: Vec<f64>,
    param_len: usize,
}

impl ReparamSample {
    /// Pulls a gradient on the sample back to the flat parameters.
    pub fn vjp(&self, grad_value: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.param_len];
        for (i, g) in grad_value.iter().enumerate() {
            if *g == 0.0 {
                continue;
            }
            let row = &self.jacobian[i * self.param_len..(i + 1) * self.param_len];
            for (o, j) in out.iter_mut().zip(row) {
                *o += g * j;
            }
        }
        out
    }

    pub fn jacobian(&self) -> &[f64] {
        &self.jacobian
    }
}

fn check_noise(params: &PosteriorParams, noise: &Noise, temperature: f64) -> Result<()> {
    let family = params.family();
    let ok_kind = matches!(
        (family, noise),
        (Family::Gaussian | Family::LogitNormal, Noise::Normal(_))
            | (Family::Categorical, Noise::Gumbel(_))
            | (Family::Dirichlet, Noise::Uniform(_))
    );
    if !ok_kind {
        return Err(DistError::InvalidParams(format!(
            "noise kind does not match family {family:?}"
        )));
    }
    let values = noise.values();
    if values.len() != params.dim() {
        return Err(DistError::DimMismatch {
            expected: params.dim(),
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DistError::NonFinite);
    }
    if let Noise::Uniform(u) = noise {
        if u.iter().any(|&x| x <= 0.0 || x >= 1.0) {
            return Err(DistError::InvalidParams("uniform noise must lie in (0, 1)".into()));
        }
    }
    if family == Family::Categorical && !(temperature > 0.0 && temperature.is_finite()) {
        return Err(DistError::BadTemperature(temperature));
    }
    params.validate()
}

/// Reparameterized sample without the Jacobian.
pub fn sample(params: &PosteriorParams, noise: &Noise, temperature: f64) -> Result<Vec<f64>> {
    check_noise(params, noise, temperature)?;
    let eps = noise.values();
    Ok(match params {
        PosteriorParams::Gaussian { mean, var } => mean
            .iter()
            .zip(var)
            .zip(eps)
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect(),
        PosteriorParams::LogitNormal { mean, var } => mean
            .iter()
            .zip(var)
            .zip(eps)
            .map(|((m, v), e)| sigmoid(m + v.sqrt() * e))
            .collect(),
        PosteriorParams::Categorical { probs } => relaxed_categorical(probs, eps, temperature),
        PosteriorParams::Dirichlet { alpha } => {
            let ln_x: Vec<f64> = alpha.iter().zip(eps).map(|(a, u)| gamma_inv_cdf_ln(*a, *u)).collect();
            softmax(&ln_x)
        }
    })
}

fn relaxed_categorical(probs: &[f64], gumbel: &[f64], temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = probs
        .iter()
        .zip(gumbel)
        .map(|(p, g)| (p.max(f64::MIN_POSITIVE).ln() + g) / temperature)
        .collect();
    softmax(&logits)
}

/// Reparameterized sample with its pathwise Jacobian.
///
/// Dirichlet samples normalize per-coordinate `Gamma(alpha_j, 1)` variates
/// drawn by inverse CDF; their derivative in `alpha_j` comes from implicit
/// differentiation of the Gamma CDF.
pub fn sample_with_grad(params: &PosteriorParams, noise: &Noise, temperature: f64) -> Result<ReparamSample> {
    check_noise(params, noise, temperature)?;
    let d = params.dim();
    let eps = noise.values();
    let param_len = params.family().param_len(d);
    let mut jac = vec![0.0; d * param_len];
    let value = match params {
        PosteriorParams::Gaussian { mean, var } => {
            let mut out = Vec::with_capacity(d);
            for j in 0..d {
                let sd = var[j].sqrt();
                out.push(mean[j] + sd * eps[j]);
                jac[j * param_len + j] = 1.0;
                jac[j * param_len + d + j] = eps[j] / (2.0 * sd);
            }
            out
        }
        PosteriorParams::LogitNormal { mean, var } => {
            let mut out = Vec::with_capacity(d);
            for j in 0..d {
                let sd = var[j].sqrt();
                let y = sigmoid(mean[j] + sd * eps[j]);
                let dy = y * (1.0 - y);
                out.push(y);
                jac[j * param_len + j] = dy;
                jac[j * param_len + d + j] = dy * eps[j] / (2.0 * sd);
            }
            out
        }
        PosteriorParams::Categorical { probs } => {
            let y = relaxed_categorical(probs, eps, temperature);
            for i in 0..d {
                for j in 0..d {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    jac[i * param_len + j] = y[i] * (delta - y[j]) / (temperature * probs[j].max(f64::MIN_POSITIVE));
                }
            }
            y
        }
        PosteriorParams::Dirichlet { alpha } => {
            let ln_x: Vec<f64> = alpha.iter().zip(eps).map(|(a, u)| gamma_inv_cdf_ln(*a, *u)).collect();
            let z = softmax(&ln_x);
            for j in 0..d {
                let dln = gamma_sample_dshape_ln(alpha[j], ln_x[j]);
                for i in 0..d {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    jac[i * param_len + j] = z[i] * (delta - z[j]) * dln;
                }
            }
            z
        }
    };
    Ok(ReparamSample {
        value,
        jacobian: jac,
        param_len,
    })
}

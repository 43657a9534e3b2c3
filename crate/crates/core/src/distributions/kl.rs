use std::f64::consts::PI;

use super::{check_pair, DistError, Family, PosteriorParams, Result};
use crate::special::{digamma, ln_gamma, trigamma};

/// Closed-form `KL(q || p)`.
pub fn kl(q: &PosteriorParams, p: &PosteriorParams) -> Result<f64> {
    kl_with_grad(q, p).map(|(v, _, _)| v)
}

/// `KL(q || p)` together with its gradients on the flat parameters of `q`
/// and of `p`.
pub fn kl_with_grad(q: &PosteriorParams, p: &PosteriorParams) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_pair(q, p)?;
    q.validate()?;
    p.validate()?;
    let d = q.dim();
    let (qf, pf) = (q.to_flat(), p.to_flat());
    let mut gq = vec![0.0; qf.len()];
    let mut gp = vec![0.0; pf.len()];
    let value = match q.family() {
        // logit-normal shares the logit-space Gaussian form
        Family::Gaussian | Family::LogitNormal => {
            let mut total = 0.0;
            for j in 0..d {
                let (mq, vq, mp, vp) = (qf[j], qf[d + j], pf[j], pf[d + j]);
                let diff = mq - mp;
                total += 0.5 * ((vp / vq).ln() + (vq + diff * diff) / vp - 1.0);
                gq[j] = diff / vp;
                gq[d + j] = 0.5 * (1.0 / vp - 1.0 / vq);
                gp[j] = -diff / vp;
                gp[d + j] = 0.5 * (1.0 / vp - (vq + diff * diff) / (vp * vp));
            }
            total
        }
        Family::Categorical => {
            let mut total = 0.0;
            for j in 0..d {
                let (a, b) = (qf[j], pf[j]);
                if a > 0.0 {
                    if b <= 0.0 {
                        return Ok((f64::INFINITY, gq, gp));
                    }
                    let l = (a / b).ln();
                    total += a * l;
                    gq[j] = l + 1.0;
                    gp[j] = -a / b;
                } else {
                    gq[j] = f64::NEG_INFINITY;
                }
            }
            total
        }
        Family::Dirichlet => {
            let a0: f64 = qf.iter().sum();
            let b0: f64 = pf.iter().sum();
            let psi_a0 = digamma(a0);
            let tri_a0 = trigamma(a0);
            let psi_b0 = digamma(b0);
            let mut total = ln_gamma(a0) - ln_gamma(b0);
            let diff_sum: f64 = qf.iter().zip(&pf).map(|(a, b)| a - b).sum();
            for j in 0..d {
                let (a, b) = (qf[j], pf[j]);
                let psi_a = digamma(a);
                total += ln_gamma(b) - ln_gamma(a) + (a - b) * (psi_a - psi_a0);
                gq[j] = (a - b) * trigamma(a) - tri_a0 * diff_sum;
                gp[j] = digamma(b) - psi_b0 - (psi_a - psi_a0);
            }
            total
        }
    };
    Ok((value, gq, gp))
}

/// Log density of `value` (log mass on one-hot vertices for categorical).
pub fn log_prob(params: &PosteriorParams, value: &[f64]) -> Result<f64> {
    params.validate()?;
    if value.len() != params.dim() {
        return Err(DistError::DimMismatch {
            expected: params.dim(),
            got: value.len(),
        });
    }
    if value.iter().any(|v| !v.is_finite()) {
        return Err(DistError::NonFinite);
    }
    let family = params.family();
    match params {
        PosteriorParams::Gaussian { mean, var } => Ok(mean
            .iter()
            .zip(var)
            .zip(value)
            .map(|((m, v), x)| -0.5 * (2.0 * PI * v).ln() - (x - m).powi(2) / (2.0 * v))
            .sum()),
        PosteriorParams::LogitNormal { mean, var } => {
            let mut total = 0.0;
            for ((m, v), &y) in mean.iter().zip(var).zip(value) {
                if y <= 0.0 || y >= 1.0 {
                    return Err(DistError::OutsideSupport(family));
                }
                let logit = (y / (1.0 - y)).ln();
                total += -0.5 * (2.0 * PI * v).ln() - (logit - m).powi(2) / (2.0 * v) - (y * (1.0 - y)).ln();
            }
            Ok(total)
        }
        PosteriorParams::Categorical { probs } => {
            let mut hot = None;
            for (i, &x) in value.iter().enumerate() {
                if x == 1.0 && hot.is_none() {
                    hot = Some(i);
                } else if x != 0.0 {
                    return Err(DistError::OutsideSupport(family));
                }
            }
            let i = hot.ok_or(DistError::OutsideSupport(family))?;
            Ok(probs[i].ln())
        }
        PosteriorParams::Dirichlet { alpha } => {
            let s: f64 = value.iter().sum();
            if value.iter().any(|&x| x <= 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(DistError::OutsideSupport(family));
            }
            let a0: f64 = alpha.iter().sum();
            Ok(ln_gamma(a0)
                + alpha
                    .iter()
                    .zip(value)
                    .map(|(a, x)| (a - 1.0) * x.ln() - ln_gamma(*a))
                    .sum::<f64>())
        }
    }
}
